//! Replicated simulate / estimate / compare runs.
//!
//! Each replication draws its data from its own `(seed, rep)` stream and the
//! replications are collected in order, so a report does not depend on the
//! number of threads.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{AuctionError, Result};
use crate::first_stage::{recover_pseudo_values, BandwidthChoice, FirstStageEstimator, FirstStageOptions};
use crate::gmm::{estimate, GmmOptions, ModelOptions, ModelRegistry, MomentModel, WeightingMode};
use crate::gpv::{gpv_density, gpv_first_stage, GpvConfig};
use crate::kernel::BandwidthPlan;
use crate::numeric::stats::{mean, sample_sd};
use crate::policy::{density_from_theta, optimal_reserve, DensityHandle, HandleLabel};

use super::{covariate_median, simulate_replication, DgpSpec, TRUE_THETA};

use crate::gmm::models::{VALUE_LOWER, VALUE_UPPER};

/// First-step bandwidths of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BandwidthMode {
    RuleOfThumb,
    Explicit { plan: BandwidthPlan },
}

impl BandwidthMode {
    pub fn choice(&self) -> BandwidthChoice {
        match self {
            BandwidthMode::RuleOfThumb => BandwidthChoice::RuleOfThumb,
            BandwidthMode::Explicit { plan } => BandwidthChoice::Explicit(plan.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpSpec,
    pub reps: usize,
    pub seed: u64,
    pub bandwidths: BandwidthMode,
    /// Moment model; the design's lognormal score when `None`.
    pub model: Option<String>,
    pub truncation: bool,
    pub weighting: WeightingMode,
    /// Run the kernel baseline alongside.
    pub baseline: bool,
    pub lambda_delta: f64,
    pub grid_points: usize,
}

impl McConfig {
    pub fn new(dgp: DgpSpec, reps: usize, seed: u64) -> Self {
        Self {
            dgp,
            reps,
            seed,
            bandwidths: BandwidthMode::RuleOfThumb,
            model: None,
            truncation: true,
            weighting: WeightingMode::Identity,
            baseline: true,
            lambda_delta: 1.0,
            grid_points: 512,
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(self.dgp.spec.model_name())
    }

    /// Evaluation grid of the density plots: equally spaced on `[0.055, 30]`.
    pub fn grid(&self) -> Vec<f64> {
        value_grid(self.grid_points)
    }
}

pub fn value_grid(points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![VALUE_LOWER],
        _ => (0..points)
            .map(|k| VALUE_LOWER + (VALUE_UPPER - VALUE_LOWER) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Fewest surviving observations the baseline needs for a density estimate.
pub fn baseline_minimum(d: usize) -> usize {
    10 * (d + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub rep: usize,
    /// Reason the replication is excluded from the summary.
    pub failure: Option<String>,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub objective: Option<f64>,
    pub median_x: Vec<f64>,
    pub n_sp: usize,
    pub n_t: Option<usize>,
    pub r_true: Option<f64>,
    pub pi_true: Option<f64>,
    pub r_sp: Option<f64>,
    pub pi_sp: Option<f64>,
    pub r_gpv: Option<f64>,
    pub pi_gpv: Option<f64>,
    /// Why the baseline revenue is missing.
    pub gpv_note: Option<String>,
    #[serde(skip)]
    densities: Option<ReplicationDensities>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct ReplicationDensities {
    f_true: Vec<f64>,
    f_sp: Vec<f64>,
    f_gpv: Option<Vec<f64>>,
}

impl ReplicationOutcome {
    fn empty(rep: usize) -> Self {
        Self {
            rep,
            failure: None,
            theta_hat: vec![],
            converged: false,
            objective: None,
            median_x: vec![],
            n_sp: 0,
            n_t: None,
            r_true: None,
            pi_true: None,
            r_sp: None,
            pi_sp: None,
            r_gpv: None,
            pi_gpv: None,
            gpv_note: None,
            densities: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub reps: usize,
    pub successes: usize,
    pub failures: usize,
    pub theta_true: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    /// Monte Carlo standard error of the mean, `sd / sqrt(successes)`.
    pub theta_mc_se: Vec<f64>,
    pub theta_rmse: Vec<f64>,
    pub pi_true: Option<f64>,
    pub pi_sp: Option<f64>,
    /// `None` (reported as NA) when most replications have no baseline revenue.
    pub pi_gpv: Option<f64>,
    pub gpv_available: usize,
    pub n_sp_mean: Option<f64>,
    pub n_t_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub v: Vec<f64>,
    pub f_true: Vec<f64>,
    pub f_sp: Vec<f64>,
    pub f_gpv: Option<Vec<f64>>,
}

impl DensityGrid {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "v,f_true,f_sp,f_gpv")?;
        for k in 0..self.v.len() {
            let cell = |c: &[f64]| c.get(k).map(|v| fmt_f64(*v)).unwrap_or_default();
            let gpv = self.f_gpv.as_deref().map(cell).unwrap_or_default();
            writeln!(out, "{},{},{},{}", fmt_f64(self.v[k]), cell(&self.f_true), cell(&self.f_sp), gpv)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub model: String,
    pub summary: McSummary,
    pub replications: Vec<ReplicationOutcome>,
    pub grid: DensityGrid,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl McReport {
    pub fn failures(&self) -> impl Iterator<Item = &ReplicationOutcome> {
        self.replications.iter().filter(|r| !r.succeeded())
    }

    /// `report.json`, `theta.csv`, `density_grid.csv` and `revenue.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct Failure<'a> {
            rep: usize,
            reason: &'a str,
        }
        #[derive(Serialize)]
        struct Json<'a> {
            config: &'a McConfig,
            model: &'a str,
            summary: &'a McSummary,
            failures: Vec<Failure<'a>>,
        }
        let json = Json {
            config: &self.config,
            model: &self.model,
            summary: &self.summary,
            failures: self
                .failures()
                .map(|r| Failure {
                    rep: r.rep,
                    reason: r.failure.as_deref().unwrap_or(""),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&json).map_err(|e| AuctionError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join("report.json"), text)?;
        self.write_theta_csv(fs::File::create(dir.join("theta.csv"))?)?;
        self.grid.write_csv(fs::File::create(dir.join("density_grid.csv"))?)?;
        self.write_revenue_csv(fs::File::create(dir.join("revenue.csv"))?)?;
        Ok(())
    }

    pub fn write_theta_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let p = self.summary.theta_true.len();
        let d = self.config.dgp.covariate_dim();
        let mut header = vec!["rep".to_string(), "status".into(), "converged".into(), "objective".into()];
        header.extend((1..=p).map(|k| format!("theta_{k}")));
        header.extend((1..=d).map(|k| format!("median_x{k}")));
        header.extend(
            ["n_sp", "n_t", "r_true", "pi_true", "r_sp", "pi_sp", "r_gpv", "pi_gpv"]
                .iter()
                .map(|s| s.to_string()),
        );
        writeln!(out, "{}", header.join(","))?;
        for r in &self.replications {
            let mut row = vec![
                r.rep.to_string(),
                if r.succeeded() { "ok".into() } else { "failed".into() },
                r.converged.to_string(),
                opt(r.objective),
            ];
            row.extend((0..p).map(|k| r.theta_hat.get(k).map(|v| fmt_f64(*v)).unwrap_or_default()));
            row.extend((0..d).map(|k| r.median_x.get(k).map(|v| fmt_f64(*v)).unwrap_or_default()));
            row.push(r.n_sp.to_string());
            row.push(r.n_t.map(|n| n.to_string()).unwrap_or_default());
            for v in [r.r_true, r.pi_true, r.r_sp, r.pi_sp, r.r_gpv, r.pi_gpv] {
                row.push(opt(v));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_revenue_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "spec,L,pi_true,pi_sp,pi_gpv")?;
        let s = &self.summary;
        writeln!(
            out,
            "{},{},{},{},{}",
            self.config.dgp.spec,
            self.config.dgp.auctions,
            opt(s.pi_true),
            opt(s.pi_sp),
            opt(s.pi_gpv)
        )?;
        Ok(())
    }
}

fn grid_values(h: &DensityHandle, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&v| h.pdf(v)).collect()
}

struct Context<'a> {
    cfg: &'a McConfig,
    model: Arc<dyn MomentModel>,
    grid: Vec<f64>,
}

fn run_replication(ctx: &Context<'_>, rep: usize) -> ReplicationOutcome {
    let mut out = ReplicationOutcome::empty(rep);
    if let Err(e) = replication_body(ctx, rep, &mut out) {
        out.failure = Some(format!("{}: {e}", e.code()));
        out.densities = None;
    }
    out
}

fn replication_body(ctx: &Context<'_>, rep: usize, out: &mut ReplicationOutcome) -> Result<()> {
    let cfg = ctx.cfg;
    let dgp = &cfg.dgp;
    let i = dgp.bidders;
    let sim = simulate_replication(dgp, cfg.seed, rep as u64)?;
    let ds = &sim.dataset;
    let x = covariate_median(ds);
    out.median_x = x.clone();

    let opts = FirstStageOptions {
        bandwidths: cfg.bandwidths.choice(),
        ..FirstStageOptions::default_for(dgp.covariate_dim())
    };
    let first = FirstStageEstimator::new(ds, &opts)?;
    let sample = recover_pseudo_values(&first)?;
    out.n_sp = sample.len();
    let gmm_opts = GmmOptions {
        seed: cfg.seed.wrapping_add(rep as u64),
        ..Default::default()
    };
    let est = estimate(ctx.model.as_ref(), &sample, cfg.weighting, &gmm_opts)?;
    out.theta_hat = est.theta_hat.clone();
    out.converged = est.converged;
    out.objective = Some(est.objective);

    let truth = DensityHandle::from_distribution(HandleLabel::True, &dgp.true_distribution(), &x, false)?;
    let t = optimal_reserve(&truth, i)?;
    out.r_true = Some(t.r);
    out.pi_true = Some(t.revenue);
    let sp = density_from_theta(ctx.model.as_ref(), &est.theta_hat, &x, HandleLabel::Sp)?;
    let s = optimal_reserve(&sp, i)?;
    out.r_sp = Some(s.r);
    out.pi_sp = Some(s.revenue);
    let mut dens = ReplicationDensities {
        f_true: grid_values(&truth, &ctx.grid),
        f_sp: grid_values(&sp, &ctx.grid),
        f_gpv: None,
    };

    if cfg.baseline {
        let gcfg = GpvConfig {
            lambda_delta: cfg.lambda_delta,
            ..Default::default()
        };
        match gpv_first_stage(ds, &gcfg) {
            Err(e) => {
                out.n_t = Some(0);
                out.gpv_note = Some(e.code().to_string());
            }
            Ok(g) => {
                out.n_t = Some(g.n_t);
                if g.n_t < baseline_minimum(dgp.covariate_dim()) {
                    out.gpv_note = Some(format!("n_t={} below {}", g.n_t, baseline_minimum(dgp.covariate_dim())));
                } else {
                    let result = gpv_density(&g, &gcfg, &x, &ctx.grid).and_then(|est| {
                        let choice = optimal_reserve(&est.handle()?, i)?;
                        Ok((est.density, choice))
                    });
                    match result {
                        Ok((density, choice)) => {
                            out.r_gpv = Some(choice.r);
                            out.pi_gpv = Some(choice.revenue);
                            dens.f_gpv = Some(density);
                        }
                        Err(e) => out.gpv_note = Some(e.code().to_string()),
                    }
                }
            }
        }
    }
    out.densities = Some(dens);
    if !est.converged {
        return Err(AuctionError::NotConverged {
            iterations: est.iterations,
        });
    }
    Ok(())
}

fn column_mean(rows: &[&Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return vec![];
    };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn summarize(cfg: &McConfig, reps: &[ReplicationOutcome]) -> McSummary {
    let ok: Vec<&ReplicationOutcome> = reps.iter().filter(|r| r.succeeded()).collect();
    let p = TRUE_THETA.len();
    let col = |k: usize| -> Vec<f64> { ok.iter().map(|r| r.theta_hat[k]).collect() };
    let n = ok.len() as f64;
    let theta_mean: Vec<f64> = (0..p).map(|k| mean(&col(k))).collect();
    let theta_sd: Vec<f64> = (0..p).map(|k| if ok.len() > 1 { sample_sd(&col(k)) } else { f64::NAN }).collect();
    let theta_rmse = (0..p)
        .map(|k| (col(k).iter().map(|t| (t - TRUE_THETA[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let gpv: Vec<f64> = ok.iter().filter_map(|r| r.pi_gpv).collect();
    let pi_gpv = (!gpv.is_empty() && 2 * gpv.len() >= ok.len()).then(|| mean(&gpv));
    McSummary {
        reps: cfg.reps,
        successes: ok.len(),
        failures: reps.len() - ok.len(),
        theta_true: TRUE_THETA.to_vec(),
        theta_mc_se: theta_sd.iter().map(|s| s / n.sqrt()).collect(),
        theta_mean,
        theta_sd,
        theta_rmse,
        pi_true: mean_of(ok.iter().filter_map(|r| r.pi_true)),
        pi_sp: mean_of(ok.iter().filter_map(|r| r.pi_sp)),
        pi_gpv,
        gpv_available: gpv.len(),
        n_sp_mean: mean_of(ok.iter().map(|r| r.n_sp as f64)),
        n_t_mean: mean_of(ok.iter().filter_map(|r| r.n_t.map(|n| n as f64))),
    }
}

/// Runs `cfg.reps` replications in parallel. Replication failures, including
/// GMM non-convergence, are recorded and excluded from the summary; they do
/// not abort the run.
pub fn run_monte_carlo(cfg: &McConfig, registry: &ModelRegistry) -> Result<McReport> {
    if cfg.reps == 0 {
        return Err(AuctionError::InvalidArgument("reps must be at least 1".into()));
    }
    if !(cfg.lambda_delta > 0.0) {
        return Err(AuctionError::InvalidArgument("lambda_delta must be positive".into()));
    }
    if cfg.grid_points < 2 {
        return Err(AuctionError::EmptyGrid);
    }
    DgpSpec::new(cfg.dgp.spec, cfg.dgp.bidders, cfg.dgp.auctions)?;
    let name = cfg.model_name().to_string();
    let model = registry.build(
        &name,
        cfg.dgp.covariate_dim(),
        &ModelOptions {
            truncation: cfg.truncation,
        },
    )?;
    if model.p() != TRUE_THETA.len() || model.value_distribution(&TRUE_THETA).is_none() {
        return Err(AuctionError::InvalidArgument(format!(
            "model '{name}' does not describe the simulated value distribution"
        )));
    }
    let ctx = Context {
        cfg,
        model,
        grid: cfg.grid(),
    };
    let replications: Vec<ReplicationOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replication(&ctx, rep))
        .collect();
    let summary = summarize(cfg, &replications);
    let ok: Vec<&ReplicationDensities> = replications
        .iter()
        .filter(|r| r.succeeded())
        .filter_map(|r| r.densities.as_ref())
        .collect();
    let gpv: Vec<&Vec<f64>> = ok.iter().filter_map(|d| d.f_gpv.as_ref()).collect();
    let grid = DensityGrid {
        v: ctx.grid.clone(),
        f_true: column_mean(&ok.iter().map(|d| &d.f_true).collect::<Vec<_>>()),
        f_sp: column_mean(&ok.iter().map(|d| &d.f_sp).collect::<Vec<_>>()),
        f_gpv: summary.pi_gpv.is_some().then(|| column_mean(&gpv)),
    };
    Ok(McReport {
        config: cfg.clone(),
        model: name,
        summary,
        replications,
        grid,
    })
}
