use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use auctionkit::data::fmt_f64;
use auctionkit::first_stage::{recover_pseudo_values, BandwidthChoice, FirstStageEstimator, FirstStageOptions, PseudoValueSample};
use auctionkit::gmm::{
    builtin_models, estimate as gmm_estimate, estimate_asymptotic_variance, GmmEstimate, GmmOptions, ModelOptions,
    MomentModel, VarianceOptions, WeightingMode,
};
use auctionkit::gpv::{gpv_density, gpv_first_stage, GpvConfig, GpvDensityEstimate, GroupTrim};
use auctionkit::kernel::{BandwidthPlan, Regime};
use auctionkit::policy::{density_from_theta, optimal_reserve, DensityHandle, HandleLabel};
use auctionkit::sim::monte_carlo::{baseline_minimum, value_grid, BandwidthMode, DensityGrid};
use auctionkit::sim::{covariate_median, run_monte_carlo, simulate_dataset, DgpSpec, McConfig, SimulatedData, SpecId};
use auctionkit::{group_by_bidder_count, load_dataset, save_dataset, AuctionDataset, AuctionError};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{BandwidthKind, RunConfig};
use crate::CliError;

fn io(e: std::io::Error) -> CliError {
    CliError::Runtime(e.into())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name)).map_err(io)?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(AuctionError::Io(e.to_string())))?;
    text.push('\n');
    fs::write(dir.join(name), text).map_err(io)
}

fn design_defaults() -> RunConfig {
    RunConfig {
        spec: Some(SpecId::D1),
        bidders: Some(5),
        auctions: Some(200),
        ..Default::default()
    }
}

fn fit_defaults(c: RunConfig) -> RunConfig {
    c.with_defaults(RunConfig {
        omega: Some(WeightingMode::Identity),
        truncation: Some(true),
        correction: Some(true),
        ..Default::default()
    })
}

fn baseline_defaults(c: RunConfig) -> RunConfig {
    c.with_defaults(RunConfig {
        baseline: Some(true),
        lambda_delta: Some(1.0),
        grid_points: Some(512),
        ..Default::default()
    })
}

fn dgp(cfg: &RunConfig) -> Result<DgpSpec, CliError> {
    let spec = cfg.spec.ok_or_else(|| CliError::Config("--spec is required".into()))?;
    Ok(DgpSpec::new(spec, cfg.bidders.unwrap_or(5), cfg.auctions.unwrap_or(200))?)
}

/// The dataset named by `--input`, or a fresh draw from `--spec` and `--seed`.
/// Simulation defaults are filled into `cfg` in the second case.
fn obtain_dataset(cfg: &mut RunConfig) -> Result<(AuctionDataset, Option<SimulatedData>), CliError> {
    if let Some(path) = &cfg.input {
        if !path.is_file() {
            return Err(CliError::Config(format!("input {} does not exist", path.display())));
        }
        let ds = load_dataset(File::open(path).map_err(io)?)?;
        if let Some(spec) = cfg.spec {
            if spec.covariate_dim() != ds.covariate_dim() {
                return Err(CliError::Config(format!(
                    "spec {spec} has d={}, dataset has d={}",
                    spec.covariate_dim(),
                    ds.covariate_dim()
                )));
            }
        }
        return Ok((ds, None));
    }
    if cfg.spec.is_none() || cfg.seed.is_none() {
        return Err(CliError::Config("need --input, or --spec with --seed to simulate".into()));
    }
    *cfg = cfg.clone().with_defaults(design_defaults());
    let sim = simulate_dataset(&dgp(cfg)?, cfg.require_seed()?)?;
    Ok((sim.dataset.clone(), Some(sim)))
}

fn first_stage_options(cfg: &RunConfig, d: usize) -> Result<FirstStageOptions, CliError> {
    let mut opts = FirstStageOptions::default_for(d);
    if cfg.bandwidth_kind()? == BandwidthKind::Explicit {
        let (Some(h_g), Some(h_1g), Some(h_2g)) = (cfg.h_g, cfg.h_1g, cfg.h_2g) else {
            return Err(CliError::Config("explicit bandwidths need --h-g, --h-1g and --h-2g".into()));
        };
        opts.bandwidths = BandwidthChoice::Explicit(BandwidthPlan::uniform(h_g, h_1g, h_2g, Regime::AsymptoticNormality, d)?);
    }
    Ok(opts)
}

fn model_name(cfg: &RunConfig, d: usize) -> String {
    match (&cfg.model, cfg.spec) {
        (Some(m), _) => m.clone(),
        (None, Some(s)) => s.model_name().to_string(),
        (None, None) if d == 1 => "lognormal-score".into(),
        (None, None) => "loglinear-meanvar".into(),
    }
}

fn build_model(cfg: &RunConfig, d: usize) -> Result<Arc<dyn MomentModel>, CliError> {
    let opts = ModelOptions {
        truncation: cfg.truncation.unwrap_or(true),
    };
    Ok(builtin_models().build(&model_name(cfg, d), d, &opts)?)
}

struct Fit {
    first: FirstStageEstimator,
    sample: PseudoValueSample,
    estimate: GmmEstimate,
    variance_note: Option<String>,
}

fn fit(cfg: &RunConfig, ds: &AuctionDataset, model: &dyn MomentModel) -> Result<Fit, CliError> {
    let opts = first_stage_options(cfg, ds.covariate_dim())?;
    let first = FirstStageEstimator::new(ds, &opts)?;
    let sample = recover_pseudo_values(&first)?;
    let gmm_opts = GmmOptions {
        seed: cfg.seed.unwrap_or(0),
        ..Default::default()
    };
    let mut estimate = gmm_estimate(model, &sample, cfg.omega.unwrap_or(WeightingMode::Identity), &gmm_opts)?;
    let q = estimate.omega.len();
    let omega = DMatrix::from_fn(q, q, |i, j| estimate.omega[i][j]);
    let vopts = VarianceOptions {
        correction: cfg.correction.unwrap_or(true),
    };
    let variance_note = match estimate_asymptotic_variance(model, &sample, Some(&first), &estimate.theta_hat, &omega, &vopts) {
        Ok(sigma) => {
            estimate.attach_variance(&sigma);
            None
        }
        Err(e) => Some(format!("{}: {e}", e.code())),
    };
    Ok(Fit {
        first,
        sample,
        estimate,
        variance_note,
    })
}

fn not_converged(e: &GmmEstimate) -> Result<(), CliError> {
    if e.converged {
        Ok(())
    } else {
        Err(CliError::Runtime(AuctionError::NotConverged { iterations: e.iterations }))
    }
}

pub fn simulate(cfg: RunConfig) -> Result<(), CliError> {
    let cfg = cfg.with_defaults(design_defaults());
    let seed = cfg.require_seed()?;
    let sim = simulate_dataset(&dgp(&cfg)?, seed)?;
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;
    save_dataset(&sim.dataset, create(&dir, "bids.csv")?)?;
    if cfg.with_truth == Some(true) {
        let mut w = create(&dir, "values.csv")?;
        writeln!(w, "auction_id,bidder_id,value").map_err(io)?;
        for (a, values) in sim.dataset.auctions().iter().zip(&sim.values) {
            for (p, v) in values.iter().enumerate() {
                writeln!(w, "{},{},{}", a.auction_id, p + 1, fmt_f64(*v)).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    println!("{} bids in {} auctions -> {}", sim.dataset.total_bids(), sim.dataset.len(), dir.join("bids.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    model: String,
    #[serde(flatten)]
    estimate: &'a GmmEstimate,
    variance_note: Option<&'a str>,
    bids: usize,
    pseudo_values: usize,
    clamp_count: usize,
    monotonicity_violations: usize,
    bandwidths: BTreeMap<usize, BandwidthPlan>,
}

pub fn estimate(cfg: RunConfig) -> Result<(), CliError> {
    let mut cfg = fit_defaults(cfg);
    let (ds, _) = obtain_dataset(&mut cfg)?;
    let d = ds.covariate_dim();
    cfg.model = Some(model_name(&cfg, d));
    cfg.bandwidths = Some(cfg.bandwidth_kind()?);
    let model = build_model(&cfg, d)?;
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;

    let f = fit(&cfg, &ds, model.as_ref())?;
    let report = EstimateReport {
        model: model_name(&cfg, d),
        estimate: &f.estimate,
        variance_note: f.variance_note.as_deref(),
        bids: ds.total_bids(),
        pseudo_values: f.sample.len(),
        clamp_count: f.sample.clamp_count,
        monotonicity_violations: f.sample.monotonicity_violations,
        bandwidths: f.first.plans(),
    };
    write_json(&dir, "estimate.json", &report)?;
    f.sample.write_csv(create(&dir, "pseudo_values.csv")?)?;

    let theta: Vec<String> = f.estimate.theta_hat.iter().map(|v| fmt_f64(*v)).collect();
    println!("theta_hat = [{}]", theta.join(", "));
    match &f.estimate.std_errors {
        Some(se) => println!("std_errors = [{}]", se.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")),
        None => println!("std_errors unavailable ({})", f.variance_note.as_deref().unwrap_or("")),
    }
    println!("converged = {}", f.estimate.converged);
    not_converged(&f.estimate)
}

/// Outcome of the kernel baseline at one point.
struct BaselineOutcome {
    n_t: usize,
    total_bids: usize,
    groups: Vec<GroupTrim>,
    estimate: Option<GpvDensityEstimate>,
    note: Option<String>,
}

fn run_baseline(cfg: &RunConfig, ds: &AuctionDataset, x: &[f64], grid: &[f64]) -> Result<BaselineOutcome, CliError> {
    let gcfg = GpvConfig {
        lambda_delta: cfg.lambda_delta.unwrap_or(1.0),
        ..Default::default()
    };
    let minimum = baseline_minimum(ds.covariate_dim());
    let first = match gpv_first_stage(ds, &gcfg) {
        Ok(f) => f,
        Err(AuctionError::AllTrimmed) => {
            return Ok(BaselineOutcome {
                n_t: 0,
                total_bids: ds.total_bids(),
                groups: vec![],
                estimate: None,
                note: Some("ALL_TRIMMED".into()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = BaselineOutcome {
        n_t: first.n_t,
        total_bids: first.total_bids,
        groups: first.groups.values().cloned().collect(),
        estimate: None,
        note: None,
    };
    if first.n_t < minimum {
        out.note = Some(format!("n_t={} below {minimum}", first.n_t));
    } else {
        out.estimate = Some(gpv_density(&first, &gcfg, x, grid)?);
    }
    Ok(out)
}

fn evaluation_point(cfg: &mut RunConfig, ds: &AuctionDataset) -> Result<Vec<f64>, CliError> {
    let x = cfg.x.clone().unwrap_or_else(|| covariate_median(ds));
    if x.len() != ds.covariate_dim() {
        return Err(CliError::Config(format!("--x has {} entries, dataset has d={}", x.len(), ds.covariate_dim())));
    }
    cfg.x = Some(x.clone());
    Ok(x)
}

/// Most common bidder count; the smaller one on ties.
fn modal_bidders(ds: &AuctionDataset) -> usize {
    group_by_bidder_count(ds)
        .iter()
        .max_by_key(|(i, g)| (g.auction_count(), std::cmp::Reverse(**i)))
        .map(|(i, _)| *i)
        .unwrap_or(2)
}

#[derive(Serialize)]
struct BaselineReport<'a> {
    x: &'a [f64],
    n_t: usize,
    total_bids: usize,
    available: bool,
    note: Option<&'a str>,
    trimmed_support: Option<(f64, f64)>,
    value_support: Option<(f64, f64)>,
    groups: &'a [GroupTrim],
    second_step: Option<&'a auctionkit::kernel::GpvSecondBandwidths>,
}

pub fn baseline(cfg: RunConfig) -> Result<(), CliError> {
    let mut cfg = baseline_defaults(cfg);
    cfg.baseline = None;
    let (ds, _) = obtain_dataset(&mut cfg)?;
    let x = evaluation_point(&mut cfg, &ds)?;
    let grid = value_grid(cfg.grid_points.unwrap_or(512));
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;

    let out = run_baseline(&cfg, &ds, &x, &grid)?;
    let mut w = create(&dir, "gpv_density.csv")?;
    writeln!(w, "v,f_gpv").map_err(io)?;
    for (k, v) in grid.iter().enumerate() {
        let f = out.estimate.as_ref().map(|e| fmt_f64(e.density[k])).unwrap_or_default();
        writeln!(w, "{},{f}", fmt_f64(*v)).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let report = BaselineReport {
        x: &x,
        n_t: out.n_t,
        total_bids: out.total_bids,
        available: out.estimate.is_some(),
        note: out.note.as_deref(),
        trimmed_support: out.estimate.as_ref().map(|e| e.trimmed_support),
        value_support: out.estimate.as_ref().map(|e| e.value_support),
        groups: &out.groups,
        second_step: out.estimate.as_ref().map(|e| &e.bandwidths),
    };
    write_json(&dir, "baseline.json", &report)?;
    println!("n_t = {} of {} bids", out.n_t, out.total_bids);
    if let Some(note) = &out.note {
        println!("baseline density NA ({note})");
    }
    Ok(())
}

/// True, parametric and kernel densities at one covariate point.
struct Analysis {
    bidders: usize,
    auctions: usize,
    grid: Vec<f64>,
    truth: Option<DensityHandle>,
    sp: DensityHandle,
    gpv: Option<(GpvDensityEstimate, DensityHandle)>,
    estimate: Option<GmmEstimate>,
}

fn analyze(cfg: &mut RunConfig) -> Result<Analysis, CliError> {
    *cfg = baseline_defaults(fit_defaults(cfg.clone()));
    let (ds, _) = obtain_dataset(cfg)?;
    let d = ds.covariate_dim();
    let x = evaluation_point(cfg, &ds)?;
    let bidders = cfg.bidders.unwrap_or_else(|| modal_bidders(&ds));
    if bidders < 2 {
        return Err(CliError::Config("need at least 2 bidders".into()));
    }
    cfg.bidders = Some(bidders);
    cfg.model = Some(model_name(cfg, d));
    let model = build_model(cfg, d)?;
    let grid = value_grid(cfg.grid_points.unwrap_or(512));

    let truth = match cfg.spec {
        Some(spec) => Some(DensityHandle::from_distribution(
            HandleLabel::True,
            &DgpSpec::new(spec, bidders, ds.len())?.true_distribution(),
            &x,
            false,
        )?),
        None => None,
    };
    let (theta, estimate) = match &cfg.theta {
        Some(t) => (t.clone(), None),
        None => {
            cfg.bandwidths = Some(cfg.bandwidth_kind()?);
            let f = fit(cfg, &ds, model.as_ref())?;
            (f.estimate.theta_hat.clone(), Some(f.estimate))
        }
    };
    if theta.len() != model.p() {
        return Err(CliError::Config(format!("theta needs {} entries", model.p())));
    }
    let sp = density_from_theta(model.as_ref(), &theta, &x, HandleLabel::Sp)?;
    let gpv = if cfg.baseline == Some(true) {
        match run_baseline(cfg, &ds, &x, &grid)?.estimate {
            Some(e) => {
                let h = e.handle()?;
                Some((e, h))
            }
            None => None,
        }
    } else {
        None
    };
    Ok(Analysis {
        bidders,
        auctions: ds.len(),
        grid,
        truth,
        sp,
        gpv,
        estimate,
    })
}

fn finish_analysis(a: &Analysis) -> Result<(), CliError> {
    match &a.estimate {
        Some(e) => not_converged(e),
        None => Ok(()),
    }
}

pub fn revenue(cfg: RunConfig) -> Result<(), CliError> {
    let mut cfg = cfg;
    let a = analyze(&mut cfg)?;
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;
    let spec = cfg.spec.map(|s| s.to_string()).unwrap_or_default();
    let mut w = create(&dir, "revenue.csv")?;
    writeln!(w, "label,r_star,pi,I,spec,L").map_err(io)?;
    let mut rows: Vec<(HandleLabel, Option<&DensityHandle>)> = vec![];
    if let Some(t) = &a.truth {
        rows.push((HandleLabel::True, Some(t)));
    }
    rows.push((HandleLabel::Sp, Some(&a.sp)));
    if cfg.baseline == Some(true) {
        rows.push((HandleLabel::Gpv, a.gpv.as_ref().map(|(_, h)| h)));
    }
    for (label, handle) in rows {
        let (r, pi) = match handle {
            Some(h) => {
                let c = optimal_reserve(h, a.bidders)?;
                if !c.root_found {
                    eprintln!("warning: no interior reserve for {}, using the support minimum", label.as_str());
                }
                (fmt_f64(c.r), fmt_f64(c.revenue))
            }
            None => (String::new(), String::new()),
        };
        writeln!(w, "{},{r},{pi},{},{spec},{}", label.as_str(), a.bidders, a.auctions).map_err(io)?;
        println!("{:>4}  r* = {:<22} pi = {}", label.as_str(), if r.is_empty() { "NA" } else { &r }, if pi.is_empty() { "NA" } else { &pi });
    }
    w.flush().map_err(io)?;
    finish_analysis(&a)
}

pub fn plot_data(cfg: RunConfig) -> Result<(), CliError> {
    let mut cfg = cfg;
    let a = analyze(&mut cfg)?;
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;
    let eval = |h: &DensityHandle| a.grid.iter().map(|&v| h.pdf(v)).collect::<Vec<_>>();
    let grid = DensityGrid {
        v: a.grid.clone(),
        f_true: a.truth.as_ref().map(eval).unwrap_or_default(),
        f_sp: eval(&a.sp),
        f_gpv: a.gpv.as_ref().map(|(e, _)| e.density.clone()),
    };
    grid.write_csv(create(&dir, "density_grid.csv")?)?;
    println!("{} grid points -> {}", grid.v.len(), dir.join("density_grid.csv").display());
    finish_analysis(&a)
}

pub fn mc(cfg: RunConfig) -> Result<(), CliError> {
    let mut cfg = baseline_defaults(fit_defaults(cfg.with_defaults(design_defaults())));
    cfg.reps = Some(cfg.reps.unwrap_or(100));
    cfg.x = None;
    let seed = cfg.require_seed()?;
    let dgp = dgp(&cfg)?;
    let d = dgp.covariate_dim();
    cfg.model = Some(model_name(&cfg, d));
    let bandwidths = match cfg.bandwidth_kind()? {
        BandwidthKind::RuleOfThumb => BandwidthMode::RuleOfThumb,
        BandwidthKind::Explicit => match first_stage_options(&cfg, d)?.bandwidths {
            BandwidthChoice::Explicit(plan) => BandwidthMode::Explicit { plan },
            BandwidthChoice::RuleOfThumb => BandwidthMode::RuleOfThumb,
        },
    };
    cfg.bandwidths = Some(cfg.bandwidth_kind()?);
    let mc = McConfig {
        dgp,
        reps: cfg.reps.unwrap_or(100),
        seed,
        bandwidths,
        model: cfg.model.clone(),
        truncation: cfg.truncation.unwrap_or(true),
        weighting: cfg.omega.unwrap_or(WeightingMode::Identity),
        baseline: cfg.baseline.unwrap_or(true),
        lambda_delta: cfg.lambda_delta.unwrap_or(1.0),
        grid_points: cfg.grid_points.unwrap_or(512),
    };
    let dir = cfg.out_dir();
    cfg.write_resolved(&dir)?;
    let report = run_monte_carlo(&mc, &builtin_models())?;
    report.write_dir(&dir)?;
    let s = &report.summary;
    let na = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "NA".into());
    println!("{} of {} replications succeeded", s.successes, s.reps);
    println!(
        "theta_mean = [{}]",
        s.theta_mean.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
    );
    println!("pi_true = {}  pi_sp = {}  pi_gpv = {}", na(s.pi_true), na(s.pi_sp), na(s.pi_gpv));
    Ok(())
}
