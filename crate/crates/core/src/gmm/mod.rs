//! GMM on pseudo private values: sample moments, the minimizer, and the
//! plug-in asymptotic variance that accounts for first-stage estimation.

pub mod models;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuctionError, Result};
use crate::first_stage::{FirstStageEstimator, PseudoValueEntry, PseudoValueSample};
use crate::numeric::optim::{
    bfgs_polish, inf_norm, nelder_mead, numerical_gradient, projected, BfgsOptions, Bounds, NelderMeadOptions,
};
use crate::numeric::stats::sample_sd;

pub use models::{
    builtin_models, self_test, CovariateIndex, LinearMean, LogVariance, LoglinearMeanVar,
    LognormalScore, ModelOptions, ModelRegistry, MomentModel,
};

/// `S_L(θ) = (1/L) Σ_ℓ (1/I_ℓ) Σ_p m(V̂_pℓ, Z_ℓ; θ)`, summed in auction order
/// and then bidder order regardless of thread count.
pub fn sample_moments(model: &dyn MomentModel, sample: &PseudoValueSample, theta: &[f64]) -> Result<Vec<f64>> {
    let auctions = sample.auctions();
    if auctions.is_empty() {
        return Err(AuctionError::InvalidArgument("empty pseudo-value sample".into()));
    }
    let per_auction: Vec<Vec<f64>> = auctions
        .par_iter()
        .with_min_len(32)
        .map(|a| auction_mean(model, a, theta))
        .collect::<Result<_>>()?;
    let mut s = vec![0.0; model.q()];
    for m in &per_auction {
        for (acc, v) in s.iter_mut().zip(m) {
            *acc += v;
        }
    }
    let l = auctions.len() as f64;
    Ok(s.into_iter().map(|v| v / l).collect())
}

fn auction_mean(model: &dyn MomentModel, entries: &[PseudoValueEntry], theta: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.q()];
    for e in entries {
        let m = model.eval(e.v_hat, &e.x, e.bidder_count, theta);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(AuctionError::NonfiniteMoment {
                auction: e.auction_index,
                bidder: e.p,
            });
        }
        for (a, v) in acc.iter_mut().zip(&m) {
            *a += v;
        }
    }
    let n = entries.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Per-auction averages of `m` at `theta`, one row per auction.
pub fn auction_moments(model: &dyn MomentModel, sample: &PseudoValueSample, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    sample
        .auctions()
        .par_iter()
        .with_min_len(32)
        .map(|a| auction_mean(model, a, theta))
        .collect()
}

/// `(1/L) Σ_ℓ (1/I_ℓ) Σ_p ∂m/∂θ`.
pub fn jacobian(model: &dyn MomentModel, sample: &PseudoValueSample, theta: &[f64]) -> DMatrix<f64> {
    let auctions = sample.auctions();
    let mut c = DMatrix::zeros(model.q(), model.p());
    for a in &auctions {
        let mut inner = DMatrix::zeros(model.q(), model.p());
        for e in *a {
            inner += model.d_theta(e.v_hat, &e.x, e.bidder_count, theta);
        }
        c += inner / a.len() as f64;
    }
    c / auctions.len() as f64
}

fn objective_value(s: &[f64], omega: &DMatrix<f64>) -> f64 {
    let sv = DVector::from_column_slice(s);
    (sv.transpose() * omega * &sv)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingMode {
    Identity,
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub seed: u64,
    /// Quasi-random starts in addition to the box center.
    pub extra_starts: usize,
    pub max_evaluations: usize,
    pub ftol: f64,
    /// Converged when the projected gradient drops below this fraction of
    /// its size at the starting point.
    pub gtol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            extra_starts: 4,
            max_evaluations: 2000,
            ftol: 1e-10,
            gtol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmEstimate {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub moment_norm: f64,
    pub sigma_hat: Option<Vec<Vec<f64>>>,
    pub std_errors: Option<Vec<f64>>,
    /// Number of auctions `L` behind the estimate.
    pub auctions: usize,
    pub omega: Vec<Vec<f64>>,
}

impl GmmEstimate {
    /// Stores `Σ̂` and the standard errors `sqrt(diag(Σ̂)/L)`.
    pub fn attach_variance(&mut self, sigma: &DMatrix<f64>) {
        let l = self.auctions as f64;
        self.std_errors = Some((0..sigma.nrows()).map(|i| (sigma[(i, i)].max(0.0) / l).sqrt()).collect());
        self.sigma_hat = Some(matrix_rows(sigma));
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Box center followed by `extra` randomly shifted Halton points.
fn starting_points(bounds: &Bounds, extra: usize, seed: u64) -> Vec<Vec<f64>> {
    let p = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
    let mut starts = vec![bounds.center()];
    for k in 1..=extra {
        let point = (0..p)
            .map(|j| {
                let u = (halton(k, PRIMES[j % PRIMES.len()]) + shift[j]).fract();
                let (lo, hi) = (bounds.lower[j], bounds.upper[j]);
                if lo.is_finite() && hi.is_finite() {
                    lo + u * (hi - lo)
                } else {
                    bounds.center()[j] + (u - 0.5) * bounds.scale(j)
                }
            })
            .collect();
        starts.push(point);
    }
    starts
}

/// Cholesky check of symmetry and positive definiteness.
pub fn check_weighting(omega: &DMatrix<f64>, q: usize) -> Result<()> {
    if omega.shape() != (q, q) {
        return Err(AuctionError::InvalidArgument(format!(
            "weighting matrix is {}x{}, expected {q}x{q}",
            omega.nrows(),
            omega.ncols()
        )));
    }
    let asym = (omega - omega.transpose()).abs().max();
    if asym > 1e-12 * omega.abs().max().max(1.0) || omega.clone().cholesky().is_none() {
        return Err(AuctionError::NotPositiveDefinite);
    }
    Ok(())
}

/// Minimizes `S_L(θ)ᵀ Ω S_L(θ)` over the model's parameter box: Nelder-Mead
/// from the box center and quasi-random starts, then a projected BFGS polish
/// from the best simplex vertex. Non-convergence is reported through
/// `converged = false`, not as an error.
pub fn gmm_minimize(
    model: &dyn MomentModel,
    sample: &PseudoValueSample,
    omega: &DMatrix<f64>,
    opts: &GmmOptions,
) -> Result<GmmEstimate> {
    check_weighting(omega, model.q())?;
    let bounds = model.theta_space();
    let starts = starting_points(&bounds, opts.extra_starts, opts.seed);
    // Surface data problems (non-finite moments) before searching.
    sample_moments(model, sample, &starts[0])?;
    let f = |theta: &[f64]| match sample_moments(model, sample, theta) {
        Ok(s) => objective_value(&s, omega),
        Err(_) => f64::INFINITY,
    };

    let nm_opts = NelderMeadOptions {
        max_evaluations: opts.max_evaluations,
        ftol: opts.ftol,
        ..Default::default()
    };
    let mut evaluations = 0;
    let mut iterations = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let start_value = f(&starts[0]);
    // Gradient scale at the first start: the polish begins near the optimum,
    // so a tolerance relative to its own first gradient is far too strict.
    let start_gradient = inf_norm(&projected(&numerical_gradient(&f, &starts[0], &bounds), &starts[0], &bounds));
    for s in &starts {
        let r = nelder_mead(f, s, &bounds, &nm_opts);
        evaluations += r.evaluations;
        iterations += r.evaluations;
        if best.as_ref().is_none_or(|(_, fx)| r.fx < *fx) {
            best = Some((r.x, r.fx));
        }
    }
    let (x_nm, f_nm) = best.expect("at least one start");
    let polish = bfgs_polish(
        f,
        &x_nm,
        &bounds,
        &BfgsOptions {
            max_evaluations: opts.max_evaluations,
            ftol: opts.ftol,
            gtol: opts.gtol,
        },
    );
    evaluations += polish.result.evaluations;
    iterations += polish.iterations;
    let (theta, fx) = if polish.result.fx <= f_nm {
        (polish.result.x.clone(), polish.result.fx)
    } else {
        (x_nm, f_nm)
    };
    let tiny = fx <= 1e-20 * start_value.max(f64::MIN_POSITIVE);
    let stationary = polish.gradient_norm <= opts.gtol * start_gradient;
    let converged = polish.result.converged || tiny || stationary;
    let s = sample_moments(model, sample, &theta)?;
    Ok(GmmEstimate {
        moment_norm: s.iter().map(|v| v * v).sum::<f64>().sqrt(),
        theta_hat: theta,
        objective: fx,
        converged,
        iterations,
        evaluations,
        gradient_norm: polish.gradient_norm,
        sigma_hat: None,
        std_errors: None,
        auctions: sample.auction_count(),
        omega: matrix_rows(omega),
    })
}

/// Covariance (1/L normalization) of per-auction rows.
pub fn row_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows.first().map_or(0, |r| r.len());
    let l = rows.len() as f64;
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= l;
    }
    let mut c = DMatrix::zeros(k, k);
    for r in rows {
        for a in 0..k {
            for b in 0..k {
                c[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    c / l
}

/// Efficient weighting: the inverse covariance of per-auction moments at `theta`.
pub fn two_step_weighting(model: &dyn MomentModel, sample: &PseudoValueSample, theta: &[f64]) -> Result<DMatrix<f64>> {
    let cov = row_covariance(&auction_moments(model, sample, theta)?);
    cov.cholesky()
        .map(|c| c.inverse())
        .ok_or(AuctionError::NotPositiveDefinite)
}

/// Identity-weighted estimate, optionally followed by a second step with
/// the efficient weighting matrix.
pub fn estimate(
    model: &dyn MomentModel,
    sample: &PseudoValueSample,
    weighting: WeightingMode,
    opts: &GmmOptions,
) -> Result<GmmEstimate> {
    let identity = DMatrix::identity(model.q(), model.q());
    let first = gmm_minimize(model, sample, &identity, opts)?;
    match weighting {
        WeightingMode::Identity => Ok(first),
        WeightingMode::TwoStep => {
            let omega = two_step_weighting(model, sample, &first.theta_hat)?;
            gmm_minimize(model, sample, &omega, opts)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarianceOptions {
    /// Include the first-stage correction; `false` gives the classical sandwich.
    pub correction: bool,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { correction: true }
    }
}

/// Kernel estimate of the covariate density within each bidder-count group,
/// times the group's share of auctions.
struct CovariateDensity {
    groups: BTreeMap<usize, (Vec<Vec<f64>>, Vec<f64>, f64)>,
}

impl CovariateDensity {
    fn new(sample: &PseudoValueSample) -> Self {
        let auctions = sample.auctions();
        let total = auctions.len() as f64;
        let mut by_group: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for a in &auctions {
            by_group.entry(a[0].bidder_count).or_default().push(a[0].x.clone());
        }
        let groups = by_group
            .into_iter()
            .map(|(i, xs)| {
                let l_i = xs.len() as f64;
                let h: Vec<f64> = (0..sample.d)
                    .map(|j| {
                        let col: Vec<f64> = xs.iter().map(|x| x[j]).collect();
                        let s = sample_sd(&col);
                        let s = if s > 0.0 { s } else { 1.0 };
                        1.06 * s * l_i.powf(-0.2)
                    })
                    .collect();
                (i, (xs, h, l_i / total))
            })
            .collect();
        Self { groups }
    }

    fn eval(&self, x: &[f64], bidder_count: usize) -> f64 {
        let Some((xs, h, share)) = self.groups.get(&bidder_count) else {
            return 0.0;
        };
        let hprod: f64 = h.iter().product();
        let k: f64 = xs
            .iter()
            .map(|xl| {
                (0..x.len())
                    .map(|j| crate::kernel::triweight((x[j] - xl[j]) / h[j]))
                    .product::<f64>()
            })
            .sum();
        share * k / (xs.len() as f64 * hprod)
    }
}

/// Plug-in `Σ̂ = Var(ψ₁)` with per-auction influence
/// `ψ₁ = −(1/I) Σ_p A {m_p + 2 (c_p − c̄)}`, `A = (CᵀΩC)⁻¹CᵀΩ` and first-stage
/// term `c_p = Σ_I 1/(I(I−1)) · N(Y_p, I) · g₀(Y_p, I) / f̂_m(X, I)`, where
/// `N = m₁ Ĝ / ĝ²` and `g₀(Y, I) = ĝ(b|x, I) f̂_m(x, I)`.
///
/// First-stage values of the observation's own group are taken from the
/// sample; other groups (heterogeneous `I` only) are queried from
/// `first_stage`, which is also used when the sample carries no first-stage
/// values.
pub fn estimate_asymptotic_variance(
    model: &dyn MomentModel,
    sample: &PseudoValueSample,
    first_stage: Option<&FirstStageEstimator>,
    theta_hat: &[f64],
    omega: &DMatrix<f64>,
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    check_weighting(omega, model.q())?;
    let c = jacobian(model, sample, theta_hat);
    let ctoc = c.transpose() * omega * &c;
    let inv = ctoc
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(AuctionError::SingularJacobian)?;
    let lu_diag = ctoc.clone().lu().u().diagonal().abs();
    if lu_diag.min() <= 1e-14 * lu_diag.max() {
        return Err(AuctionError::SingularJacobian);
    }
    let a = inv * c.transpose() * omega;

    let auctions = sample.auctions();
    let q = model.q();
    let mut corrections: Vec<Vec<Vec<f64>>> = Vec::with_capacity(auctions.len());
    if opts.correction {
        let fm = CovariateDensity::new(sample);
        let group_sizes: Vec<usize> = fm.groups.keys().copied().collect();
        let mut floors: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &sample.entries {
            let f = floors.entry(e.bidder_count).or_insert(0.0);
            if e.g_pdf.is_finite() {
                *f = f.max(e.g_pdf);
            }
        }
        let first_stage_at = |e: &PseudoValueEntry, i: usize| -> Result<(f64, f64)> {
            if i == e.bidder_count && e.g_cdf.is_finite() && e.g_pdf.is_finite() {
                return Ok((e.g_cdf, e.g_pdf));
            }
            let fs = first_stage.ok_or_else(|| {
                AuctionError::InvalidArgument(
                    "first-stage estimator required for the variance correction".into(),
                )
            })?;
            let g = fs.estimate_bid_cdf(e.bid, &e.x, i)?.clamp(0.0, 1.0);
            let floor = 1e-4 * floors.get(&i).copied().unwrap_or(0.0);
            let pdf = fs.estimate_bid_pdf(e.bid, &e.x, i)?.max(floor).max(f64::MIN_POSITIVE);
            Ok((g, pdf))
        };
        for auc in &auctions {
            let mut rows = Vec::with_capacity(auc.len());
            for e in *auc {
                let mut cp = vec![0.0; q];
                for &i in &group_sizes {
                    let (g_cdf, g_pdf) = first_stage_at(e, i)?;
                    let m1 = model.d_value(e.v_hat, &e.x, i, theta_hat);
                    let f_m = fm.eval(&e.x, i);
                    if f_m <= 0.0 {
                        continue;
                    }
                    let g0 = g_pdf * f_m;
                    let w = 1.0 / (i as f64 * (i as f64 - 1.0));
                    for k in 0..q {
                        let n = m1[k] * g_cdf / (g_pdf * g_pdf);
                        cp[k] += w * n * g0 / f_m;
                    }
                }
                rows.push(cp);
            }
            corrections.push(rows);
        }
    } else {
        for auc in &auctions {
            corrections.push(vec![vec![0.0; q]; auc.len()]);
        }
    }

    let l = auctions.len() as f64;
    let mut c_bar = vec![0.0; q];
    for rows in &corrections {
        let n = rows.len() as f64;
        for r in rows {
            for k in 0..q {
                c_bar[k] += r[k] / n;
            }
        }
    }
    for v in &mut c_bar {
        *v /= l;
    }

    let mut psi: Vec<Vec<f64>> = Vec::with_capacity(auctions.len());
    for (auc, rows) in auctions.iter().zip(&corrections) {
        let mut inner = DVector::<f64>::zeros(q);
        for (e, cp) in auc.iter().zip(rows) {
            let m = model.eval(e.v_hat, &e.x, e.bidder_count, theta_hat);
            for k in 0..q {
                inner[k] += m[k] + 2.0 * (cp[k] - c_bar[k]);
            }
        }
        let contribution = -(&a * inner) / auc.len() as f64;
        psi.push(contribution.iter().copied().collect());
    }
    let sigma = row_covariance(&psi);
    Ok((&sigma + sigma.transpose()) * 0.5)
}
