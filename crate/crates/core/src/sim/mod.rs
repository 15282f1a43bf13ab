//! Symmetric IPV equilibrium bidding, the truncated-lognormal designs and
//! the Monte Carlo harness.

pub mod monte_carlo;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AuctionDataset, AuctionRecord};
use crate::error::{AuctionError, Result};
use crate::gmm::models::{CovariateIndex, LogVariance, VALUE_LOWER, VALUE_UPPER};
use crate::numeric::normal::{log_cdf_diff, norm_ppf, TruncatedNormal};
use crate::numeric::quad::adaptive_simpson;

pub use monte_carlo::{run_monte_carlo, McConfig, McReport, ReplicationOutcome};

/// Absolute tolerance of the bid-function integral.
pub const BID_TOLERANCE: f64 = 1e-9;

pub type ConditionalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// `μ(x) = intercept + slope · s(x)` on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLocation {
    pub intercept: f64,
    pub slope: f64,
    /// `None` for a location that ignores covariates.
    pub index: Option<CovariateIndex>,
}

impl LogLocation {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.index {
            Some(s) => self.intercept + self.slope * s.eval(x),
            None => self.intercept,
        }
    }
}

/// Conditional value distribution `F(· | x)` on `[lower, upper]`.
#[derive(Clone)]
pub enum ValueDistribution {
    /// `ln V | x ~ N(μ(x), σ²(x))` restricted to `[ln lower, ln upper]`.
    TruncatedLognormal {
        location: LogLocation,
        variance: LogVariance,
        lower: f64,
        upper: f64,
    },
    Uniform { lower: f64, upper: f64 },
    /// Arbitrary conditional CDF and density; the CDF must be strictly
    /// increasing on the support.
    Custom {
        cdf: ConditionalFn,
        pdf: ConditionalFn,
        lower: f64,
        upper: f64,
    },
}

impl fmt::Debug for ValueDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueDistribution::TruncatedLognormal {
                location,
                variance,
                lower,
                upper,
            } => f
                .debug_struct("TruncatedLognormal")
                .field("location", location)
                .field("variance", variance)
                .field("lower", lower)
                .field("upper", upper)
                .finish(),
            ValueDistribution::Uniform { lower, upper } => {
                f.debug_struct("Uniform").field("lower", lower).field("upper", upper).finish()
            }
            ValueDistribution::Custom { lower, upper, .. } => {
                f.debug_struct("Custom").field("lower", lower).field("upper", upper).finish()
            }
        }
    }
}

impl ValueDistribution {
    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(AuctionError::InvalidArgument(format!("empty support [{lower}, {upper}]")));
        }
        Ok(ValueDistribution::Uniform { lower, upper })
    }

    pub fn truncated_lognormal(location: LogLocation, variance: LogVariance, lower: f64, upper: f64) -> Result<Self> {
        if !(0.0 < lower && lower < upper) {
            return Err(AuctionError::InvalidArgument(format!(
                "lognormal support must satisfy 0 < lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(ValueDistribution::TruncatedLognormal {
            location,
            variance,
            lower,
            upper,
        })
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            ValueDistribution::TruncatedLognormal { lower, upper, .. }
            | ValueDistribution::Uniform { lower, upper }
            | ValueDistribution::Custom { lower, upper, .. } => (*lower, *upper),
        }
    }

    /// The distribution at a fixed covariate value.
    pub fn at<'a>(&'a self, x: &'a [f64]) -> Conditional<'a> {
        match self {
            ValueDistribution::TruncatedLognormal {
                location,
                variance,
                lower,
                upper,
            } => {
                let tn = TruncatedNormal::new(location.eval(x), variance.eval(x).sqrt(), lower.ln(), upper.ln());
                Conditional::Lognormal {
                    tn,
                    lower: *lower,
                    upper: *upper,
                }
            }
            ValueDistribution::Uniform { lower, upper } => Conditional::Uniform {
                lower: *lower,
                upper: *upper,
            },
            ValueDistribution::Custom { cdf, pdf, lower, upper } => Conditional::Custom {
                cdf,
                pdf,
                x,
                lower: *lower,
                upper: *upper,
            },
        }
    }

    pub fn cdf(&self, v: f64, x: &[f64]) -> f64 {
        self.at(x).cdf(v)
    }

    pub fn pdf(&self, v: f64, x: &[f64]) -> f64 {
        self.at(x).pdf(v)
    }

    pub fn quantile(&self, u: f64, x: &[f64]) -> f64 {
        self.at(x).quantile(u)
    }
}

/// [`ValueDistribution`] evaluated at one covariate value.
pub enum Conditional<'a> {
    Lognormal { tn: TruncatedNormal, lower: f64, upper: f64 },
    Uniform { lower: f64, upper: f64 },
    Custom {
        cdf: &'a ConditionalFn,
        pdf: &'a ConditionalFn,
        x: &'a [f64],
        lower: f64,
        upper: f64,
    },
}

impl Conditional<'_> {
    pub fn support(&self) -> (f64, f64) {
        match self {
            Conditional::Lognormal { lower, upper, .. }
            | Conditional::Uniform { lower, upper }
            | Conditional::Custom { lower, upper, .. } => (*lower, *upper),
        }
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v <= lo {
            return 0.0;
        }
        if v >= hi {
            return 1.0;
        }
        match self {
            Conditional::Lognormal { tn, .. } => tn.cdf(v.ln()),
            Conditional::Uniform { lower, upper } => (v - lower) / (upper - lower),
            Conditional::Custom { cdf, x, .. } => cdf(v, x).clamp(0.0, 1.0),
        }
    }

    /// `ln F(v)`, kept accurate where `F` underflows.
    pub fn log_cdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v <= lo {
            return f64::NEG_INFINITY;
        }
        if v >= hi {
            return 0.0;
        }
        match self {
            Conditional::Lognormal { tn, .. } => {
                let (alpha, _) = tn.standardized_bounds();
                let z = (v.ln() - tn.mu) / tn.sigma;
                (log_cdf_diff(alpha, z) - tn.log_mass()).min(0.0)
            }
            _ => self.cdf(v).ln(),
        }
    }

    pub fn pdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v < lo || v > hi {
            return 0.0;
        }
        match self {
            Conditional::Lognormal { tn, .. } => tn.pdf(v.ln()) / v,
            Conditional::Uniform { lower, upper } => 1.0 / (upper - lower),
            Conditional::Custom { pdf, x, .. } => pdf(v, x).max(0.0),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Conditional::Lognormal { tn, lower, upper } => tn.quantile(u).exp().clamp(*lower, *upper),
            Conditional::Uniform { lower, upper } => lower + u * (upper - lower),
            Conditional::Custom { lower, upper, .. } => {
                let (mut a, mut b) = (*lower, *upper);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if m <= a || m >= b {
                        break;
                    }
                    if self.cdf(m) < u {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                0.5 * (a + b)
            }
        }
    }
}

/// Equilibrium bid `v − ∫_{v_lo}^{v} (F(t|x)/F(v|x))^{I−1} dt`.
pub fn equilibrium_bid(dist: &ValueDistribution, x: &[f64], v: f64, bidders: usize) -> Result<f64> {
    bid_at(&dist.at(x), v, bidders)
}

/// [`equilibrium_bid`] for a distribution already fixed at `x`.
pub fn bid_at(cond: &Conditional<'_>, v: f64, bidders: usize) -> Result<f64> {
    if bidders < 2 {
        return Err(AuctionError::InvalidArgument(format!("need at least 2 bidders, got {bidders}")));
    }
    let (lo, hi) = cond.support();
    if !(lo..=hi).contains(&v) {
        return Err(AuctionError::InvalidArgument(format!("value {v} outside support [{lo}, {hi}]")));
    }
    if v == lo {
        return Ok(lo);
    }
    let log_fv = cond.log_cdf(v);
    let k = (bidders - 1) as f64;
    if !log_fv.is_finite() {
        // F(v) underflows only within rounding of v_lo, where F is linear.
        return Ok(v - (v - lo) / bidders as f64);
    }
    let shading = adaptive_simpson(
        |t| {
            let r = k * (cond.log_cdf(t) - log_fv);
            if r.is_finite() {
                r.min(0.0).exp()
            } else {
                0.0
            }
        },
        lo,
        v,
        BID_TOLERANCE,
    )?;
    Ok((v - shading).clamp(lo, v))
}

/// The four simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecId {
    /// `μ = 1 + X`, `σ² = 1`, one covariate.
    #[serde(rename = "d1")]
    D1,
    /// `μ = 1 + X₁/X₂`, `σ² = 1`.
    #[serde(rename = "d2-1")]
    D2Ratio,
    /// `μ = 1 + X₁ + X₂`, `σ² = 1`.
    #[serde(rename = "d2-2")]
    D2Sum,
    /// `μ = 1 + X₁/X₂`, `σ² = exp(0.01 (X₁ + X₂))`.
    #[serde(rename = "d2-3")]
    D2RatioHet,
}

impl SpecId {
    pub const ALL: [SpecId; 4] = [SpecId::D1, SpecId::D2Ratio, SpecId::D2Sum, SpecId::D2RatioHet];

    pub fn as_str(&self) -> &'static str {
        match self {
            SpecId::D1 => "d1",
            SpecId::D2Ratio => "d2-1",
            SpecId::D2Sum => "d2-2",
            SpecId::D2RatioHet => "d2-3",
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match self {
            SpecId::D1 => 1,
            _ => 2,
        }
    }

    pub fn index(&self) -> CovariateIndex {
        match self {
            SpecId::D1 => CovariateIndex::Single,
            SpecId::D2Ratio | SpecId::D2RatioHet => CovariateIndex::Ratio,
            SpecId::D2Sum => CovariateIndex::Sum,
        }
    }

    pub fn variance(&self) -> LogVariance {
        match self {
            SpecId::D2RatioHet => LogVariance::ExpSum(0.01),
            _ => LogVariance::Constant(1.0),
        }
    }

    /// Built-in moment model matching the design.
    pub fn model_name(&self) -> &'static str {
        match self {
            SpecId::D1 => "lognormal-score",
            SpecId::D2Ratio => "lognormal-score-ratio",
            SpecId::D2Sum => "lognormal-score-sum",
            SpecId::D2RatioHet => "lognormal-score-ratio-het",
        }
    }
}

impl fmt::Display for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpecId {
    type Err = AuctionError;

    fn from_str(s: &str) -> Result<Self> {
        SpecId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| AuctionError::InvalidArgument(format!("unknown spec '{s}' (expected d1, d2-1, d2-2 or d2-3)")))
    }
}

/// A design plus its size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub spec: SpecId,
    #[serde(rename = "I")]
    pub bidders: usize,
    #[serde(rename = "L")]
    pub auctions: usize,
}

/// True parameter of every design.
pub const TRUE_THETA: [f64; 2] = [1.0, 1.0];

/// Correlation of the log-covariates in the two-covariate designs.
pub const COVARIATE_CORRELATION: f64 = 0.8;

impl DgpSpec {
    pub fn new(spec: SpecId, bidders: usize, auctions: usize) -> Result<Self> {
        if bidders < 2 {
            return Err(AuctionError::InvalidArgument(format!("need at least 2 bidders, got {bidders}")));
        }
        if auctions == 0 {
            return Err(AuctionError::InvalidArgument("need at least one auction".into()));
        }
        Ok(Self {
            spec,
            bidders,
            auctions,
        })
    }

    pub fn covariate_dim(&self) -> usize {
        self.spec.covariate_dim()
    }

    /// `F(· | x; θ)` of the design, truncated to `[0.055, 30]`.
    pub fn value_distribution(&self, theta: &[f64]) -> ValueDistribution {
        ValueDistribution::TruncatedLognormal {
            location: LogLocation {
                intercept: theta[0],
                slope: theta[1],
                index: Some(self.spec.index()),
            },
            variance: self.spec.variance(),
            lower: VALUE_LOWER,
            upper: VALUE_UPPER,
        }
    }

    pub fn true_distribution(&self) -> ValueDistribution {
        self.value_distribution(&TRUE_THETA)
    }

    fn draw_covariates(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (lo, hi) = (VALUE_LOWER.ln(), VALUE_UPPER.ln());
        match self.covariate_dim() {
            1 => {
                let tn = TruncatedNormal::new(0.0, 1.0, lo, hi);
                vec![tn.quantile(open_unit(rng)).exp().clamp(VALUE_LOWER, VALUE_UPPER)]
            }
            _ => {
                let rho = COVARIATE_CORRELATION;
                let tail = (1.0 - rho * rho).sqrt();
                loop {
                    let z1 = norm_ppf(open_unit(rng));
                    let z2 = norm_ppf(open_unit(rng));
                    let y1 = 1.0 + z1;
                    let y2 = 1.0 + rho * z1 + tail * z2;
                    if (lo..=hi).contains(&y1) && (lo..=hi).contains(&y2) {
                        return vec![y1.exp(), y2.exp()];
                    }
                }
            }
        }
    }
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Per-replication generator: one ChaCha stream per `(seed, stream)`.
pub fn replication_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A simulated dataset with the private values behind every bid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: AuctionDataset,
    /// One vector per auction, aligned with its bids.
    pub values: Vec<Vec<f64>>,
}

/// [`simulate_replication`] on stream 0.
pub fn simulate_dataset(dgp: &DgpSpec, seed: u64) -> Result<SimulatedData> {
    simulate_replication(dgp, seed, 0)
}

/// Covariates, then values by inverse CDF, then equilibrium bids. All draws
/// come from the `(seed, stream)` generator in auction order, so the result
/// does not depend on the thread count.
pub fn simulate_replication(dgp: &DgpSpec, seed: u64, stream: u64) -> Result<SimulatedData> {
    let mut rng = replication_rng(seed, stream);
    let truth = dgp.true_distribution();
    let mut draws = Vec::with_capacity(dgp.auctions);
    for _ in 0..dgp.auctions {
        let x = dgp.draw_covariates(&mut rng);
        let u: Vec<f64> = (0..dgp.bidders).map(|_| open_unit(&mut rng)).collect();
        draws.push((x, u));
    }
    let rows: Vec<(AuctionRecord, Vec<f64>)> = draws
        .par_iter()
        .enumerate()
        .map(|(k, (x, u))| {
            let cond = truth.at(x);
            let values: Vec<f64> = u.iter().map(|&u| cond.quantile(u)).collect();
            let bids = values
                .iter()
                .map(|&v| bid_at(&cond, v, dgp.bidders))
                .collect::<Result<Vec<f64>>>()?;
            Ok((AuctionRecord::new((k + 1).to_string(), x.clone(), bids), values))
        })
        .collect::<Result<_>>()?;
    let (auctions, values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(SimulatedData {
        dataset: AuctionDataset::new(auctions, dgp.covariate_dim())?,
        values,
    })
}

/// Componentwise sample median of the auction covariates.
pub fn covariate_median(ds: &AuctionDataset) -> Vec<f64> {
    (0..ds.covariate_dim())
        .map(|j| crate::numeric::stats::median(&ds.covariate(j)))
        .collect()
}
