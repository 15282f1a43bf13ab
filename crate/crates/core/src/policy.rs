//! Plug-in optimal reserve price and expected revenue from a value CDF and
//! density.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{AuctionError, Result};
use crate::gmm::models::MomentModel;
use crate::numeric::quad::integrate_pieces;
use crate::sim::ValueDistribution;
use crate::validation::ValidationReport;

/// Points of the audit grid and of the reserve-equation scan.
pub const AUDIT_POINTS: usize = 512;
/// Absolute tolerance of the revenue integral.
pub const REVENUE_TOLERANCE: f64 = 1e-8;
/// Target for `|r f(r) − (1 − F(r))|` at the returned reserve.
pub const RESERVE_TOLERANCE: f64 = 1e-8;
/// Allowed CDF mass defect for estimated handles.
pub const ESTIMATED_MASS_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandleLabel {
    True,
    Sp,
    Gpv,
}

impl HandleLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            HandleLabel::True => "true",
            HandleLabel::Sp => "sp",
            HandleLabel::Gpv => "gpv",
        }
    }
}

impl fmt::Display for HandleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type UnivariateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A value CDF/density pair on `[lower, upper]`.
#[derive(Clone)]
pub struct DensityHandle {
    label: HandleLabel,
    lower: f64,
    upper: f64,
    cdf: UnivariateFn,
    pdf: UnivariateFn,
    estimated: bool,
    /// Points where the density may have kinks; quadrature splits there.
    knots: Vec<f64>,
}

impl fmt::Debug for DensityHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityHandle")
            .field("label", &self.label)
            .field("support", &(self.lower, self.upper))
            .field("estimated", &self.estimated)
            .field("knots", &self.knots.len())
            .finish()
    }
}

impl DensityHandle {
    pub fn new(
        label: HandleLabel,
        lower: f64,
        upper: f64,
        cdf: UnivariateFn,
        pdf: UnivariateFn,
        estimated: bool,
    ) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(AuctionError::InvalidArgument(format!("bad support [{lower}, {upper}]")));
        }
        Ok(Self {
            label,
            lower,
            upper,
            cdf,
            pdf,
            estimated,
            knots: Vec::new(),
        })
    }

    /// Exact handle for `F(· | x)`.
    pub fn from_distribution(label: HandleLabel, dist: &ValueDistribution, x: &[f64], estimated: bool) -> Result<Self> {
        let (lo, hi) = dist.support();
        let (d1, d2) = (dist.clone(), dist.clone());
        let (x1, x2) = (x.to_vec(), x.to_vec());
        Self::new(
            label,
            lo,
            hi,
            Arc::new(move |v| d1.cdf(v, &x1)),
            Arc::new(move |v| d2.pdf(v, &x2)),
            estimated,
        )
    }

    /// Handle from density values on a grid: negative values are clipped,
    /// the density is interpolated linearly, restricted to `support` and
    /// renormalized so that the CDF (a cumulative trapezoid) reaches one at
    /// the upper end of the support.
    pub fn from_grid(label: HandleLabel, grid: &[f64], density: &[f64], support: (f64, f64)) -> Result<Self> {
        if grid.is_empty() || grid.len() != density.len() {
            return Err(AuctionError::EmptyGrid);
        }
        let (lo, hi) = (support.0.max(grid[0]), support.1.min(grid[grid.len() - 1]));
        if !(lo < hi) {
            return Err(AuctionError::InvalidArgument(format!(
                "support [{}, {}] does not overlap the grid",
                support.0, support.1
            )));
        }
        let interp = |v: f64| -> f64 {
            let k = grid.partition_point(|g| *g <= v);
            if k == 0 {
                return density[0].max(0.0);
            }
            if k >= grid.len() {
                return density[grid.len() - 1].max(0.0);
            }
            let (g0, g1) = (grid[k - 1], grid[k]);
            let (f0, f1) = (density[k - 1].max(0.0), density[k].max(0.0));
            if g1 == g0 {
                return f1;
            }
            f0 + (f1 - f0) * (v - g0) / (g1 - g0)
        };
        let mut nodes = vec![lo];
        nodes.extend(grid.iter().copied().filter(|g| *g > lo && *g < hi));
        nodes.push(hi);
        let values: Vec<f64> = nodes.iter().map(|&v| interp(v)).collect();
        let mut cum = vec![0.0; nodes.len()];
        for k in 1..nodes.len() {
            cum[k] = cum[k - 1] + 0.5 * (values[k - 1] + values[k]) * (nodes[k] - nodes[k - 1]);
        }
        let mass = cum[cum.len() - 1];
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(AuctionError::InvalidArgument("grid density has no mass on its support".into()));
        }
        let nodes = Arc::new(nodes);
        let values = Arc::new(values.into_iter().map(|f| f / mass).collect::<Vec<f64>>());
        let cum = Arc::new(cum.into_iter().map(|c| c / mass).collect::<Vec<f64>>());
        let (n1, v1) = (nodes.clone(), values.clone());
        let pdf = move |v: f64| -> f64 {
            if v < n1[0] || v > n1[n1.len() - 1] {
                return 0.0;
            }
            let k = n1.partition_point(|g| *g <= v).clamp(1, n1.len() - 1);
            let (g0, g1) = (n1[k - 1], n1[k]);
            v1[k - 1] + (v1[k] - v1[k - 1]) * (v - g0) / (g1 - g0)
        };
        let (n2, v2, c2) = (nodes.clone(), values, cum);
        let cdf = move |v: f64| -> f64 {
            if v <= n2[0] {
                return 0.0;
            }
            if v >= n2[n2.len() - 1] {
                return 1.0;
            }
            let k = n2.partition_point(|g| *g <= v).clamp(1, n2.len() - 1);
            let (g0, g1) = (n2[k - 1], n2[k]);
            let fv = v2[k - 1] + (v2[k] - v2[k - 1]) * (v - g0) / (g1 - g0);
            (c2[k - 1] + 0.5 * (v2[k - 1] + fv) * (v - g0)).min(1.0)
        };
        let mut h = Self::new(label, lo, hi, Arc::new(cdf), Arc::new(pdf), true)?;
        h.knots = nodes.to_vec();
        Ok(h)
    }

    pub fn label(&self) -> HandleLabel {
        self.label
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn is_estimated(&self) -> bool {
        self.estimated
    }

    pub fn cdf(&self, v: f64) -> f64 {
        (self.cdf)(v)
    }

    pub fn pdf(&self, v: f64) -> f64 {
        (self.pdf)(v)
    }

    fn audit_grid(&self) -> Vec<f64> {
        (0..AUDIT_POINTS)
            .map(|k| self.lower + (self.upper - self.lower) * k as f64 / (AUDIT_POINTS - 1) as f64)
            .collect()
    }

    /// Monotone CDF, nonnegative density and unit mass on the audit grid.
    pub fn audit(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        let grid = self.audit_grid();
        let cdf: Vec<f64> = grid.iter().map(|&v| self.cdf(v)).collect();
        if let Some(k) = cdf.windows(2).position(|w| w[1] < w[0] - 1e-12) {
            report.error(
                "CDF_NOT_MONOTONE",
                format!("{} handle: CDF decreases after v={}", self.label, grid[k]),
            );
        }
        if let Some(v) = grid.iter().find(|&&v| !(self.pdf(v) >= 0.0)) {
            report.error("NEGATIVE_DENSITY", format!("{} handle: density < 0 at v={v}", self.label));
        }
        let defect = (cdf[cdf.len() - 1] - 1.0).abs();
        let allowed = if self.estimated { ESTIMATED_MASS_TOLERANCE } else { 1e-12 };
        if !(defect <= allowed) {
            report.error(
                "CDF_MASS",
                format!("{} handle: F(v_hi) misses 1 by {defect:e}", self.label),
            );
        }
        report
    }

    fn checked(&self) -> Result<()> {
        let report = self.audit();
        match report.issues.iter().find(|i| i.severity == crate::validation::Severity::Error) {
            Some(issue) => Err(AuctionError::InvalidArgument(issue.message.clone())),
            None => Ok(()),
        }
    }
}

/// `r f(r) − (1 − F(r))`.
pub fn reserve_residual(h: &DensityHandle, r: f64) -> f64 {
    r * h.pdf(r) - (1.0 - h.cdf(r))
}

/// Expected revenue of a first-price auction with `bidders` bidders and
/// reserve `r`:
/// `I [r (1−F(r)) F(r)^{I−1} + ∫_r^{v̄} (1−F(t)) t (I−1) F(t)^{I−2} f(t) dt]`.
pub fn expected_revenue(h: &DensityHandle, r: f64, bidders: usize) -> Result<f64> {
    if bidders < 2 {
        return Err(AuctionError::InvalidArgument(format!("need at least 2 bidders, got {bidders}")));
    }
    let (lo, hi) = h.support();
    if !(lo..=hi).contains(&r) {
        return Err(AuctionError::InvalidArgument(format!("reserve {r} outside [{lo}, {hi}]")));
    }
    let n = bidders as f64;
    let k = (bidders - 2) as i32;
    let fr = h.cdf(r);
    let head = r * (1.0 - fr) * fr.powi(bidders as i32 - 1);
    let mut breaks = vec![r];
    breaks.extend(h.knots.iter().copied().filter(|&t| t > r && t < hi));
    breaks.push(hi);
    let tail = integrate_pieces(
        |t| {
            let f = h.cdf(t);
            (1.0 - f) * t * (n - 1.0) * f.powi(k) * h.pdf(t)
        },
        &breaks,
        REVENUE_TOLERANCE / n,
    )?;
    Ok(n * (head + tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReserveChoice {
    pub r: f64,
    pub residual: f64,
    pub revenue: f64,
    /// `false` when the reserve equation has no root on the support and the
    /// lower bound was returned instead.
    pub root_found: bool,
}

fn bisect_root(h: &DensityHandle, mut a: f64, mut b: f64) -> f64 {
    let mut fa = reserve_residual(h, a);
    let mut best = if fa.abs() <= reserve_residual(h, b).abs() { a } else { b };
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = reserve_residual(h, m);
        if fm.abs() < reserve_residual(h, best).abs() {
            best = m;
        }
        if fm.abs() <= RESERVE_TOLERANCE * 1e-3 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    best
}

/// Solves `r f(r) = 1 − F(r)` by a grid scan for sign changes followed by
/// bisection. Among several roots the one with the highest expected revenue
/// wins; without any root the lower bound is returned with
/// `root_found = false`.
pub fn optimal_reserve(h: &DensityHandle, bidders: usize) -> Result<ReserveChoice> {
    h.checked()?;
    let grid = h.audit_grid();
    let res: Vec<f64> = grid.iter().map(|&v| reserve_residual(h, v)).collect();
    let mut roots = Vec::new();
    for k in 0..grid.len() {
        if res[k] == 0.0 {
            roots.push(grid[k]);
        } else if k + 1 < grid.len() && res[k + 1] != 0.0 && (res[k] < 0.0) != (res[k + 1] < 0.0) {
            roots.push(bisect_root(h, grid[k], grid[k + 1]));
        }
    }
    if roots.is_empty() {
        let (lo, _) = h.support();
        return Ok(ReserveChoice {
            r: lo,
            residual: reserve_residual(h, lo),
            revenue: expected_revenue(h, lo, bidders)?,
            root_found: false,
        });
    }
    let mut best: Option<ReserveChoice> = None;
    for r in roots {
        let revenue = expected_revenue(h, r, bidders)?;
        if best.is_none_or(|b| revenue > b.revenue) {
            best = Some(ReserveChoice {
                r,
                residual: reserve_residual(h, r),
                revenue,
                root_found: true,
            });
        }
    }
    Ok(best.expect("at least one root"))
}

/// `F(· | x; θ)` of a model with a closed-form value distribution.
pub fn density_from_theta(model: &dyn MomentModel, theta: &[f64], x: &[f64], label: HandleLabel) -> Result<DensityHandle> {
    let dist = model.value_distribution(theta).ok_or_else(|| {
        AuctionError::InvalidArgument(format!("model '{}' has no closed-form value distribution", model.name()))
    })?;
    DensityHandle::from_distribution(label, &dist, x, label != HandleLabel::True)
}

/// One row of a revenue table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub label: HandleLabel,
    pub r_star: f64,
    pub pi: f64,
    #[serde(rename = "I")]
    pub bidders: usize,
}

pub fn policy_row(h: &DensityHandle, bidders: usize) -> Result<PolicyRow> {
    let choice = optimal_reserve(h, bidders)?;
    Ok(PolicyRow {
        label: h.label(),
        r_star: choice.r,
        pi: choice.revenue,
        bidders,
    })
}
