//! Kernels, the weighted local-polynomial solver and bandwidth rules.

pub mod bandwidth;
pub mod local_poly;

use serde::{Deserialize, Serialize};

use crate::numeric::quad::adaptive_simpson;
use crate::validation::ValidationReport;

pub use bandwidth::{
    boundary_bandwidth, gpv_second_step_bandwidths, lpe_rates, rule_of_thumb_bandwidths, validate_bandwidth_plan,
    BandwidthMethod, NORMAL_REFERENCE, TRIWEIGHT_INFLATION, BandwidthPlan, GpvFirstBandwidths, GpvSecondBandwidths, RateExponents,
    Regime, RuleOfThumb,
};
pub use local_poly::{local_poly_solve, monomial_exponents, LocalDesign, LocalPolyFit};

const TRIWEIGHT_CONST: f64 = 35.0 / 32.0;

/// `(35/32)(1 - u²)³` on `[-1, 1]`, zero outside.
#[inline]
pub fn triweight(u: f64) -> f64 {
    if u.abs() > 1.0 {
        return 0.0;
    }
    let t = 1.0 - u * u;
    TRIWEIGHT_CONST * t * t * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Triweight,
    ProductTriweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Target order requested by the caller (R − 1 for the first stage).
    pub order: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::triweight()
    }
}

impl KernelSpec {
    pub fn triweight() -> Self {
        Self {
            family: KernelFamily::Triweight,
            order: 2,
        }
    }

    pub fn product_triweight() -> Self {
        Self {
            family: KernelFamily::ProductTriweight,
            order: 2,
        }
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    /// Order actually delivered by the univariate factor.
    pub fn achieved_order(&self) -> usize {
        2
    }

    /// Product of the univariate factor over the axes of `u`.
    pub fn eval(&self, u: &[f64]) -> f64 {
        u.iter().map(|&v| triweight(v)).product()
    }

    /// Numerical checks of normalization, symmetry, support and order.
    pub fn check(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        let mass = adaptive_simpson(triweight, -1.0, 1.0, 1e-14).unwrap_or(f64::NAN);
        if (mass - 1.0).abs() <= 1e-10 {
            report.info("KERNEL_MASS", format!("integral {mass:.15}"));
        } else {
            report.error("KERNEL_MASS", format!("integral {mass} differs from 1"));
        }
        let asymmetric = (0..=1000)
            .map(|k| k as f64 / 1000.0 * 1.2)
            .any(|u| triweight(u) != triweight(-u));
        if asymmetric {
            report.error("KERNEL_SYMMETRY", "K(u) != K(-u)");
        }
        if triweight(1.0 + 1e-12) != 0.0 || triweight(-1.0 - 1e-12) != 0.0 {
            report.error("KERNEL_SUPPORT", "kernel is nonzero outside [-1, 1]");
        }
        let second = adaptive_simpson(|u| u * u * triweight(u), -1.0, 1.0, 1e-14).unwrap_or(0.0);
        report.info("KERNEL_SECOND_MOMENT", format!("{second:.15}"));
        if self.order > self.achieved_order() {
            report.warn(
                "KERNEL_ORDER",
                format!(
                    "requested order {} but the triweight is of order {}",
                    self.order,
                    self.achieved_order()
                ),
            );
        }
        report
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, u: &[f64]) -> f64 {
    spec.eval(u)
}
