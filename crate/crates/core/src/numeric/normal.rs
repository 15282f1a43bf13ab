//! Standard normal functions and a numerically stable truncated normal.
//!
//! Tail probabilities are handled in log space so that truncation windows far
//! out in either tail (which the two-covariate designs produce routinely) keep
//! full relative precision.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn log_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(z)`.
pub fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `ln Φ(z)`, accurate deep into the lower tail.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > 5.0 {
        (-norm_sf(z)).ln_1p()
    } else if z > -30.0 {
        norm_cdf(z).ln()
    } else {
        // Asymptotic Mills-ratio expansion.
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
            + 105.0 / (z2 * z2 * z2 * z2);
        log_norm_pdf(z) - (-z).ln() + series.ln()
    }
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut z = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // The inverse is only a starting point; polish against the accurate CDF.
    for _ in 0..3 {
        let step = if z < 0.0 {
            (norm_cdf(z) - p) / norm_pdf(z)
        } else {
            -(norm_sf(z) - (1.0 - p)) / norm_pdf(z)
        };
        if !step.is_finite() {
            break;
        }
        z -= step;
    }
    z
}

/// Solves `ln Φ(z) = log_p`, usable when `p` itself underflows.
pub fn norm_ppf_log(log_p: f64) -> f64 {
    if log_p >= 0.0 {
        return f64::INFINITY;
    }
    let mut z = if log_p > -700.0 {
        norm_ppf(log_p.exp())
    } else {
        let t = -2.0 * log_p;
        -(t - (t * 2.0 * std::f64::consts::PI).ln()).sqrt()
    };
    if !z.is_finite() {
        return z;
    }
    // Newton on the log scale: d/dz ln Φ(z) = φ(z)/Φ(z).
    for _ in 0..6 {
        let lc = log_norm_cdf(z);
        let slope = (log_norm_pdf(z) - lc).exp();
        let step = (lc - log_p) / slope;
        z -= step;
        if step.abs() <= 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    z
}

/// `ln(Φ(hi) - Φ(lo))` for `lo < hi`.
pub fn log_cdf_diff(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    if hi <= 0.0 {
        let lh = log_norm_cdf(hi);
        let ll = log_norm_cdf(lo);
        lh + (-(ll - lh).exp()).ln_1p()
    } else if lo >= 0.0 {
        log_cdf_diff(-hi, -lo)
    } else {
        (1.0 - norm_cdf(lo) - norm_sf(hi)).ln()
    }
}

/// Normal `N(mu, sigma²)` restricted to `[lower, upper]` (either may be infinite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
    alpha: f64,
    beta: f64,
    log_mass: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, lower: f64, upper: f64) -> Self {
        let alpha = (lower - mu) / sigma;
        let beta = (upper - mu) / sigma;
        Self {
            mu,
            sigma,
            lower,
            upper,
            alpha,
            beta,
            log_mass: log_cdf_diff(alpha, beta),
        }
    }

    /// `ln Z` with `Z = Φ(β) - Φ(α)`.
    pub fn log_mass(&self) -> f64 {
        self.log_mass
    }

    pub fn standardized_bounds(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }

    pub fn pdf(&self, y: f64) -> f64 {
        if y < self.lower || y > self.upper {
            return 0.0;
        }
        let z = (y - self.mu) / self.sigma;
        (log_norm_pdf(z) - self.log_mass).exp() / self.sigma
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= self.lower {
            return 0.0;
        }
        if y >= self.upper {
            return 1.0;
        }
        let z = (y - self.mu) / self.sigma;
        (log_cdf_diff(self.alpha, z) - self.log_mass).exp().min(1.0)
    }

    /// Inverse CDF on the standardized scale, then mapped back.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let z = standardized_quantile(self.alpha, self.beta, u);
        (self.mu + self.sigma * z).clamp(self.lower, self.upper)
    }

    fn ratio(&self, log_num: f64) -> f64 {
        (log_num - self.log_mass).exp()
    }

    fn phi_over_mass(&self, z: f64) -> f64 {
        if z.is_finite() {
            self.ratio(log_norm_pdf(z))
        } else {
            0.0
        }
    }

    /// `∂ ln Z / ∂μ = (φ(α) - φ(β)) / (σ Z)`.
    pub fn dlog_mass_dmu(&self) -> f64 {
        (self.phi_over_mass(self.alpha) - self.phi_over_mass(self.beta)) / self.sigma
    }

    /// `∂² ln Z / ∂μ²`.
    pub fn d2log_mass_dmu2(&self) -> f64 {
        let ta = if self.alpha.is_finite() {
            self.alpha * self.phi_over_mass(self.alpha)
        } else {
            0.0
        };
        let tb = if self.beta.is_finite() {
            self.beta * self.phi_over_mass(self.beta)
        } else {
            0.0
        };
        let d = self.dlog_mass_dmu();
        (ta - tb) / (self.sigma * self.sigma) - d * d
    }

    pub fn mean(&self) -> f64 {
        self.mu + self.sigma * self.sigma * self.dlog_mass_dmu()
    }
}

fn standardized_quantile(alpha: f64, beta: f64, u: f64) -> f64 {
    if alpha >= 0.0 {
        // Reflect into the lower tail where log Φ keeps precision.
        return -standardized_quantile(-beta, -alpha, 1.0 - u);
    }
    if beta <= 0.0 {
        let lb = log_norm_cdf(beta);
        let la = log_norm_cdf(alpha);
        let r = (la - lb).exp();
        let log_p = lb + (u + (1.0 - u) * r).ln();
        return norm_ppf_log(log_p).clamp(alpha, beta);
    }
    let mass = 1.0 - norm_cdf(alpha) - norm_sf(beta);
    let p = norm_cdf(alpha) + u * mass;
    let z = if p <= 0.5 {
        norm_ppf(p)
    } else {
        let q = norm_sf(beta) + (1.0 - u) * mass;
        -norm_ppf(q)
    };
    z.clamp(alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::quad::adaptive_simpson;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.959963984540054) - 0.975).abs() < 1e-15);
        assert!((norm_ppf(0.975) - 1.959963984540054).abs() < 1e-12);
        // Φ(-40) underflows; its log does not.
        assert!((log_norm_cdf(-40.0) - (-804.608442013753788)).abs() < 1e-9);
        assert!((log_norm_cdf(-30.5) - (-469.462737322912114)).abs() < 1e-9);
    }

    #[test]
    fn log_cdf_is_continuous_at_branch_points() {
        for &z in &[-30.0, 5.0] {
            let a = log_norm_cdf(z - 1e-9);
            let b = log_norm_cdf(z + 1e-9);
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-12), "{z}: {a} {b}");
        }
    }

    #[test]
    fn ppf_log_inverts() {
        for &z in &[-45.0, -20.0, -3.0, 0.3, 4.0] {
            let back = norm_ppf_log(log_norm_cdf(z));
            assert!((back - z).abs() < 1e-9, "{z} -> {back}");
        }
    }

    #[test]
    fn truncated_mass_and_derivatives_match_quadrature() {
        for &(mu, sigma) in &[(2.0, 1.0), (6.4, 1.0), (-5.0, 0.7), (0.3, 1.3), (40.0, 1.0)] {
            let (a, b) = (0.055f64.ln(), 30f64.ln());
            let tn = TruncatedNormal::new(mu, sigma, a, b);
            if mu < 20.0 {
                let scale = tn.log_mass().exp();
                let z = adaptive_simpson(|y| norm_pdf((y - mu) / sigma) / sigma, a, b, 1e-12 * scale)
                    .unwrap();
                assert!((tn.log_mass() - z.ln()).abs() < 1e-9, "mass at {mu}");
            }
            let h = 1e-4;
            let shifted = |m: f64| TruncatedNormal::new(m, sigma, a, b).log_mass();
            let fd = (shifted(mu + h) - shifted(mu - h)) / (2.0 * h);
            assert!((tn.dlog_mass_dmu() - fd).abs() < 1e-6, "d1 at {mu}");
            let fd2 = (shifted(mu + h) - 2.0 * shifted(mu) + shifted(mu - h)) / (h * h);
            assert!((tn.d2log_mass_dmu2() - fd2).abs() < 1e-4, "d2 at {mu}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let (a, b) = (0.055f64.ln(), 30f64.ln());
        for &mu in &[2.0, 6.4, 61.0, -9.0] {
            let tn = TruncatedNormal::new(mu, 1.0, a, b);
            for k in 1..20 {
                let u = k as f64 / 20.0;
                let y = tn.quantile(u);
                assert!(y >= a && y <= b);
                if mu.abs() < 10.0 {
                    assert!((tn.cdf(y) - u).abs() < 1e-9, "mu={mu} u={u}");
                }
            }
        }
        let tn = TruncatedNormal::new(61.0, 1.0, a, b);
        // All mass sits against the upper bound.
        assert!(b - tn.quantile(0.5) < 0.05);
    }

    #[test]
    fn truncated_cdf_endpoints() {
        let tn = TruncatedNormal::new(1.0, 1.0, -1.0, 2.0);
        assert_eq!(tn.cdf(-1.0), 0.0);
        assert_eq!(tn.cdf(2.0), 1.0);
        let mean = adaptive_simpson(|y| y * tn.pdf(y), -1.0, 2.0, 1e-12).unwrap();
        assert!((tn.mean() - mean).abs() < 1e-10);
    }
}
