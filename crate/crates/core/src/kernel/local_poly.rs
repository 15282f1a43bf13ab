//! Kernel-weighted least squares in centered monomials.
//!
//! Minimizes `Σ f_i w_i (y_i − P(x_i − x; β))²` with product kernel weights
//! `w_i = Π_j K((x_ij − x_j)/h_j)/h_j` and optional frequency weights `f_i`.
//! The basis is internally scaled by the bandwidth, `((x_i − x)/h)^k`, which
//! keeps the normal equations well conditioned for small `h`; reported
//! coefficients are converted back to the unscaled basis.

use nalgebra::{DMatrix, DVector};

use super::KernelSpec;
use crate::error::{AuctionError, Result};

/// Condition diagnostic above which the factorization is not trusted.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Tikhonov jitter, relative to the trace of the normal matrix.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPolyFit {
    /// Coefficients of the centered monomials in [`monomial_exponents`] order.
    pub coefficients: Vec<f64>,
    pub value_at_center: f64,
    pub condition_diagnostic: f64,
    pub effective_points: usize,
    /// Degree actually fitted after any fallback.
    pub degree: usize,
    pub jittered: bool,
}

/// All exponent vectors of length `d` with total degree ≤ `degree`, ordered by
/// total degree and then lexicographically (descending in the first axis).
pub fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == d {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            rec(d, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d == 0 {
        out.push(Vec::new());
        return out;
    }
    for total in 0..=degree {
        rec(d, total, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

fn basis_row(u: &[f64], exponents: &[Vec<usize>]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| e.iter().zip(u).map(|(&k, &v)| v.powi(k as i32)).product())
        .collect()
}

/// Factorized local design at one center. Evaluating a new response vector
/// costs one dot product, so many responses can share a factorization.
#[derive(Debug, Clone)]
pub struct LocalDesign {
    exponents: Vec<Vec<usize>>,
    bandwidth: Vec<f64>,
    /// `w_i · e₁ᵀ M⁻¹ φ_i`: the fitted intercept is `Σ_i equivalent_i · Σ y_i`.
    equivalent: Vec<f64>,
    weights: Vec<f64>,
    rows: Vec<Vec<f64>>,
    inverse: DMatrix<f64>,
    condition: f64,
    effective_points: usize,
    degree: usize,
    jittered: bool,
}

impl LocalDesign {
    /// One point per entry of `xs`, each with unit frequency.
    pub fn new<T: AsRef<[f64]>>(
        xs: &[T],
        center: &[f64],
        degree: usize,
        kernel: &KernelSpec,
        bandwidth: &[f64],
    ) -> Result<Self> {
        let ones = vec![1.0; xs.len()];
        Self::with_frequencies(xs, &ones, center, degree, kernel, bandwidth)
    }

    /// Point `i` stands for `freq[i]` observations sharing the covariate
    /// `xs[i]`; responses passed later must be summed over those observations.
    pub fn with_frequencies<T: AsRef<[f64]>>(
        xs: &[T],
        freq: &[f64],
        center: &[f64],
        degree: usize,
        kernel: &KernelSpec,
        bandwidth: &[f64],
    ) -> Result<Self> {
        let d = center.len();
        if bandwidth.len() != d || bandwidth.iter().any(|h| !(*h > 0.0)) {
            return Err(AuctionError::InvalidArgument(format!(
                "need {d} positive bandwidths, got {bandwidth:?}"
            )));
        }
        let mut weights = Vec::with_capacity(xs.len());
        let mut scaled = Vec::with_capacity(xs.len());
        for x in xs {
            let x = x.as_ref();
            let u: Vec<f64> = (0..d).map(|j| (x[j] - center[j]) / bandwidth[j]).collect();
            let w = kernel.eval(&u) / bandwidth.iter().product::<f64>();
            weights.push(w);
            scaled.push(u);
        }
        let effective: f64 = weights
            .iter()
            .zip(freq)
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, f)| *f)
            .sum();
        let effective_points = effective.round() as usize;
        if effective_points == 0 {
            return Err(AuctionError::SingularDesign {
                center: center.to_vec(),
            });
        }

        let mut degree_now = degree;
        let mut drops = 0;
        loop {
            let exponents = monomial_exponents(d, degree_now);
            let terms = exponents.len();
            if effective_points < terms && degree_now > 0 && drops == 0 {
                degree_now -= 1;
                drops += 1;
                continue;
            }
            let rows: Vec<Vec<f64>> = scaled.iter().map(|u| basis_row(u, &exponents)).collect();
            let mut m = DMatrix::<f64>::zeros(terms, terms);
            for ((row, &w), &f) in rows.iter().zip(&weights).zip(freq) {
                if w == 0.0 {
                    continue;
                }
                let fw = f * w;
                for a in 0..terms {
                    let ra = fw * row[a];
                    for b in a..terms {
                        m[(a, b)] += ra * row[b];
                    }
                }
            }
            for a in 0..terms {
                for b in 0..a {
                    m[(a, b)] = m[(b, a)];
                }
            }

            let attempt = |m: &DMatrix<f64>| {
                let lu = m.clone().lu();
                let u = lu.u();
                let diag: Vec<f64> = (0..terms).map(|i| u[(i, i)].abs()).collect();
                let hi = diag.iter().cloned().fold(0.0, f64::max);
                let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
                (lu, cond)
            };
            let (mut lu, mut cond) = attempt(&m);
            let mut jittered = false;
            if !(cond <= CONDITION_LIMIT) {
                let mut mj = m.clone();
                let bump = JITTER * m.trace();
                for a in 0..terms {
                    mj[(a, a)] += bump;
                }
                (lu, cond) = attempt(&mj);
                jittered = true;
            }
            if cond <= CONDITION_LIMIT {
                let inverse = lu.try_inverse().ok_or_else(|| AuctionError::SingularDesign {
                    center: center.to_vec(),
                })?;
                let equivalent = rows
                    .iter()
                    .zip(&weights)
                    .map(|(row, &w)| {
                        if w == 0.0 {
                            0.0
                        } else {
                            w * (0..terms).map(|k| inverse[(0, k)] * row[k]).sum::<f64>()
                        }
                    })
                    .collect();
                return Ok(Self {
                    exponents,
                    bandwidth: bandwidth.to_vec(),
                    equivalent,
                    weights,
                    rows,
                    inverse,
                    condition: cond,
                    effective_points,
                    degree: degree_now,
                    jittered,
                });
            }
            if degree_now == 0 || drops > 0 {
                return Err(AuctionError::SingularDesign {
                    center: center.to_vec(),
                });
            }
            degree_now -= 1;
            drops += 1;
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn condition_diagnostic(&self) -> f64 {
        self.condition
    }

    pub fn effective_points(&self) -> usize {
        self.effective_points
    }

    /// Kernel weights `w_i` of the design points.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn equivalent_weights(&self) -> &[f64] {
        &self.equivalent
    }

    /// Fitted intercept for responses summed per design point.
    pub fn value(&self, response_sums: &[f64]) -> f64 {
        self.equivalent
            .iter()
            .zip(response_sums)
            .filter(|(l, _)| **l != 0.0)
            .map(|(l, y)| l * y)
            .sum()
    }

    /// Full coefficient vector in the unscaled centered basis.
    pub fn fit(&self, response_sums: &[f64]) -> LocalPolyFit {
        let terms = self.exponents.len();
        let mut rhs = DVector::<f64>::zeros(terms);
        for ((row, &w), &y) in self.rows.iter().zip(&self.weights).zip(response_sums) {
            if w == 0.0 {
                continue;
            }
            for k in 0..terms {
                rhs[k] += w * row[k] * y;
            }
        }
        let beta_scaled = &self.inverse * rhs;
        let coefficients: Vec<f64> = self
            .exponents
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let scale: f64 = e
                    .iter()
                    .zip(&self.bandwidth)
                    .map(|(&p, &h)| h.powi(p as i32))
                    .product();
                beta_scaled[k] / scale
            })
            .collect();
        LocalPolyFit {
            value_at_center: coefficients[0],
            coefficients,
            condition_diagnostic: self.condition,
            effective_points: self.effective_points,
            degree: self.degree,
            jittered: self.jittered,
        }
    }
}

/// One-shot local polynomial fit of `ys` on `xs` around `center`.
pub fn local_poly_solve<T: AsRef<[f64]>>(
    xs: &[T],
    ys: &[f64],
    center: &[f64],
    degree: usize,
    kernel: &KernelSpec,
    bandwidth: &[f64],
) -> Result<LocalPolyFit> {
    if xs.len() != ys.len() {
        return Err(AuctionError::InvalidArgument(format!(
            "{} points but {} responses",
            xs.len(),
            ys.len()
        )));
    }
    Ok(LocalDesign::new(xs, center, degree, kernel, bandwidth)?.fit(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> KernelSpec {
        KernelSpec::triweight()
    }

    /// Independent oracle: dense unscaled normal equations solved by Gaussian
    /// elimination with partial pivoting.
    fn dense_oracle(xs: &[f64], ys: &[f64], c: f64, degree: usize, h: f64) -> Vec<f64> {
        let p = degree + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (&x, &y) in xs.iter().zip(ys) {
            let w = super::super::triweight((x - c) / h) / h;
            for r in 0..p {
                for s in 0..p {
                    a[r][s] += w * (x - c).powi((r + s) as i32);
                }
                a[r][p] += w * (x - c).powi(r as i32) * y;
            }
        }
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in col + 1..p {
                let f = a[r][col] / a[col][col];
                for s in col..=p {
                    a[r][s] -= f * a[col][s];
                }
            }
        }
        let mut beta = vec![0.0; p];
        for r in (0..p).rev() {
            let mut s = a[r][p];
            for q in r + 1..p {
                s -= a[r][q] * beta[q];
            }
            beta[r] = s / a[r][r];
        }
        beta
    }

    #[test]
    fn exponents_are_graded() {
        assert_eq!(monomial_exponents(1, 3), vec![vec![0], vec![1], vec![2], vec![3]]);
        let e = monomial_exponents(2, 2);
        assert_eq!(e.len(), 6);
        assert_eq!(e[0], vec![0, 0]);
        assert!(e.iter().all(|v| v.iter().sum::<usize>() <= 2));
        assert_eq!(monomial_exponents(0, 3), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn constants_are_reproduced() {
        let xs: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.1]).collect();
        let ys = vec![4.25; 9];
        for degree in 0..=3 {
            let f = local_poly_solve(&xs, &ys, &[0.37], degree, &k(), &[0.6]).unwrap();
            assert!((f.value_at_center - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_reproduction() {
        let xs: Vec<Vec<f64>> = [0.0, 0.5, 1.0, 1.5, 2.0].iter().map(|&v| vec![v]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x[0]).collect();
        let f = local_poly_solve(&xs, &ys, &[0.8], 1, &k(), &[2.0]).unwrap();
        assert!((f.value_at_center - (2.0 + 3.0 * 0.8)).abs() < 1e-12);
        assert!((f.coefficients[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_oracle_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(8..=30);
            let degree = rng.random_range(0..=3);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = rng.random_range(0.3..0.7);
            let h = rng.random_range(0.5..1.0);
            let pts: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
            let fit = local_poly_solve(&pts, &ys, &[c], degree, &k(), &[h]).unwrap();
            let beta = dense_oracle(&xs, &ys, c, degree, h);
            for (a, b) in fit.coefficients.iter().zip(&beta) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn two_dimensional_quadratic_reproduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let poly = |x: &[f64]| 1.0 - x[0] + 2.0 * x[1] + 0.5 * x[0] * x[1] - x[1] * x[1];
        let ys: Vec<f64> = xs.iter().map(|x| poly(x)).collect();
        let c = [0.4, 0.55];
        let f = local_poly_solve(&xs, &ys, &c, 2, &KernelSpec::product_triweight(), &[0.8, 0.8])
            .unwrap();
        assert!((f.value_at_center - poly(&c)).abs() < 1e-10);
    }

    #[test]
    fn no_weight_is_singular() {
        let xs = vec![vec![0.0], vec![0.1]];
        let r = local_poly_solve(&xs, &[1.0, 2.0], &[5.0], 1, &k(), &[0.5]);
        assert!(matches!(r, Err(AuctionError::SingularDesign { .. })));
    }

    #[test]
    fn too_few_points_drops_degree() {
        // Three points cannot carry a cubic; the fit falls back to degree 2.
        let xs = vec![vec![0.0], vec![0.1], vec![0.2]];
        let f = local_poly_solve(&xs, &[1.0, 1.5, 2.5], &[0.1], 3, &k(), &[1.0]).unwrap();
        assert_eq!(f.degree, 2);
        assert!((f.value_at_center - 1.5).abs() < 1e-12);
    }

    #[test]
    fn frequencies_equal_repeated_points() {
        let xs = vec![vec![0.0], vec![0.3], vec![0.5], vec![0.9]];
        let freq = [2.0, 1.0, 3.0, 1.0];
        let sums = [1.0, 0.4, 2.1, 0.7];
        let d = LocalDesign::with_frequencies(&xs, &freq, &[0.4], 2, &k(), &[1.0]).unwrap();
        let mut rep_x = Vec::new();
        let mut rep_y = Vec::new();
        for i in 0..4 {
            for _ in 0..freq[i] as usize {
                rep_x.push(xs[i].clone());
                rep_y.push(sums[i] / freq[i]);
            }
        }
        let direct = local_poly_solve(&rep_x, &rep_y, &[0.4], 2, &k(), &[1.0]).unwrap();
        assert!((d.value(&sums) - direct.value_at_center).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cubic_reproduced_anywhere_inside(c in 0.05f64..0.95, a0 in -2.0f64..2.0, a3 in -2.0f64..2.0) {
            let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 39.0]).collect();
            let p = |x: f64| a0 + 0.5 * x - 1.5 * x * x + a3 * x * x * x;
            let ys: Vec<f64> = xs.iter().map(|x| p(x[0])).collect();
            let f = local_poly_solve(&xs, &ys, &[c], 3, &k(), &[0.3]).unwrap();
            prop_assert!((f.value_at_center - p(c)).abs() < 1e-9);
        }

        #[test]
        fn translation_invariant(shift in -50.0f64..50.0, c in 0.2f64..0.8) {
            let base: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
            let ys: Vec<f64> = base.iter().map(|x| (3.0 * x).cos()).collect();
            let a: Vec<Vec<f64>> = base.iter().map(|&x| vec![x]).collect();
            let b: Vec<Vec<f64>> = base.iter().map(|&x| vec![x + shift]).collect();
            let fa = local_poly_solve(&a, &ys, &[c], 2, &k(), &[0.4]).unwrap();
            let fb = local_poly_solve(&b, &ys, &[c + shift], 2, &k(), &[0.4]).unwrap();
            prop_assert!((fa.value_at_center - fb.value_at_center).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant(scale in 0.01f64..100.0, c in 0.2f64..0.8) {
            let base: Vec<f64> = (0..25).map(|i| (i as f64 * 0.61).sin() * 0.5 + 0.5).collect();
            let ys: Vec<f64> = base.iter().map(|x| x.exp()).collect();
            let a: Vec<Vec<f64>> = base.iter().map(|&x| vec![x]).collect();
            let b: Vec<Vec<f64>> = base.iter().map(|&x| vec![x * scale]).collect();
            let fa = local_poly_solve(&a, &ys, &[c], 3, &k(), &[0.5]).unwrap();
            let fb = local_poly_solve(&b, &ys, &[c * scale], 3, &k(), &[0.5 * scale]).unwrap();
            prop_assert!((fa.value_at_center - fb.value_at_center).abs() < 1e-9);
        }

        #[test]
        fn kernel_symmetric_and_nonnegative(u in -3.0f64..3.0) {
            prop_assert!(super::super::triweight(u) >= 0.0);
            prop_assert_eq!(super::super::triweight(u), super::super::triweight(-u));
        }
    }
}
