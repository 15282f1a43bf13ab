//! Moment models and the registry of built-in ones.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AuctionError, Result};
use crate::numeric::normal::TruncatedNormal;
use crate::numeric::optim::Bounds;
use crate::sim::{LogLocation, ValueDistribution};

/// Support of the value distributions in the simulation designs.
pub const VALUE_LOWER: f64 = 0.055;
pub const VALUE_UPPER: f64 = 30.0;

/// A moment function `m(v, z; θ)` with its derivatives in `θ` and in `v`.
pub trait MomentModel: Send + Sync {
    fn name(&self) -> &str;
    /// Number of moments `q`.
    fn q(&self) -> usize;
    /// Number of parameters `p ≤ q`.
    fn p(&self) -> usize;
    /// Covariate dimension the model is written for; `None` accepts any.
    fn covariate_dim(&self) -> Option<usize>;
    fn eval(&self, v: f64, x: &[f64], bidder_count: usize, theta: &[f64]) -> Vec<f64>;
    /// `∂m/∂θ`, a `q × p` matrix.
    fn d_theta(&self, v: f64, x: &[f64], bidder_count: usize, theta: &[f64]) -> DMatrix<f64>;
    /// `∂m/∂v`.
    fn d_value(&self, v: f64, x: &[f64], bidder_count: usize, theta: &[f64]) -> Vec<f64>;
    fn theta_space(&self) -> Bounds;
    /// The value distribution `F(· | x; θ)` the moments are derived from,
    /// when the model has one in closed form.
    fn value_distribution(&self, _theta: &[f64]) -> Option<ValueDistribution> {
        None
    }
    /// Values and covariates used by the registration self-test.
    fn probe_region(&self, d: usize) -> ProbeRegion {
        ProbeRegion {
            value: (VALUE_LOWER, VALUE_UPPER),
            covariate: vec![(VALUE_LOWER, VALUE_UPPER); d],
            theta: self.theta_space(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub value: (f64, f64),
    pub covariate: Vec<(f64, f64)>,
    pub theta: Bounds,
}

/// How the location of the log-value depends on covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateIndex {
    /// `x₁`
    Single,
    /// `x₁ / x₂`
    Ratio,
    /// `x₁ + x₂`
    Sum,
}

impl CovariateIndex {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CovariateIndex::Single => x[0],
            CovariateIndex::Ratio => x[0] / x[1],
            CovariateIndex::Sum => x[0] + x[1],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateIndex::Single => 1,
            _ => 2,
        }
    }
}

/// Log-scale variance as a function of covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogVariance {
    Constant(f64),
    /// `exp(c · (x₁ + x₂))`
    ExpSum(f64),
}

impl LogVariance {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            LogVariance::Constant(s2) => s2,
            LogVariance::ExpSum(c) => (c * x.iter().sum::<f64>()).exp(),
        }
    }
}

/// Score of a (truncated) lognormal with `ln V ~ N(θ₁ + θ₂ s(x), σ²(x))`:
/// `m = [(ln v − μ)/σ² − ∂ln Z/∂μ] · (1, s(x))`, where `Z` is the normal mass
/// of the truncation window on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LognormalScore {
    name: String,
    pub index: CovariateIndex,
    pub variance: LogVariance,
    /// Truncation window of `V` (not of `ln V`); `None` for the plain score.
    pub truncation: Option<(f64, f64)>,
}

impl LognormalScore {
    pub fn new(
        name: &str,
        index: CovariateIndex,
        variance: LogVariance,
        truncation: Option<(f64, f64)>,
    ) -> Self {
        Self {
            name: name.to_string(),
            index,
            variance,
            truncation,
        }
    }

    fn parts(&self, x: &[f64], theta: &[f64]) -> (f64, f64, f64, f64, f64) {
        let s = self.index.eval(x);
        let mu = theta[0] + theta[1] * s;
        let s2 = self.variance.eval(x);
        let (d1, d2) = match self.truncation {
            Some((lo, hi)) => {
                let tn = TruncatedNormal::new(mu, s2.sqrt(), lo.ln(), hi.ln());
                (tn.dlog_mass_dmu(), tn.d2log_mass_dmu2())
            }
            None => (0.0, 0.0),
        };
        (s, mu, s2, d1, d2)
    }
}

impl MomentModel for LognormalScore {
    fn name(&self) -> &str {
        &self.name
    }

    fn q(&self) -> usize {
        2
    }

    fn p(&self) -> usize {
        2
    }

    fn covariate_dim(&self) -> Option<usize> {
        Some(self.index.dim())
    }

    fn eval(&self, v: f64, x: &[f64], _i: usize, theta: &[f64]) -> Vec<f64> {
        let (s, mu, s2, d1, _) = self.parts(x, theta);
        let core = (v.ln() - mu) / s2 - d1;
        vec![core, core * s]
    }

    fn d_theta(&self, _v: f64, x: &[f64], _i: usize, theta: &[f64]) -> DMatrix<f64> {
        let (s, _, s2, _, d2) = self.parts(x, theta);
        let c = -1.0 / s2 - d2;
        DMatrix::from_row_slice(2, 2, &[c, c * s, c * s, c * s * s])
    }

    fn d_value(&self, v: f64, x: &[f64], _i: usize, _theta: &[f64]) -> Vec<f64> {
        let s = self.index.eval(x);
        let s2 = self.variance.eval(x);
        let c = 1.0 / (v * s2);
        vec![c, c * s]
    }

    fn theta_space(&self) -> Bounds {
        Bounds::new(vec![0.055, 0.001], vec![30.0, 2.0])
    }

    fn value_distribution(&self, theta: &[f64]) -> Option<ValueDistribution> {
        let (lower, upper) = self.truncation.unwrap_or((VALUE_LOWER, VALUE_UPPER));
        Some(ValueDistribution::TruncatedLognormal {
            location: LogLocation {
                intercept: theta[0],
                slope: theta[1],
                index: Some(self.index),
            },
            variance: self.variance,
            lower,
            upper,
        })
    }

    // Far outside the value window the truncated score degenerates to a
    // difference of nearly equal terms, so probe where data can live.
    fn probe_region(&self, d: usize) -> ProbeRegion {
        ProbeRegion {
            value: (VALUE_LOWER, VALUE_UPPER),
            covariate: vec![(0.5, 3.0); d],
            theta: Bounds::new(vec![0.055, 0.001], vec![3.0, 1.0]),
        }
    }
}

/// Mean and log-standard-deviation of `ln V` linear in `(1, x)`:
/// `E[ln V | x] = θ₁ᵀ(1, x)`, `Var[ln V | x] = exp(θ₂ᵀ(1, x))²`, each
/// instrumented by `(1, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglinearMeanVar {
    pub d: usize,
}

impl LoglinearMeanVar {
    fn z(&self, x: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(x.iter().copied()).collect()
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        theta.split_at(self.d + 1)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

impl MomentModel for LoglinearMeanVar {
    fn name(&self) -> &str {
        "loglinear-meanvar"
    }

    fn q(&self) -> usize {
        2 * (self.d + 1)
    }

    fn p(&self) -> usize {
        2 * (self.d + 1)
    }

    fn covariate_dim(&self) -> Option<usize> {
        Some(self.d)
    }

    fn eval(&self, v: f64, x: &[f64], _i: usize, theta: &[f64]) -> Vec<f64> {
        let z = self.z(x);
        let (t1, t2) = self.split(theta);
        let r = v.ln() - dot(t1, &z);
        let e = r * r - (2.0 * dot(t2, &z)).exp();
        z.iter().map(|zk| r * zk).chain(z.iter().map(|zk| e * zk)).collect()
    }

    fn d_theta(&self, v: f64, x: &[f64], _i: usize, theta: &[f64]) -> DMatrix<f64> {
        let z = self.z(x);
        let k = z.len();
        let (t1, t2) = self.split(theta);
        let r = v.ln() - dot(t1, &z);
        let s2 = (2.0 * dot(t2, &z)).exp();
        let mut m = DMatrix::zeros(2 * k, 2 * k);
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] = -z[a] * z[b];
                m[(k + a, b)] = -2.0 * r * z[a] * z[b];
                m[(k + a, k + b)] = -2.0 * s2 * z[a] * z[b];
            }
        }
        m
    }

    fn d_value(&self, v: f64, x: &[f64], _i: usize, theta: &[f64]) -> Vec<f64> {
        let z = self.z(x);
        let (t1, _) = self.split(theta);
        let r = v.ln() - dot(t1, &z);
        z.iter()
            .map(|zk| zk / v)
            .chain(z.iter().map(|zk| 2.0 * r * zk / v))
            .collect()
    }

    fn theta_space(&self) -> Bounds {
        let k = self.d + 1;
        let mut lo = vec![-10.0; k];
        let mut hi = vec![10.0; k];
        lo.extend(vec![-3.0; k]);
        hi.extend(vec![3.0; k]);
        Bounds::new(lo, hi)
    }

    fn probe_region(&self, d: usize) -> ProbeRegion {
        let k = self.d + 1;
        let mut lo = vec![-2.0; k];
        let mut hi = vec![2.0; k];
        lo.extend(vec![-1.0; k]);
        hi.extend(vec![1.0; k]);
        ProbeRegion {
            value: (VALUE_LOWER, VALUE_UPPER),
            covariate: vec![(0.0, 2.0); d],
            theta: Bounds::new(lo, hi),
        }
    }
}

/// `m = v − θ`: the mean of values, for any covariate dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinearMean;

impl MomentModel for LinearMean {
    fn name(&self) -> &str {
        "linear-mean"
    }

    fn q(&self) -> usize {
        1
    }

    fn p(&self) -> usize {
        1
    }

    fn covariate_dim(&self) -> Option<usize> {
        None
    }

    fn eval(&self, v: f64, _x: &[f64], _i: usize, theta: &[f64]) -> Vec<f64> {
        vec![v - theta[0]]
    }

    fn d_theta(&self, _v: f64, _x: &[f64], _i: usize, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }

    fn d_value(&self, _v: f64, _x: &[f64], _i: usize, _theta: &[f64]) -> Vec<f64> {
        vec![1.0]
    }

    fn theta_space(&self) -> Bounds {
        Bounds::new(vec![-1000.0], vec![1000.0])
    }

    fn probe_region(&self, d: usize) -> ProbeRegion {
        ProbeRegion {
            value: (0.0, 1.0),
            covariate: vec![(0.0, 1.0); d],
            theta: Bounds::new(vec![-1.0], vec![2.0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    /// Use the truncation-aware score (default) or the plain lognormal score.
    pub truncation: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { truncation: true }
    }
}

type Factory = Arc<dyn Fn(usize, &ModelOptions) -> Result<Arc<dyn MomentModel>> + Send + Sync>;

/// Named model factories. Building a model runs its self-tests.
#[derive(Clone)]
pub struct ModelRegistry {
    factories: BTreeMap<String, Factory>,
}

impl std::fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

fn lognormal(name: &'static str, index: CovariateIndex, variance: LogVariance) -> Factory {
    Arc::new(move |d, opts| {
        if d != index.dim() {
            return Err(AuctionError::ModelDimension {
                name: name.to_string(),
                expected: index.dim(),
                actual: d,
            });
        }
        let trunc = opts.truncation.then_some((VALUE_LOWER, VALUE_UPPER));
        Ok(Arc::new(LognormalScore::new(name, index, variance, trunc)) as Arc<dyn MomentModel>)
    })
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(usize, &ModelOptions) -> Result<Arc<dyn MomentModel>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    /// Instantiates `name` for covariate dimension `d` and runs the
    /// smoothness and derivative self-tests.
    pub fn build(&self, name: &str, d: usize, opts: &ModelOptions) -> Result<Arc<dyn MomentModel>> {
        let factory = self.factories.get(name).ok_or_else(|| AuctionError::UnknownModel {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        let model = factory(d, opts)?;
        self_test(model.as_ref(), d)?;
        Ok(model)
    }
}

/// The built-in models: `lognormal-score` (one covariate, index `x`),
/// `lognormal-score-ratio`, `lognormal-score-sum`, `lognormal-score-ratio-het`
/// (two covariates), `loglinear-meanvar` and `linear-mean` (any dimension).
pub fn builtin_models() -> ModelRegistry {
    let mut r = ModelRegistry::empty();
    r.factories.insert(
        "lognormal-score".into(),
        lognormal("lognormal-score", CovariateIndex::Single, LogVariance::Constant(1.0)),
    );
    r.factories.insert(
        "lognormal-score-ratio".into(),
        lognormal("lognormal-score-ratio", CovariateIndex::Ratio, LogVariance::Constant(1.0)),
    );
    r.factories.insert(
        "lognormal-score-sum".into(),
        lognormal("lognormal-score-sum", CovariateIndex::Sum, LogVariance::Constant(1.0)),
    );
    r.factories.insert(
        "lognormal-score-ratio-het".into(),
        lognormal("lognormal-score-ratio-het", CovariateIndex::Ratio, LogVariance::ExpSum(0.01)),
    );
    r.register("loglinear-meanvar", |d, _| {
        Ok(Arc::new(LoglinearMeanVar { d }) as Arc<dyn MomentModel>)
    });
    r.register("linear-mean", |_, _| Ok(Arc::new(LinearMean) as Arc<dyn MomentModel>));
    r
}

const PROBES: usize = 100;

fn fail(model: &dyn MomentModel, message: String) -> AuctionError {
    AuctionError::ModelSelfTest {
        name: model.name().to_string(),
        message,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Size of the jump of `m_k` on `[a, b]` not explained by `∫ m₁`, after
/// repeatedly halving towards the worse half. Smooth functions give ~0.
fn unexplained_jump(
    model: &dyn MomentModel,
    x: &[f64],
    i: usize,
    theta: &[f64],
    k: usize,
    mut a: f64,
    mut b: f64,
) -> f64 {
    let gap = |a: f64, b: f64| {
        let diff = model.eval(b, x, i, theta)[k] - model.eval(a, x, i, theta)[k];
        let slope = 0.5 * (model.d_value(a, x, i, theta)[k] + model.d_value(b, x, i, theta)[k]);
        (diff - slope * (b - a)).abs()
    };
    for _ in 0..40 {
        let m = 0.5 * (a + b);
        if gap(a, m) >= gap(m, b) {
            b = m;
        } else {
            a = m;
        }
    }
    gap(a, b)
}

/// Checks finiteness, `m₁` against central differences in `v` (1e-4), `m₃`
/// against central differences in `θ` (1e-5), and rejects moments with jumps
/// in `v` such as quantile-type indicators.
pub fn self_test(model: &dyn MomentModel, d: usize) -> Result<()> {
    if let Some(need) = model.covariate_dim() {
        if need != d {
            return Err(AuctionError::ModelDimension {
                name: model.name().to_string(),
                expected: need,
                actual: d,
            });
        }
    }
    if model.q() < model.p() {
        return Err(fail(model, format!("q={} < p={}", model.q(), model.p())));
    }
    let region = model.probe_region(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for probe in 0..PROBES {
        let v = rng.random_range(region.value.0..region.value.1);
        let x: Vec<f64> = region
            .covariate
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        let theta: Vec<f64> = (0..model.p())
            .map(|j| rng.random_range(region.theta.lower[j]..region.theta.upper[j]))
            .collect();
        let i = rng.random_range(2..10usize);
        let m = model.eval(v, &x, i, &theta);
        let m1 = model.d_value(v, &x, i, &theta);
        let m3 = model.d_theta(v, &x, i, &theta);
        if m.len() != model.q() || m1.len() != model.q() || m3.shape() != (model.q(), model.p()) {
            return Err(fail(model, "output dimensions disagree with q, p".into()));
        }
        if m.iter().chain(&m1).chain(m3.iter()).any(|z| !z.is_finite()) {
            return Err(fail(model, format!("non-finite output at probe {probe}")));
        }
        let h = 1e-5 * v.abs().max(1e-3);
        let up = model.eval(v + h, &x, i, &theta);
        let dn = model.eval(v - h, &x, i, &theta);
        for k in 0..model.q() {
            let fd = (up[k] - dn[k]) / (2.0 * h);
            if !close(fd, m1[k], 1e-4) {
                return Err(fail(
                    model,
                    format!("d/dv of moment {k} is {fd} by differences but {} analytically", m1[k]),
                ));
            }
        }
        for j in 0..model.p() {
            let hj = 1e-6 * theta[j].abs().max(1e-2);
            let mut tp = theta.clone();
            tp[j] += hj;
            let mut tm = theta.clone();
            tm[j] -= hj;
            let up = model.eval(v, &x, i, &tp);
            let dn = model.eval(v, &x, i, &tm);
            for k in 0..model.q() {
                let fd = (up[k] - dn[k]) / (2.0 * hj);
                if !close(fd, m3[(k, j)], 1e-5) {
                    return Err(fail(
                        model,
                        format!("d/dtheta_{j} of moment {k} is {fd} by differences but {} at v={v}, x={x:?}, theta={theta:?}", m3[(k, j)]),
                    ));
                }
            }
        }
        if probe % 10 == 0 {
            let (lo, hi) = region.value;
            let grid = 64;
            let scale = m.iter().fold(1.0f64, |s, z| s.max(z.abs()));
            for g in 0..grid {
                let a = lo + (hi - lo) * g as f64 / grid as f64;
                let b = lo + (hi - lo) * (g + 1) as f64 / grid as f64;
                for k in 0..model.q() {
                    let jump = unexplained_jump(model, &x, i, &theta, k, a, b);
                    if jump > 1e-6 * scale {
                        return Err(fail(
                            model,
                            format!("moment {k} jumps by {jump:e} near v in [{a}, {b}]; only smooth moments are supported"),
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_pass_self_tests() {
        let r = builtin_models();
        r.build("lognormal-score", 1, &ModelOptions::default()).unwrap();
        r.build("lognormal-score", 1, &ModelOptions { truncation: false }).unwrap();
        r.build("lognormal-score-ratio", 2, &ModelOptions::default()).unwrap();
        r.build("lognormal-score-sum", 2, &ModelOptions::default()).unwrap();
        r.build("lognormal-score-ratio-het", 2, &ModelOptions::default()).unwrap();
        for d in 0..=2 {
            r.build("loglinear-meanvar", d, &ModelOptions::default()).unwrap();
            r.build("linear-mean", d, &ModelOptions::default()).unwrap();
        }
    }

    #[test]
    fn unknown_name_lists_registry() {
        let err = builtin_models()
            .build("probit", 1, &ModelOptions::default())
            .err()
            .unwrap();
        assert_eq!(err.code(), "UNKNOWN_MODEL");
        assert!(err.to_string().contains("lognormal-score"));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let err = builtin_models()
            .build("lognormal-score", 2, &ModelOptions::default())
            .err()
            .unwrap();
        assert_eq!(err.code(), "MODEL_DIMENSION");
    }

    struct Quantile;

    impl MomentModel for Quantile {
        fn name(&self) -> &str {
            "median"
        }
        fn q(&self) -> usize {
            1
        }
        fn p(&self) -> usize {
            1
        }
        fn covariate_dim(&self) -> Option<usize> {
            None
        }
        fn eval(&self, v: f64, _: &[f64], _: usize, t: &[f64]) -> Vec<f64> {
            vec![if v <= t[0] { 0.5 } else { -0.5 }]
        }
        fn d_theta(&self, _: f64, _: &[f64], _: usize, _: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
        fn d_value(&self, _: f64, _: &[f64], _: usize, _: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn theta_space(&self) -> Bounds {
            Bounds::new(vec![1.0], vec![20.0])
        }
    }

    #[test]
    fn quantile_type_moment_rejected() {
        let mut r = ModelRegistry::empty();
        r.register("median", |_, _| Ok(Arc::new(Quantile) as Arc<dyn MomentModel>));
        let err = r.build("median", 1, &ModelOptions::default()).err().unwrap();
        assert_eq!(err.code(), "MODEL_SELF_TEST");
    }

    #[test]
    fn truncated_score_has_zero_mean_at_truth() {
        // E[m] = ∫ m f dv over the truncated density, by quadrature.
        let model = LognormalScore::new(
            "t",
            CovariateIndex::Single,
            LogVariance::Constant(1.0),
            Some((VALUE_LOWER, VALUE_UPPER)),
        );
        for &x in &[0.3, 1.0, 2.5] {
            let tn = TruncatedNormal::new(1.0 + x, 1.0, VALUE_LOWER.ln(), VALUE_UPPER.ln());
            let e = crate::numeric::quad::adaptive_simpson(
                |y| model.eval(y.exp(), &[x], 5, &[1.0, 1.0])[0] * tn.pdf(y),
                VALUE_LOWER.ln(),
                VALUE_UPPER.ln(),
                1e-12,
            )
            .unwrap();
            assert!(e.abs() < 1e-9, "x={x}: {e}");
        }
    }

    #[test]
    fn loglinear_with_constant_covariate_matches_moments() {
        let m = LoglinearMeanVar { d: 0 };
        let logs = [0.1f64, 0.7, 1.3, 2.0];
        let mean = logs.iter().sum::<f64>() / 4.0;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 4.0;
        let theta = [mean, 0.5 * var.ln()];
        let s: Vec<f64> = (0..2)
            .map(|k| logs.iter().map(|l| m.eval(l.exp(), &[], 2, &theta)[k]).sum::<f64>() / 4.0)
            .collect();
        assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12);
    }
}
