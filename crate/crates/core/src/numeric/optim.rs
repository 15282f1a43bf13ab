//! Box-constrained minimizers: Nelder-Mead simplex and a projected BFGS
//! polish driven by finite-difference gradients.
//!
//! Every stopping rule is relative to objective values seen during the run, so
//! multiplying the objective by a power of two leaves the iterates unchanged.

use std::cell::Cell;

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| match (self.lower[i].is_finite(), self.upper[i].is_finite()) {
                (true, true) => 0.5 * (self.lower[i] + self.upper[i]),
                (true, false) => self.lower[i] + 1.0,
                (false, true) => self.upper[i] - 1.0,
                (false, false) => 0.0,
            })
            .collect()
    }

    /// Characteristic length of axis `i`, used for initial steps.
    pub fn scale(&self, i: usize) -> f64 {
        let w = self.upper[i] - self.lower[i];
        if w.is_finite() {
            w
        } else {
            10.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Relative spread of simplex values at which to stop.
    pub ftol: f64,
    /// Initial edge length as a fraction of each axis' box width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 2000,
            ftol: 1e-10,
            initial_step: 0.1,
        }
    }
}

pub fn nelder_mead<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &NelderMeadOptions) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let evals = Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    bounds.clamp(&mut start);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let mut p = start.clone();
        let step = opts.initial_step * bounds.scale(i);
        p[i] = if p[i] + step <= bounds.upper[i] {
            p[i] + step
        } else {
            p[i] - step
        };
        bounds.clamp(&mut p);
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p)).collect();
    let reference = values[0].abs();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals.get() < opts.max_evaluations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        let spread = worst - best;
        if spread <= opts.ftol * best.abs() + 1e-30 * reference {
            converged = true;
            break;
        }
        let diameter = (1..=n)
            .map(|k| {
                (0..n)
                    .map(|i| ((simplex[k][i] - simplex[0][i]) / bounds.scale(i)).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter <= 1e-13 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|p| p[i]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = (0..n)
                .map(|i| centroid[i] + t * (simplex[n][i] - centroid[i]))
                .collect();
            bounds.clamp(&mut p);
            p
        };

        let xr = along(-alpha);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(-gamma);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-rho);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        for k in 1..=n {
            let mut p: Vec<f64> = (0..n)
                .map(|i| simplex[0][i] + sigma * (simplex[k][i] - simplex[0][i]))
                .collect();
            bounds.clamp(&mut p);
            values[k] = eval(&p);
            simplex[k] = p;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    OptimResult {
        x: simplex[best].clone(),
        fx: values[best],
        evaluations: evals.get(),
        converged,
    }
}

/// Central differences, one-sided where a bound is active.
pub fn numerical_gradient<F>(f: &F, x: &[f64], bounds: &Bounds) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1e-2 * bounds.scale(i).min(100.0)).max(1e-8);
        let up = (x[i] + h).min(bounds.upper[i]);
        let down = (x[i] - h).max(bounds.lower[i]);
        p[i] = up;
        let fu = f(&p);
        p[i] = down;
        let fd = f(&p);
        p[i] = x[i];
        g[i] = if up > down { (fu - fd) / (up - down) } else { 0.0 };
    }
    g
}

/// Gradient with components that point out of the box at active bounds removed.
pub fn projected(g: &[f64], x: &[f64], bounds: &Bounds) -> Vec<f64> {
    g.iter()
        .enumerate()
        .map(|(i, &gi)| {
            if (x[i] <= bounds.lower[i] && gi > 0.0) || (x[i] >= bounds.upper[i] && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_evaluations: usize,
    pub ftol: f64,
    /// Stop when the projected gradient falls below `gtol` times its initial size.
    pub gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 2000,
            ftol: 1e-10,
            gtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub result: OptimResult,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Projected BFGS with backtracking Armijo line search.
pub fn bfgs_polish<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let evals = Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let mut fx = eval(&x);
    let mut g = numerical_gradient(&eval, &x, bounds);
    let mut pg = projected(&g, &x, bounds);
    let g0 = inf_norm(&pg);
    let mut h = vec![vec![0.0; n]; n];
    let mut have_curvature = false;
    let mut iterations = 0;
    let mut converged = g0 == 0.0 || fx == 0.0;

    while !converged && evals.get() < opts.max_evaluations {
        iterations += 1;
        let mut d: Vec<f64> = if have_curvature {
            (0..n)
                .map(|i| -(0..n).map(|j| h[i][j] * pg[j]).sum::<f64>())
                .collect()
        } else {
            let norm = pg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let step = 1e-3 * (0..n).map(|i| bounds.scale(i)).fold(f64::INFINITY, f64::min);
            pg.iter().map(|v| -v / norm * step).collect()
        };
        for i in 0..n {
            if (x[i] <= bounds.lower[i] && d[i] < 0.0) || (x[i] >= bounds.upper[i] && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // Quasi-Newton direction lost descent; restart from steepest descent.
            if have_curvature {
                have_curvature = false;
                continue;
            }
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            bounds.clamp(&mut xn);
            let fxn = eval(&xn);
            let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
            if fxn <= fx + 1e-4 * decrease {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            break;
        };

        let gn = numerical_gradient(&eval, &xn, bounds);
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * yy.sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt() {
            if !have_curvature {
                let gamma = sy / yy;
                for (i, row) in h.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { gamma } else { 0.0 };
                    }
                }
                have_curvature = true;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i][j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }

        let improvement = fx - fxn;
        x = xn;
        fx = fxn;
        g = gn;
        pg = projected(&g, &x, bounds);
        if inf_norm(&pg) <= opts.gtol * g0 || fx == 0.0 {
            converged = true;
        } else if improvement <= opts.ftol * fx.abs() {
            break;
        }
    }

    BfgsResult {
        gradient_norm: inf_norm(&pg),
        iterations,
        result: OptimResult {
            x,
            fx,
            evaluations: evals.get(),
            converged,
        },
    }
}
