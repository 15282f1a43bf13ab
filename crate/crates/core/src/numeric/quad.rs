//! Adaptive Simpson quadrature with an absolute error target.

use crate::error::{AuctionError, Result};

/// Subdivision budget shared by every call.
pub const MAX_SUBDIVISIONS: usize = 10_000;

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The interval is first cut into a few equal panels so that an integrand
/// whose coarse Simpson estimates happen to agree is still refined, then each
/// panel is bisected until the Richardson error estimate drops below its share
/// of `tol`. Fails with `QUADRATURE_FAIL` once [`MAX_SUBDIVISIONS`] bisections
/// have been spent.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return adaptive_simpson(f, b, a, tol).map(|v| -v);
    }
    const INITIAL_PANELS: usize = 4;
    let width = (b - a) / INITIAL_PANELS as f64;
    let mut stack = Vec::with_capacity(64);
    for k in 0..INITIAL_PANELS {
        let lo = a + width * k as f64;
        let hi = if k + 1 == INITIAL_PANELS { b } else { lo + width };
        let mid = 0.5 * (lo + hi);
        let (fa, fm, fb) = (f(lo), f(mid), f(hi));
        stack.push(Panel {
            a: lo,
            b: hi,
            fa,
            fm,
            fb,
            whole: simpson(lo, hi, fa, fm, fb),
            tol: tol / INITIAL_PANELS as f64,
            depth: 0,
        });
    }

    let mut total = 0.0;
    let mut splits = 0usize;
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let delta = left + right - p.whole;
        if !delta.is_finite() {
            return Err(AuctionError::QuadratureFail { a, b, tol });
        }
        if p.depth >= 2 && delta.abs() <= 15.0 * p.tol || (m - p.a) <= f64::EPSILON * m.abs() {
            total += left + right + delta / 15.0;
            continue;
        }
        splits += 1;
        if splits > MAX_SUBDIVISIONS {
            return Err(AuctionError::QuadratureFail { a, b, tol });
        }
        stack.push(Panel {
            a: p.a,
            b: m,
            fa: p.fa,
            fm: flm,
            fb: p.fm,
            whole: left,
            tol: 0.5 * p.tol,
            depth: p.depth + 1,
        });
        stack.push(Panel {
            a: m,
            b: p.b,
            fa: p.fm,
            fm: frm,
            fb: p.fb,
            whole: right,
            tol: 0.5 * p.tol,
            depth: p.depth + 1,
        });
    }
    Ok(total)
}

/// Integrates piecewise over consecutive breakpoints, splitting the tolerance
/// in proportion to panel width. Use for integrands with known kinks.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, breakpoints: &[f64], tol: f64) -> Result<f64> {
    if breakpoints.len() < 2 {
        return Ok(0.0);
    }
    let span = breakpoints[breakpoints.len() - 1] - breakpoints[0];
    let mut total = 0.0;
    for w in breakpoints.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let share = if span > 0.0 { tol * (w[1] - w[0]) / span } else { tol };
        total += adaptive_simpson(&f, w[0], w[1], share.max(tol * 1e-6))?;
    }
    Ok(total)
}
