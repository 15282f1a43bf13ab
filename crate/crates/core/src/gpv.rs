//! Fully nonparametric two-step baseline: kernel estimates of the bid
//! distribution, inversion on the observations that survive boundary
//! trimming, and a kernel density of the pseudo-values.
//!
//! The bid-support boundary at an auction is the min/max bid over auctions
//! whose covariates lie within `h_gx` of it (at least
//! [`MIN_WINDOW_AUCTIONS`] of them, otherwise the whole group). A bid is kept
//! when it is more than `h_gb + h_δ` inside that boundary.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{group_by_bidder_count, AuctionDataset, BidderGroup};
use crate::error::{AuctionError, Result};
use crate::first_stage::{PseudoValueEntry, PseudoValueSample};
use crate::kernel::{
    boundary_bandwidth, gpv_second_step_bandwidths, rule_of_thumb_bandwidths, BandwidthMethod,
    GpvFirstBandwidths, GpvSecondBandwidths, KernelSpec, NORMAL_REFERENCE,
};
use crate::numeric::stats::sample_sd;
use crate::policy::{DensityHandle, HandleLabel};

/// Fewest auctions in a covariate window for a local boundary estimate.
pub const MIN_WINDOW_AUCTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct GpvConfig {
    /// Scale of the boundary bandwidth `h_δ = λ_δ n^(−1/2)` (`n^(−1/3)` for d = 2).
    pub lambda_delta: f64,
    pub kernel: KernelSpec,
    /// First-step bandwidths for every bidder-count group; rule of thumb when absent.
    pub first: Option<GpvFirstBandwidths>,
    /// Second-step bandwidths; rule of thumb on the survivors when absent.
    pub second: Option<GpvSecondBandwidths>,
}

impl Default for GpvConfig {
    fn default() -> Self {
        Self {
            lambda_delta: 1.0,
            kernel: KernelSpec::triweight(),
            first: None,
            second: None,
        }
    }
}

impl GpvConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda_delta > 0.0) {
            return Err(AuctionError::InvalidArgument("lambda_delta must be positive".into()));
        }
        if let Some(b) = &self.first {
            let all = b.h_g.iter().chain(&b.h_gx).chain([&b.h_gb, &b.h_delta]);
            if all.into_iter().any(|h| !(*h > 0.0)) {
                return Err(AuctionError::InvalidArgument("GPV first-step bandwidths must be positive".into()));
            }
        }
        if let Some(b) = &self.second {
            if b.h_fx.iter().chain(&b.h_x).chain([&b.h_fv]).any(|h| !(*h > 0.0)) {
                return Err(AuctionError::InvalidArgument("GPV second-step bandwidths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// First-step bandwidths of one group. The covariate-free case smooths bids
/// at the usual `n^(−1/5)` rate.
fn first_bandwidths(group: &BidderGroup, cfg: &GpvConfig, d: usize) -> Result<GpvFirstBandwidths> {
    if let Some(b) = &cfg.first {
        if b.h_g.len() != d || b.h_gx.len() != d {
            return Err(AuctionError::InvalidArgument(format!("GPV bandwidths are for d={}, data has d={d}", b.d)));
        }
        return Ok(b.clone());
    }
    let n = group.bid_count();
    if d == 0 {
        let bids: Vec<f64> = group.dataset.bids().collect();
        let sb = sample_sd(&bids);
        if !(sb > 0.0) {
            return Err(AuctionError::DegenerateScale("bids".into()));
        }
        return Ok(GpvFirstBandwidths {
            h_g: vec![],
            h_gb: NORMAL_REFERENCE * sb * (n as f64).powf(-0.2),
            h_gx: vec![],
            h_delta: boundary_bandwidth(cfg.lambda_delta, n, d),
            d,
        });
    }
    let mut b = rule_of_thumb_bandwidths(&group.dataset, BandwidthMethod::GpvFirst, d)?
        .into_gpv_first()
        .expect("GPV first-step rule");
    b.h_delta = boundary_bandwidth(cfg.lambda_delta, n, d);
    Ok(b)
}

fn product_kernel(kernel: &KernelSpec, a: &[f64], b: &[f64], h: &[f64]) -> f64 {
    let mut k = 1.0;
    for j in 0..a.len() {
        k *= kernel.eval(&[(a[j] - b[j]) / h[j]]) / h[j];
        if k == 0.0 {
            break;
        }
    }
    k
}

fn within(a: &[f64], b: &[f64], h: &[f64]) -> bool {
    (0..a.len()).all(|j| (a[j] - b[j]).abs() <= h[j])
}

/// Min/max bid over auctions whose covariates are within `h` of `x`, or the
/// group extremes when the window is too sparse.
fn local_bid_range(ds: &AuctionDataset, x: &[f64], h: &[f64]) -> (f64, f64) {
    let mut count = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for a in ds.auctions() {
        if within(&a.x, x, h) {
            count += 1;
            for &b in &a.bids {
                lo = lo.min(b);
                hi = hi.max(b);
            }
        }
    }
    if count >= MIN_WINDOW_AUCTIONS {
        return (lo, hi);
    }
    ds.bids().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), b| (l.min(b), u.max(b)))
}

/// Per-group trimming rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrim {
    #[serde(rename = "I")]
    pub bidder_count: usize,
    /// Distance `h_gb + h_δ` kept from the bid boundary.
    pub bid_margin: f64,
    pub bandwidths: GpvFirstBandwidths,
}

/// Trimmed pseudo-value sample of the baseline.
#[derive(Debug, Clone)]
pub struct GpvFirstStage {
    /// Surviving observations only.
    pub sample: PseudoValueSample,
    pub n_t: usize,
    pub total_bids: usize,
    pub groups: BTreeMap<usize, GroupTrim>,
    dataset: AuctionDataset,
}

impl GpvFirstStage {
    pub fn dataset(&self) -> &AuctionDataset {
        &self.dataset
    }

    /// Kept bid interval `[b_lo + ρ, b_hi − ρ]` at covariate `x` for the
    /// largest bidder-count group.
    pub fn trimmed_bid_support(&self, x: &[f64]) -> (f64, f64) {
        let groups = group_by_bidder_count(&self.dataset);
        let (i, g) = groups
            .iter()
            .max_by_key(|(i, g)| (g.auction_count(), std::cmp::Reverse(**i)))
            .expect("non-empty dataset");
        let t = &self.groups[i];
        let (lo, hi) = local_bid_range(&g.dataset, x, &t.bandwidths.h_gx);
        (lo + t.bid_margin, hi - t.bid_margin)
    }
}

/// Kernel first step, boundary trimming and inversion on the survivors.
/// Fails with `ALL_TRIMMED` when nothing survives.
pub fn gpv_first_stage(ds: &AuctionDataset, cfg: &GpvConfig) -> Result<GpvFirstStage> {
    cfg.check()?;
    let d = ds.covariate_dim();
    let groups = group_by_bidder_count(ds);
    let mut kept: Vec<Option<Vec<PseudoValueEntry>>> = vec![None; ds.len()];
    let mut trims = BTreeMap::new();
    for (&i, group) in &groups {
        let bw = first_bandwidths(group, cfg, d)?;
        let gds = &group.dataset;
        let n = group.bid_count() as f64;
        let margin = bw.h_gb + bw.h_delta;
        let per_auction: Vec<Vec<PseudoValueEntry>> = (0..group.auction_count())
            .into_par_iter()
            .map(|pos| {
                let a = &gds.auctions()[pos];
                let (blo, bhi) = local_bid_range(gds, &a.x, &bw.h_gx);
                let w_g: Vec<f64> = gds.auctions().iter().map(|o| product_kernel(&cfg.kernel, &a.x, &o.x, &bw.h_g)).collect();
                let w_x: Vec<f64> = gds.auctions().iter().map(|o| product_kernel(&cfg.kernel, &a.x, &o.x, &bw.h_gx)).collect();
                // Covariate density implied by the G weights; dividing by it
                // turns the joint estimates into conditional ones.
                let f_x = w_g.iter().sum::<f64>() / gds.len() as f64;
                let mut out = Vec::new();
                for (p, &b) in a.bids.iter().enumerate() {
                    if b < blo + margin || b > bhi - margin {
                        continue;
                    }
                    let mut g_joint = 0.0;
                    let mut dens_joint = 0.0;
                    for (o, (&wg, &wx)) in gds.auctions().iter().zip(w_g.iter().zip(&w_x)) {
                        if wg != 0.0 {
                            g_joint += wg * o.bids.iter().filter(|&&ob| ob <= b).count() as f64;
                        }
                        if wx != 0.0 {
                            let kb: f64 = o.bids.iter().map(|&ob| cfg.kernel.eval(&[(b - ob) / bw.h_gb])).sum();
                            dens_joint += wx * kb / bw.h_gb;
                        }
                    }
                    g_joint /= n;
                    dens_joint /= n;
                    let v = b + g_joint / ((i as f64 - 1.0) * dens_joint);
                    out.push(PseudoValueEntry {
                        auction_index: group.indices[pos],
                        auction_id: a.auction_id.clone(),
                        p: p + 1,
                        bid: b,
                        x: a.x.clone(),
                        bidder_count: i,
                        v_hat: v,
                        g_cdf: g_joint / f_x,
                        g_pdf: dens_joint / f_x,
                    });
                }
                out
            })
            .collect();
        for (pos, entries) in per_auction.into_iter().enumerate() {
            kept[group.indices[pos]] = Some(entries);
        }
        trims.insert(
            i,
            GroupTrim {
                bidder_count: i,
                bid_margin: margin,
                bandwidths: bw,
            },
        );
    }
    let entries: Vec<PseudoValueEntry> = kept.into_iter().flatten().flatten().collect();
    if entries.is_empty() {
        return Err(AuctionError::AllTrimmed);
    }
    let mut sample = PseudoValueSample {
        d,
        entries,
        clamp_count: 0,
        monotonicity_violations: 0,
    };
    sample.monotonicity_violations = sample
        .auctions()
        .iter()
        .map(|a| {
            let mut pairs: Vec<(f64, f64)> = a.iter().map(|e| (e.bid, e.v_hat)).collect();
            pairs.sort_by(|u, w| u.0.total_cmp(&w.0));
            pairs.windows(2).filter(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1).count()
        })
        .sum();
    Ok(GpvFirstStage {
        n_t: sample.len(),
        total_bids: ds.total_bids(),
        sample,
        groups: trims,
        dataset: ds.clone(),
    })
}

/// Conditional value density of the baseline on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpvDensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Kept bid interval at the evaluation point.
    pub trimmed_support: (f64, f64),
    /// Range of the pseudo-values that receive weight at the evaluation point.
    pub value_support: (f64, f64),
    pub n_t: usize,
    pub bandwidths: GpvSecondBandwidths,
}

impl GpvDensityEstimate {
    /// CDF/density handle renormalized on [`Self::value_support`].
    pub fn handle(&self) -> Result<DensityHandle> {
        DensityHandle::from_grid(HandleLabel::Gpv, &self.grid, &self.density, self.value_support)
    }
}

/// Second-step bandwidths; `n_t^(−1/5)` for the covariate-free case.
pub fn second_bandwidths(first: &GpvFirstStage, cfg: &GpvConfig) -> Result<GpvSecondBandwidths> {
    if let Some(b) = &cfg.second {
        return Ok(b.clone());
    }
    let d = first.sample.d;
    let values = first.sample.values();
    if d == 0 {
        let sv = sample_sd(&values);
        if !(sv > 0.0) {
            return Err(AuctionError::DegenerateScale("pseudo-values".into()));
        }
        return Ok(GpvSecondBandwidths {
            h_fv: NORMAL_REFERENCE * sv * (values.len() as f64).powf(-0.2),
            h_fx: vec![],
            h_x: vec![],
        });
    }
    let v_x: Vec<Vec<f64>> = first.sample.entries.iter().map(|e| e.x.clone()).collect();
    let auction_x: Vec<Vec<f64>> = first.dataset.auctions().iter().map(|a| a.x.clone()).collect();
    gpv_second_step_bandwidths(&values, &v_x, &auction_x, d)
}

/// `f̂(v | x*) = f̂(v, x*) / f̂(x*)` on the trimmed sample: both the joint
/// estimate (bandwidths `h_fv`, `h_fx`) and the covariate density (`h_x`)
/// average over the `n_t` survivors, so trimming shows up as cut tails.
pub fn gpv_density(first: &GpvFirstStage, cfg: &GpvConfig, x_star: &[f64], grid: &[f64]) -> Result<GpvDensityEstimate> {
    if grid.is_empty() {
        return Err(AuctionError::EmptyGrid);
    }
    if first.n_t == 0 {
        return Err(AuctionError::AllTrimmed);
    }
    let d = first.sample.d;
    if x_star.len() != d {
        return Err(AuctionError::InvalidArgument(format!("x* has {} entries, data has d={d}", x_star.len())));
    }
    let bw = second_bandwidths(first, cfg)?;
    let n = first.n_t as f64;
    let weights: Vec<(f64, f64)> = first
        .sample
        .entries
        .iter()
        .map(|e| (e.v_hat, product_kernel(&cfg.kernel, x_star, &e.x, &bw.h_fx)))
        .filter(|(_, w)| *w != 0.0)
        .collect();
    let f_x = first
        .sample
        .entries
        .iter()
        .map(|e| product_kernel(&cfg.kernel, x_star, &e.x, &bw.h_x))
        .sum::<f64>()
        / n;
    let density: Vec<f64> = grid
        .par_iter()
        .map(|&v| {
            if f_x <= 0.0 {
                return 0.0;
            }
            let s: f64 = weights
                .iter()
                .map(|&(vh, w)| w * cfg.kernel.eval(&[(v - vh) / bw.h_fv]))
                .sum();
            (s / (n * bw.h_fv) / f_x).max(0.0)
        })
        .collect();
    let local = if weights.is_empty() {
        first.sample.values()
    } else {
        weights.iter().map(|(v, _)| *v).collect()
    };
    let value_support = local
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    Ok(GpvDensityEstimate {
        grid: grid.to_vec(),
        density,
        trimmed_support: first.trimmed_bid_support(x_star),
        value_support,
        n_t: first.n_t,
        bandwidths: bw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AuctionRecord;
    use crate::numeric::stats::median;
    use crate::sim::{covariate_median, simulate_dataset, DgpSpec, SpecId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_pairs(l: usize) -> AuctionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let auctions = (0..l)
            .map(|k| AuctionRecord::new(k.to_string(), vec![], vec![rng.random::<f64>() / 2.0, rng.random::<f64>() / 2.0]))
            .collect();
        AuctionDataset::new(auctions, 0).unwrap()
    }

    fn grid() -> Vec<f64> {
        (0..512).map(|k| 0.055 + (30.0 - 0.055) * k as f64 / 511.0).collect()
    }

    #[test]
    fn uniform_inversion_in_the_interior() {
        let ds = uniform_pairs(2500);
        let first = gpv_first_stage(&ds, &GpvConfig::default()).unwrap();
        assert!(first.n_t < first.total_bids);
        let v: Vec<f64> = first.sample.values();
        let b: Vec<f64> = first.sample.entries.iter().map(|e| e.bid).collect();
        assert!((median(&v) - 2.0 * median(&b)).abs() <= 0.05);
        for e in &first.sample.entries {
            assert!(e.v_hat >= e.bid);
        }
    }

    #[test]
    fn trimming_is_active_and_monotone() {
        let dgp = DgpSpec::new(SpecId::D1, 5, 100).unwrap();
        let sim = simulate_dataset(&dgp, 5).unwrap();
        let mut prev = usize::MAX;
        for lambda in [0.1, 1.0, 10.0, 100.0] {
            let cfg = GpvConfig {
                lambda_delta: lambda,
                ..Default::default()
            };
            let n_t = gpv_first_stage(&sim.dataset, &cfg).map(|f| f.n_t).unwrap_or(0);
            assert!(n_t <= prev);
            assert!(n_t < sim.dataset.total_bids());
            prev = n_t;
        }
        let huge = GpvConfig {
            lambda_delta: 1e9,
            ..Default::default()
        };
        assert_eq!(gpv_first_stage(&sim.dataset, &huge).unwrap_err(), AuctionError::AllTrimmed);
    }

    #[test]
    fn density_is_nonnegative_and_roughly_normalized() {
        let dgp = DgpSpec::new(SpecId::D1, 5, 200).unwrap();
        let sim = simulate_dataset(&dgp, 9).unwrap();
        let cfg = GpvConfig::default();
        let first = gpv_first_stage(&sim.dataset, &cfg).unwrap();
        let x = covariate_median(&sim.dataset);
        let g = grid();
        let est = gpv_density(&first, &cfg, &x, &g).unwrap();
        assert!(est.density.iter().all(|f| *f >= 0.0));
        let mass: f64 = g.windows(2).zip(est.density.windows(2)).map(|(v, f)| 0.5 * (f[0] + f[1]) * (v[1] - v[0])).sum();
        assert!((mass - 1.0).abs() <= 0.1, "mass {mass}");
        let h = est.handle().unwrap();
        assert!(h.audit().passed);
        assert_eq!(gpv_density(&first, &cfg, &x, &[]).unwrap_err(), AuctionError::EmptyGrid);
    }
}
