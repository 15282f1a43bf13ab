//! Local polynomial estimates of the conditional bid distribution and the
//! inversion of bids into pseudo private values.
//!
//! For a bidder-count group `I` the estimators at `(b, x)` are intercepts of
//! kernel-weighted polynomial regressions in the covariates:
//!
//! * `Ĝ(b|x,I)`: responses `1(B ≤ b)`, degree `R`, bandwidth `h_G`;
//! * `ĝ(b|x,I)`: responses `K((B − b)/h_2g)/h_2g`, degree `R − 1`, bandwidth `h_1g`.
//!
//! Every bid of an auction shares the auction's covariate, so the regression
//! runs over auctions with frequency `I` and per-auction response sums.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{csv_err, fmt_f64, group_by_bidder_count, AuctionDataset, BidderGroup};
use crate::error::{AuctionError, Result};
use crate::kernel::bandwidth::{
    rule_of_thumb_bandwidths, BandwidthMethod, BandwidthPlan, Regime, NORMAL_REFERENCE,
    TRIWEIGHT_INFLATION,
};
use crate::kernel::{triweight, KernelSpec, LocalDesign};
use crate::validation::ValidationReport;

/// Relative density floor: `ĝ` is bounded below by this fraction of the
/// group's largest `ĝ` over its bids.
pub const DENSITY_FLOOR_FRACTION: f64 = 1e-4;
/// Absolute floor, only binding when a whole group has zero estimated density.
pub const ABSOLUTE_DENSITY_FLOOR: f64 = 1e-300;

/// `(b, x, I) ↦ value`, used to replace the estimated `G` or `g`.
pub type BidFunction = Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStageKernels {
    pub k_g: KernelSpec,
    pub k_1g: KernelSpec,
    pub k_2g: KernelSpec,
}

impl FirstStageKernels {
    pub fn triweight(d: usize, r: usize) -> Self {
        let cov = if d > 1 {
            KernelSpec::product_triweight()
        } else {
            KernelSpec::triweight()
        };
        Self {
            k_g: cov.with_order(r.saturating_sub(1)),
            k_1g: cov.with_order(r.saturating_sub(1)),
            k_2g: KernelSpec::triweight().with_order(r.saturating_sub(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthChoice {
    /// Local polynomial rule of thumb, computed per bidder-count group.
    RuleOfThumb,
    /// The same plan for every group.
    Explicit(BandwidthPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageOptions {
    /// Smoothness order `R`; `Ĝ` uses degree `R` and `ĝ` degree `R − 1`.
    pub r: usize,
    pub bandwidths: BandwidthChoice,
}

impl FirstStageOptions {
    /// Smallest admissible `R` that is at least 3.
    pub fn default_for(d: usize) -> Self {
        Self {
            r: 3.max(d + 2),
            bandwidths: BandwidthChoice::RuleOfThumb,
        }
    }
}

#[derive(Clone)]
struct GroupFit {
    group: BidderGroup,
    plan: BandwidthPlan,
    xs: Vec<Vec<f64>>,
    freq: Vec<f64>,
}

/// Immutable first-stage estimator over one dataset.
#[derive(Clone)]
pub struct FirstStageEstimator {
    d: usize,
    r: usize,
    kernels: FirstStageKernels,
    groups: BTreeMap<usize, GroupFit>,
    dataset: AuctionDataset,
    oracle: Option<(BidFunction, BidFunction)>,
    diagnostics: ValidationReport,
}

impl std::fmt::Debug for FirstStageEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FirstStageEstimator")
            .field("d", &self.d)
            .field("r", &self.r)
            .field("groups", &self.groups.keys().collect::<Vec<_>>())
            .field("oracle", &self.oracle.is_some())
            .finish()
    }
}

/// Rule-of-thumb plan for `d = 0`, where only `h_2g` is used: the bid
/// direction of the one-covariate rule.
fn no_covariate_plan(group: &AuctionDataset) -> Result<BandwidthPlan> {
    let sb = group.bid_sd();
    if !(sb > 0.0) {
        return Err(AuctionError::DegenerateScale("bids".into()));
    }
    let n = group.total_bids() as f64;
    BandwidthPlan::new(
        vec![],
        vec![],
        TRIWEIGHT_INFLATION * NORMAL_REFERENCE * sb * n.powf(-1.0 / 4.5),
        Regime::AsymptoticNormality,
        0,
    )
}

impl FirstStageEstimator {
    pub fn new(ds: &AuctionDataset, opts: &FirstStageOptions) -> Result<Self> {
        let d = ds.covariate_dim();
        let mut plans = BTreeMap::new();
        for (i, g) in group_by_bidder_count(ds) {
            let plan = match &opts.bandwidths {
                BandwidthChoice::Explicit(p) => p.clone(),
                BandwidthChoice::RuleOfThumb if d == 0 => no_covariate_plan(&g.dataset)?,
                BandwidthChoice::RuleOfThumb => {
                    rule_of_thumb_bandwidths(&g.dataset, BandwidthMethod::Lpe, d)?
                        .into_lpe()
                        .expect("lpe rule")
                }
            };
            plans.insert(i, plan);
        }
        Self::with_plans(ds, opts.r, plans, FirstStageKernels::triweight(d, opts.r))
    }

    pub fn with_plans(
        ds: &AuctionDataset,
        r: usize,
        plans: BTreeMap<usize, BandwidthPlan>,
        kernels: FirstStageKernels,
    ) -> Result<Self> {
        let d = ds.covariate_dim();
        if r <= d + 1 {
            return Err(AuctionError::InvalidArgument(format!(
                "smoothness order R={r} must exceed d+1={}",
                d + 1
            )));
        }
        let mut diagnostics = ValidationReport::new();
        for k in [kernels.k_g, kernels.k_1g, kernels.k_2g] {
            let report = k.check();
            if !report.passed {
                return Err(AuctionError::InvalidArgument(format!(
                    "kernel failed validation: {:?}",
                    report.issues
                )));
            }
            for issue in report.issues {
                if !diagnostics.has_code(&issue.code) {
                    diagnostics.push(issue.severity, &issue.code, issue.message);
                }
            }
        }
        let mut groups = BTreeMap::new();
        for (i, group) in group_by_bidder_count(ds) {
            let plan = plans
                .get(&i)
                .cloned()
                .ok_or(AuctionError::EmptyGroup(i))?;
            plan.check()?;
            if plan.d != d {
                return Err(AuctionError::InvalidArgument(format!(
                    "bandwidth plan has d={}, dataset has d={d}",
                    plan.d
                )));
            }
            let xs = group.dataset.auctions().iter().map(|a| a.x.clone()).collect();
            let freq = vec![i as f64; group.auction_count()];
            groups.insert(i, GroupFit { group, plan, xs, freq });
        }
        Ok(Self {
            d,
            r,
            kernels,
            groups,
            dataset: ds.clone(),
            oracle: None,
            diagnostics,
        })
    }

    /// An estimator that answers every query from the supplied functions.
    pub fn oracle(ds: &AuctionDataset, cdf: BidFunction, pdf: BidFunction) -> Self {
        let d = ds.covariate_dim();
        let groups = group_by_bidder_count(ds)
            .into_iter()
            .map(|(i, group)| {
                let plan = BandwidthPlan {
                    h_g: vec![1.0; d],
                    h_1g: vec![1.0; d],
                    h_2g: 1.0,
                    regime: Regime::Consistency,
                    d,
                    rates: None,
                };
                let xs = group.dataset.auctions().iter().map(|a| a.x.clone()).collect();
                let freq = vec![i as f64; group.auction_count()];
                (i, GroupFit { group, plan, xs, freq })
            })
            .collect();
        Self {
            d,
            r: 3.max(d + 2),
            kernels: FirstStageKernels::triweight(d, 3),
            groups,
            dataset: ds.clone(),
            oracle: Some((cdf, pdf)),
            diagnostics: ValidationReport::new(),
        }
    }

    pub fn inject_oracle(mut self, cdf: BidFunction, pdf: BidFunction) -> Self {
        self.oracle = Some((cdf, pdf));
        self
    }

    pub fn is_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    pub fn dataset(&self) -> &AuctionDataset {
        &self.dataset
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn kernels(&self) -> &FirstStageKernels {
        &self.kernels
    }

    pub fn plan(&self, bidder_count: usize) -> Option<&BandwidthPlan> {
        self.groups.get(&bidder_count).map(|g| &g.plan)
    }

    pub fn plans(&self) -> BTreeMap<usize, BandwidthPlan> {
        self.groups.iter().map(|(i, g)| (*i, g.plan.clone())).collect()
    }

    pub fn group(&self, bidder_count: usize) -> Option<&BidderGroup> {
        self.groups.get(&bidder_count).map(|g| &g.group)
    }

    /// Kernel checks collected at construction (e.g. `KERNEL_ORDER`).
    pub fn diagnostics(&self) -> &ValidationReport {
        &self.diagnostics
    }

    fn fit(&self, bidder_count: usize) -> Result<&GroupFit> {
        self.groups
            .get(&bidder_count)
            .ok_or(AuctionError::EmptyGroup(bidder_count))
    }

    fn designs(&self, g: &GroupFit, x: &[f64]) -> Result<(LocalDesign, LocalDesign)> {
        let dg = LocalDesign::with_frequencies(&g.xs, &g.freq, x, self.r, &self.kernels.k_g, &g.plan.h_g)?;
        let dpdf = LocalDesign::with_frequencies(
            &g.xs,
            &g.freq,
            x,
            self.r - 1,
            &self.kernels.k_1g,
            &g.plan.h_1g,
        )?;
        Ok((dg, dpdf))
    }

    fn cdf_with(&self, g: &GroupFit, design: &LocalDesign, b: f64) -> f64 {
        let auctions = g.group.dataset.auctions();
        design
            .equivalent_weights()
            .iter()
            .zip(auctions)
            .filter(|(l, _)| **l != 0.0)
            .map(|(l, a)| l * a.bids.iter().filter(|&&v| v <= b).count() as f64)
            .sum()
    }

    fn pdf_with(&self, g: &GroupFit, design: &LocalDesign, b: f64) -> f64 {
        let h2 = g.plan.h_2g;
        let auctions = g.group.dataset.auctions();
        design
            .equivalent_weights()
            .iter()
            .zip(auctions)
            .filter(|(l, _)| **l != 0.0)
            .map(|(l, a)| {
                let s: f64 = a.bids.iter().map(|&v| triweight((v - b) / h2) / h2).sum();
                l * s
            })
            .sum()
    }

    /// `Ĝ(b|x,I)`, not clipped to `[0, 1]`.
    pub fn estimate_bid_cdf(&self, b: f64, x: &[f64], bidder_count: usize) -> Result<f64> {
        if let Some((cdf, _)) = &self.oracle {
            return Ok(cdf(b, x, bidder_count));
        }
        let g = self.fit(bidder_count)?;
        let design = LocalDesign::with_frequencies(&g.xs, &g.freq, x, self.r, &self.kernels.k_g, &g.plan.h_g)?;
        Ok(self.cdf_with(g, &design, b))
    }

    /// `ĝ(b|x,I)`, not floored.
    pub fn estimate_bid_pdf(&self, b: f64, x: &[f64], bidder_count: usize) -> Result<f64> {
        if let Some((_, pdf)) = &self.oracle {
            return Ok(pdf(b, x, bidder_count));
        }
        let g = self.fit(bidder_count)?;
        let design = LocalDesign::with_frequencies(
            &g.xs,
            &g.freq,
            x,
            self.r - 1,
            &self.kernels.k_1g,
            &g.plan.h_1g,
        )?;
        Ok(self.pdf_with(g, &design, b))
    }

    /// Raw `(Ĝ, ĝ)` at every bid of auction `pos` within group `g`.
    fn raw_at_auction(&self, g: &GroupFit, pos: usize) -> Result<Vec<(f64, f64)>> {
        let a = &g.group.dataset.auctions()[pos];
        if let Some((cdf, pdf)) = &self.oracle {
            return Ok(a
                .bids
                .iter()
                .map(|&b| (cdf(b, &a.x, g.group.bidder_count), pdf(b, &a.x, g.group.bidder_count)))
                .collect());
        }
        let (dg, dpdf) = self.designs(g, &a.x)?;
        Ok(a.bids
            .iter()
            .map(|&b| (self.cdf_with(g, &dg, b), self.pdf_with(g, &dpdf, b)))
            .collect())
    }
}

pub fn estimate_bid_cdf(est: &FirstStageEstimator, b: f64, x: &[f64], bidder_count: usize) -> Result<f64> {
    est.estimate_bid_cdf(b, x, bidder_count)
}

pub fn estimate_bid_pdf(est: &FirstStageEstimator, b: f64, x: &[f64], bidder_count: usize) -> Result<f64> {
    est.estimate_bid_pdf(b, x, bidder_count)
}

pub fn inject_oracle(est: FirstStageEstimator, cdf: BidFunction, pdf: BidFunction) -> FirstStageEstimator {
    est.inject_oracle(cdf, pdf)
}

/// One recovered value with its source bid and the first-stage quantities
/// actually used in the inversion (after clipping and flooring).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoValueEntry {
    /// Position of the auction in the source dataset.
    pub auction_index: usize,
    pub auction_id: String,
    /// 1-based bidder position within the auction.
    pub p: usize,
    pub bid: f64,
    pub x: Vec<f64>,
    pub bidder_count: usize,
    pub v_hat: f64,
    pub g_cdf: f64,
    pub g_pdf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoValueSample {
    pub d: usize,
    /// Entries in dataset order: auction by auction, bidders in file order.
    pub entries: Vec<PseudoValueEntry>,
    /// Entries whose CDF was clipped or whose density hit the floor.
    pub clamp_count: usize,
    /// Adjacent pairs (sorted by bid within an auction) whose values decrease.
    pub monotonicity_violations: usize,
}

impl PseudoValueSample {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.v_hat).collect()
    }

    /// Entries grouped into consecutive runs sharing an auction.
    pub fn auctions(&self) -> Vec<&[PseudoValueEntry]> {
        let mut out = Vec::new();
        let mut start = 0;
        for k in 1..=self.entries.len() {
            if k == self.entries.len()
                || self.entries[k].auction_index != self.entries[start].auction_index
            {
                if k > start {
                    out.push(&self.entries[start..k]);
                }
                start = k;
            }
        }
        out
    }

    /// Number of auctions with at least one entry.
    pub fn auction_count(&self) -> usize {
        self.auctions().len()
    }

    /// Infeasible sample built from known private values (one vector per
    /// auction, aligned with the bids). First-stage fields are NaN.
    pub fn from_true_values(ds: &AuctionDataset, values: &[Vec<f64>]) -> Result<Self> {
        if values.len() != ds.len() {
            return Err(AuctionError::InvalidArgument(format!(
                "{} value rows for {} auctions",
                values.len(),
                ds.len()
            )));
        }
        let mut entries = Vec::with_capacity(ds.total_bids());
        for (li, (a, v)) in ds.auctions().iter().zip(values).enumerate() {
            if v.len() != a.bids.len() {
                return Err(AuctionError::InvalidArgument(format!(
                    "auction {} has {} bids but {} values",
                    a.auction_id,
                    a.bids.len(),
                    v.len()
                )));
            }
            for (p, (&b, &val)) in a.bids.iter().zip(v).enumerate() {
                entries.push(PseudoValueEntry {
                    auction_index: li,
                    auction_id: a.auction_id.clone(),
                    p: p + 1,
                    bid: b,
                    x: a.x.clone(),
                    bidder_count: a.bidder_count(),
                    v_hat: val,
                    g_cdf: f64::NAN,
                    g_pdf: f64::NAN,
                });
            }
        }
        Ok(Self {
            d: ds.covariate_dim(),
            entries,
            clamp_count: 0,
            monotonicity_violations: 0,
        })
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["auction_id".to_string(), "p".into(), "I".into(), "bid".into()];
        header.extend((1..=self.d).map(|j| format!("x{j}")));
        header.extend(["v_hat".into(), "G_hat".into(), "g_hat".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.entries {
            let mut row = vec![
                e.auction_id.clone(),
                e.p.to_string(),
                e.bidder_count.to_string(),
                fmt_f64(e.bid),
            ];
            row.extend(e.x.iter().map(|v| fmt_f64(*v)));
            row.extend([fmt_f64(e.v_hat), fmt_f64(e.g_cdf), fmt_f64(e.g_pdf)]);
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`PseudoValueSample::write_csv`]. Auction
    /// indices are assigned by first appearance; counters are reset to zero.
    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(source);
        let header = reader.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 7 || cols[..4] != ["auction_id", "p", "I", "bid"] {
            return Err(AuctionError::Load {
                row: 1,
                message: "expected header auction_id,p,I,bid,x1..xd,v_hat,G_hat,g_hat".into(),
            });
        }
        let d = cols.len() - 7;
        let mut index: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let row = k + 2;
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|_| AuctionError::Load {
                    row,
                    message: format!("non-numeric field '{}'", &rec[i]),
                })
            };
            let id = rec[0].to_string();
            let auction_index = match index.iter().rposition(|s| *s == id) {
                Some(i) => i,
                None => {
                    index.push(id.clone());
                    index.len() - 1
                }
            };
            entries.push(PseudoValueEntry {
                auction_index,
                auction_id: id,
                p: num(1)? as usize,
                bidder_count: num(2)? as usize,
                bid: num(3)?,
                x: (0..d).map(|j| num(4 + j)).collect::<Result<_>>()?,
                v_hat: num(4 + d)?,
                g_cdf: num(5 + d)?,
                g_pdf: num(6 + d)?,
            });
        }
        Ok(Self {
            d,
            entries,
            clamp_count: 0,
            monotonicity_violations: 0,
        })
    }
}

/// Inverts a bid: `B + clip(G, 0, 1) / ((I − 1) · max(g, floor))`. Returns the
/// value, the clipped CDF, the floored density and whether a guard was active.
pub fn invert_bid(bid: f64, cdf: f64, pdf: f64, bidder_count: usize, floor: f64) -> (f64, f64, f64, bool) {
    let g_clip = cdf.clamp(0.0, 1.0);
    let pdf_used = if pdf < floor { floor } else { pdf };
    let clamped = g_clip != cdf || pdf_used != pdf;
    let v = bid + g_clip / ((bidder_count as f64 - 1.0) * pdf_used);
    (v, g_clip, pdf_used, clamped)
}

/// Pseudo private value for every bid; no observation is dropped.
pub fn recover_pseudo_values(est: &FirstStageEstimator) -> Result<PseudoValueSample> {
    let ds = est.dataset();
    // (dataset position, raw (G, g) per bid)
    let mut raw: Vec<Option<Vec<(f64, f64)>>> = vec![None; ds.len()];
    let mut floors: BTreeMap<usize, f64> = BTreeMap::new();
    for (&i, g) in &est.groups {
        let values: Vec<Vec<(f64, f64)>> = (0..g.group.auction_count())
            .into_par_iter()
            .map(|pos| est.raw_at_auction(g, pos))
            .collect::<Result<_>>()?;
        let gmax = values
            .iter()
            .flatten()
            .map(|(_, pdf)| *pdf)
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        floors.insert(i, (DENSITY_FLOOR_FRACTION * gmax).max(ABSOLUTE_DENSITY_FLOOR));
        for (pos, v) in values.into_iter().enumerate() {
            raw[g.group.indices[pos]] = Some(v);
        }
    }

    let mut entries = Vec::with_capacity(ds.total_bids());
    let mut clamp_count = 0;
    let mut monotonicity_violations = 0;
    for (li, (a, r)) in ds.auctions().iter().zip(raw).enumerate() {
        let r = r.expect("every auction belongs to a group");
        let i = a.bidder_count();
        let floor = floors[&i];
        let mut pairs = Vec::with_capacity(i);
        for (p, (&b, &(cdf, pdf))) in a.bids.iter().zip(&r).enumerate() {
            if !cdf.is_finite() || !pdf.is_finite() {
                return Err(AuctionError::SingularDesign { center: a.x.clone() });
            }
            let (v, gc, gp, clamped) = invert_bid(b, cdf, pdf, i, floor);
            clamp_count += clamped as usize;
            pairs.push((b, v));
            entries.push(PseudoValueEntry {
                auction_index: li,
                auction_id: a.auction_id.clone(),
                p: p + 1,
                bid: b,
                x: a.x.clone(),
                bidder_count: i,
                v_hat: v,
                g_cdf: gc,
                g_pdf: gp,
            });
        }
        pairs.sort_by(|u, w| u.0.total_cmp(&w.0));
        monotonicity_violations += pairs
            .windows(2)
            .filter(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1)
            .count();
    }
    Ok(PseudoValueSample {
        d: ds.covariate_dim(),
        entries,
        clamp_count,
        monotonicity_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AuctionRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_pairs(l: usize, seed: u64) -> (AuctionDataset, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut auctions = Vec::new();
        let mut values = Vec::new();
        for k in 0..l {
            let v: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let bids = v.iter().map(|x| x / 2.0).collect();
            auctions.push(AuctionRecord::new(format!("a{k}"), vec![], bids));
            values.push(v);
        }
        (AuctionDataset::new(auctions, 0).unwrap(), values)
    }

    fn uniform_oracle(ds: &AuctionDataset) -> FirstStageEstimator {
        FirstStageEstimator::oracle(
            ds,
            Arc::new(|b, _, _| (2.0 * b).clamp(0.0, 1.0)),
            Arc::new(|b, _, _| if (0.0..=0.5).contains(&b) { 2.0 } else { 0.0 }),
        )
    }

    #[test]
    fn oracle_inversion_is_exact_for_uniform_pairs() {
        let (ds, values) = uniform_pairs(100, 3);
        let s = recover_pseudo_values(&uniform_oracle(&ds)).unwrap();
        assert_eq!(s.len(), 200);
        for (e, v) in s.entries.iter().zip(values.iter().flatten()) {
            assert!((e.v_hat - v).abs() <= 1e-12);
            assert!(e.v_hat >= e.bid);
        }
        assert_eq!(s.clamp_count, 0);
    }

    #[test]
    fn zero_cdf_returns_the_bid() {
        assert_eq!(invert_bid(0.3, 0.0, 2.0, 3, 1e-4).0, 0.3);
        assert_eq!(invert_bid(0.3, -0.02, 2.0, 3, 1e-4), (0.3, 0.0, 2.0, true));
    }

    #[test]
    fn zero_density_oracle_floors_everything() {
        let (ds, _) = uniform_pairs(10, 1);
        let est = uniform_oracle(&ds).inject_oracle(
            Arc::new(|b, _, _| (2.0 * b).clamp(0.0, 1.0)),
            Arc::new(|_, _, _| 0.0),
        );
        let s = recover_pseudo_values(&est).unwrap();
        assert_eq!(s.clamp_count, s.len());
        assert!(s.entries.iter().all(|e| e.g_pdf == ABSOLUTE_DENSITY_FLOOR));
    }

    #[test]
    fn no_covariate_cdf_is_empirical_cdf() {
        let (ds, _) = uniform_pairs(40, 9);
        let est = FirstStageEstimator::new(&ds, &FirstStageOptions::default_for(0)).unwrap();
        let bids: Vec<f64> = ds.bids().collect();
        let h = est.plan(2).unwrap().h_2g;
        for &b in &[0.01, 0.1, 0.25, 0.4, 0.6] {
            let ecdf = bids.iter().filter(|&&v| v <= b).count() as f64 / bids.len() as f64;
            assert!((est.estimate_bid_cdf(b, &[], 2).unwrap() - ecdf).abs() < 1e-12);
            let pr: f64 =
                bids.iter().map(|&v| triweight((v - b) / h)).sum::<f64>() / (bids.len() as f64 * h);
            assert!((est.estimate_bid_pdf(b, &[], 2).unwrap() - pr).abs() < 1e-12);
        }
    }

    #[test]
    fn entries_keep_dataset_order_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let auctions: Vec<AuctionRecord> = (0..60)
            .map(|k| {
                let x: f64 = rng.random_range(0.5..2.0);
                let i = if k % 3 == 0 { 3 } else { 4 };
                let bids = (0..i).map(|_| x * rng.random_range(0.2..1.0)).collect();
                AuctionRecord::new(format!("id{k}"), vec![x], bids)
            })
            .collect();
        let ds = AuctionDataset::new(auctions, 1).unwrap();
        let est = FirstStageEstimator::new(&ds, &FirstStageOptions::default_for(1)).unwrap();
        let s = recover_pseudo_values(&est).unwrap();
        assert_eq!(s.len(), ds.total_bids());
        let mut k = 0;
        for (li, a) in ds.auctions().iter().enumerate() {
            for &b in &a.bids {
                assert_eq!(s.entries[k].auction_index, li);
                assert_eq!(s.entries[k].bid, b);
                assert!(s.entries[k].v_hat >= b);
                k += 1;
            }
        }
        assert_eq!(s.auction_count(), 60);
    }

    #[test]
    fn order_restriction_enforced() {
        let (ds, _) = uniform_pairs(10, 2);
        let opts = FirstStageOptions {
            r: 1,
            bandwidths: BandwidthChoice::RuleOfThumb,
        };
        assert!(FirstStageEstimator::new(&ds, &opts).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (ds, _) = uniform_pairs(5, 8);
        let s = recover_pseudo_values(&uniform_oracle(&ds)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("auction_id,p,I,bid,v_hat,G_hat,g_hat\n"));
        let back = PseudoValueSample::read_csv(&buf[..]).unwrap();
        assert_eq!(back.entries, s.entries);
    }
}
