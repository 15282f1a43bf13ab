//! Auction dataset model, CSV ingestion and grouping by bidder count.
//!
//! The CSV layout is one row per (auction, bidder):
//!
//! ```text
//! auction_id,bidder_id,I,bid,x1,...,xd
//! ```
//!
//! `bidder_id` is informational; bids keep file order within an auction and
//! auctions keep the order of their first appearance.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AuctionError, Result};
use crate::numeric::stats;
use crate::validation::ValidationReport;

/// Groups with fewer auctions than this get a `SMALL_GROUP` warning.
pub const SMALL_GROUP_THRESHOLD: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub auction_id: String,
    pub x: Vec<f64>,
    pub bids: Vec<f64>,
}

impl AuctionRecord {
    pub fn new(auction_id: impl Into<String>, x: Vec<f64>, bids: Vec<f64>) -> Self {
        Self {
            auction_id: auction_id.into(),
            x,
            bids,
        }
    }

    /// Number of bidders `I`; always equal to `bids.len()`.
    pub fn bidder_count(&self) -> usize {
        self.bids.len()
    }
}

/// Immutable collection of auctions sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionDataset {
    auctions: Vec<AuctionRecord>,
    d: usize,
}

impl AuctionDataset {
    /// Builds a dataset, enforcing the structural invariants (I ≥ 2, shared
    /// covariate dimension). Finiteness and positivity of bids are left to
    /// [`validate_dataset`], which reports rather than fails.
    pub fn new(auctions: Vec<AuctionRecord>, d: usize) -> Result<Self> {
        for a in &auctions {
            if a.bids.len() < 2 {
                return Err(AuctionError::TooFewBids {
                    auction_id: a.auction_id.clone(),
                    count: a.bids.len(),
                });
            }
            if a.x.len() != d {
                return Err(AuctionError::InvalidDataset(format!(
                    "auction {} has {} covariates, expected {d}",
                    a.auction_id,
                    a.x.len()
                )));
            }
        }
        Ok(Self { auctions, d })
    }

    pub fn auctions(&self) -> &[AuctionRecord] {
        &self.auctions
    }

    pub fn covariate_dim(&self) -> usize {
        self.d
    }

    /// Number of auctions `L`.
    pub fn len(&self) -> usize {
        self.auctions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.auctions.is_empty()
    }

    pub fn total_bids(&self) -> usize {
        self.auctions.iter().map(|a| a.bids.len()).sum()
    }

    pub fn bids(&self) -> impl Iterator<Item = f64> + '_ {
        self.auctions.iter().flat_map(|a| a.bids.iter().copied())
    }

    /// Covariate column `j`, one entry per auction.
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        self.auctions.iter().map(|a| a.x[j]).collect()
    }

    /// Sample standard deviation of all bids.
    pub fn bid_sd(&self) -> f64 {
        let bids: Vec<f64> = self.bids().collect();
        stats::sample_sd(&bids)
    }

    /// Per-covariate sample standard deviation across auctions.
    pub fn covariate_sd(&self) -> Vec<f64> {
        (0..self.d)
            .map(|j| stats::sample_sd(&self.covariate(j)))
            .collect()
    }
}

/// Auctions sharing one bidder count `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct BidderGroup {
    pub bidder_count: usize,
    /// Positions of the group's auctions in the parent dataset.
    pub indices: Vec<usize>,
    pub dataset: AuctionDataset,
}

impl BidderGroup {
    /// `L_I`, the number of auctions with `I` bidders.
    pub fn auction_count(&self) -> usize {
        self.indices.len()
    }

    /// `n_I = I · L_I`.
    pub fn bid_count(&self) -> usize {
        self.bidder_count * self.indices.len()
    }
}

/// Partitions auctions by bidder count. Every auction lands in exactly one group.
pub fn group_by_bidder_count(ds: &AuctionDataset) -> BTreeMap<usize, BidderGroup> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, a) in ds.auctions.iter().enumerate() {
        members.entry(a.bidder_count()).or_default().push(i);
    }
    members
        .into_iter()
        .map(|(count, indices)| {
            let auctions = indices.iter().map(|&i| ds.auctions[i].clone()).collect();
            let group = BidderGroup {
                bidder_count: count,
                indices,
                dataset: AuctionDataset {
                    auctions,
                    d: ds.d,
                },
            };
            (count, group)
        })
        .collect()
}

fn parse_number(field: &str, row: usize, what: &str) -> Result<f64> {
    let value: f64 = field.trim().parse().map_err(|_| AuctionError::Load {
        row,
        message: format!("non-numeric {what} '{field}'"),
    })?;
    if !value.is_finite() {
        return Err(AuctionError::Load {
            row,
            message: format!("non-numeric {what} '{field}'"),
        });
    }
    Ok(value)
}

/// Reads the CSV format described in the module docs.
pub fn load_dataset<R: Read>(source: R) -> Result<AuctionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| AuctionError::Load {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["auction_id", "bidder_id", "I", "bid"];
    if header.len() < 4 || header.iter().take(4).ne(expected.iter().copied()) {
        return Err(AuctionError::Load {
            row: 1,
            message: "header must start with auction_id,bidder_id,I,bid".into(),
        });
    }
    let d = header.len() - 4;
    for (j, name) in header.iter().skip(4).enumerate() {
        if name != format!("x{}", j + 1) {
            return Err(AuctionError::Load {
                row: 1,
                message: format!("expected covariate column x{}, found '{name}'", j + 1),
            });
        }
    }

    struct Pending {
        record: AuctionRecord,
        declared: usize,
        first_row: usize,
    }
    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for result in reader.records() {
        let rec = result.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            AuctionError::Load {
                row,
                message: format!("malformed row: {e}"),
            }
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec[0].trim().to_string();
        let declared: usize = rec[2].trim().parse().map_err(|_| AuctionError::Load {
            row,
            message: format!("non-integer bidder count '{}'", &rec[2]),
        })?;
        let bid = parse_number(&rec[3], row, "bid")?;
        let x = (0..d)
            .map(|j| parse_number(&rec[4 + j], row, "covariate"))
            .collect::<Result<Vec<_>>>()?;

        match index.get(&id) {
            Some(&k) => {
                let pending = &mut order[k];
                if pending.declared != declared {
                    return Err(AuctionError::Load {
                        row,
                        message: format!(
                            "auction {id} declares I={declared}, earlier rows declare I={}",
                            pending.declared
                        ),
                    });
                }
                if pending.record.x != x {
                    return Err(AuctionError::Load {
                        row,
                        message: format!("auction {id} has inconsistent covariates"),
                    });
                }
                pending.record.bids.push(bid);
            }
            None => {
                index.insert(id.clone(), order.len());
                order.push(Pending {
                    record: AuctionRecord::new(id, x, vec![bid]),
                    declared,
                    first_row: row,
                });
            }
        }
    }

    let mut auctions = Vec::with_capacity(order.len());
    for p in order {
        let n = p.record.bids.len();
        if n < 2 {
            return Err(AuctionError::TooFewBids {
                auction_id: p.record.auction_id,
                count: n,
            });
        }
        if n != p.declared {
            return Err(AuctionError::Load {
                row: p.first_row,
                message: format!(
                    "auction {} declares I={} but has {n} bids",
                    p.record.auction_id, p.declared
                ),
            });
        }
        auctions.push(p.record);
    }
    AuctionDataset::new(auctions, d)
}

/// Writes the dataset in the CSV format read by [`load_dataset`].
pub fn save_dataset<W: Write>(ds: &AuctionDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![
        "auction_id".to_string(),
        "bidder_id".to_string(),
        "I".to_string(),
        "bid".to_string(),
    ];
    header.extend((1..=ds.d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for a in &ds.auctions {
        for (p, b) in a.bids.iter().enumerate() {
            let mut row = vec![
                a.auction_id.clone(),
                (p + 1).to_string(),
                a.bids.len().to_string(),
                fmt_f64(*b),
            ];
            row.extend(a.x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits; exponent
/// notation for very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn csv_err(e: csv::Error) -> AuctionError {
    AuctionError::Io(e.to_string())
}

/// Finite-sample sanity checks. Never fails; problems are reported.
pub fn validate_dataset(ds: &AuctionDataset) -> ValidationReport {
    let mut report = ValidationReport::new();
    if ds.is_empty() {
        report.error("EMPTY_DATASET", "dataset has no auctions");
        return report;
    }

    for (l, a) in ds.auctions.iter().enumerate() {
        for (p, &b) in a.bids.iter().enumerate() {
            if !b.is_finite() {
                report.error(
                    "NONFINITE_BID",
                    format!("auction {} (#{l}) bidder {}: bid is {b}", a.auction_id, p + 1),
                );
            } else if b <= 0.0 {
                report.error(
                    "NONPOSITIVE_BID",
                    format!("auction {} (#{l}) bidder {}: bid {b} <= 0", a.auction_id, p + 1),
                );
            }
        }
        if a.x.iter().any(|v| !v.is_finite()) {
            report.error(
                "NONFINITE_COVARIATE",
                format!("auction {} (#{l}) has a non-finite covariate", a.auction_id),
            );
        }
    }

    for (count, group) in group_by_bidder_count(ds) {
        let finite: Vec<f64> = group.dataset.bids().filter(|b| b.is_finite()).collect();
        if let (Some(lo), Some(hi)) = (
            finite.iter().copied().reduce(f64::min),
            finite.iter().copied().reduce(f64::max),
        ) {
            report.info("BID_RANGE", format!("I={count}: bids in [{lo}, {hi}]"));
        }
        if group.auction_count() < SMALL_GROUP_THRESHOLD {
            report.warn(
                "SMALL_GROUP",
                format!(
                    "I={count} has only L_I={} auctions (< {SMALL_GROUP_THRESHOLD}); estimates will be noisy",
                    group.auction_count()
                ),
            );
        }
    }

    for j in 0..ds.d {
        let col: Vec<f64> = ds.covariate(j).into_iter().filter(|v| v.is_finite()).collect();
        if let (Some(lo), Some(hi)) = (
            col.iter().copied().reduce(f64::min),
            col.iter().copied().reduce(f64::max),
        ) {
            report.info("COVARIATE_BOX", format!("x{}: [{lo}, {hi}]", j + 1));
        }
    }

    if ds.d > 0 {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for a in &ds.auctions {
            *seen
                .entry(a.x.iter().map(|v| v.to_bits()).collect())
                .or_default() += 1;
        }
        let dups = seen.values().filter(|&&c| c > 1).count();
        if dups > 0 {
            report.warn(
                "DUPLICATE_X",
                format!("{dups} covariate vectors are shared by more than one auction"),
            );
        }
    }
    report
}
