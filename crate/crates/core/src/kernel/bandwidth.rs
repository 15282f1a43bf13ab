//! Rule-of-thumb bandwidths and rate-condition checks.
//!
//! Every rule has the form `c · σ̂ · n^(−a)`. Validation works on the rate
//! exponents `a`, since the conditions are asymptotic statements about how
//! fast each bandwidth shrinks with `L`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::AuctionDataset;
use crate::error::{AuctionError, Result};
use crate::numeric::stats::sample_sd;
use crate::validation::ValidationReport;

/// Silverman's normal-reference constant.
pub const NORMAL_REFERENCE: f64 = 1.06;
/// Inflation applied to the local polynomial rules (triweight vs. Gaussian
/// canonical bandwidth).
pub const TRIWEIGHT_INFLATION: f64 = 2.978;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Consistency,
    AsymptoticNormality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMethod {
    Lpe,
    GpvFirst,
    GpvSecond,
}

/// Exponents `a` in `h ∝ n^(−a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateExponents {
    #[serde(rename = "a_G")]
    pub a_g: f64,
    pub a_1g: f64,
    pub a_2g: f64,
}

mod scalar_or_vec {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        One(f64),
        Many(Vec<f64>),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.len() == 1 {
            v[0].serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::One(x) => vec![x],
            Repr::Many(v) => v,
        })
    }
}

/// The three first-stage bandwidths. `h_G` and `h_1g` carry one entry per
/// covariate; `h_2g` smooths in the bid direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlan {
    #[serde(rename = "h_G", with = "scalar_or_vec")]
    pub h_g: Vec<f64>,
    #[serde(with = "scalar_or_vec")]
    pub h_1g: Vec<f64>,
    pub h_2g: f64,
    pub regime: Regime,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RateExponents>,
}

impl BandwidthPlan {
    pub fn new(h_g: Vec<f64>, h_1g: Vec<f64>, h_2g: f64, regime: Regime, d: usize) -> Result<Self> {
        let plan = Self {
            h_g,
            h_1g,
            h_2g,
            regime,
            d,
            rates: None,
        };
        plan.check()?;
        Ok(plan)
    }

    /// Same value on every covariate axis.
    pub fn uniform(h_g: f64, h_1g: f64, h_2g: f64, regime: Regime, d: usize) -> Result<Self> {
        Self::new(vec![h_g; d], vec![h_1g; d], h_2g, regime, d)
    }

    pub fn check(&self) -> Result<()> {
        if self.h_g.len() != self.d || self.h_1g.len() != self.d {
            return Err(AuctionError::InvalidArgument(format!(
                "bandwidth plan for d={} needs {} covariate bandwidths",
                self.d, self.d
            )));
        }
        let all_positive = self
            .h_g
            .iter()
            .chain(&self.h_1g)
            .chain(std::iter::once(&self.h_2g))
            .all(|h| h.is_finite() && *h > 0.0);
        if !all_positive {
            return Err(AuctionError::InvalidArgument(
                "bandwidths must be finite and positive".into(),
            ));
        }
        if let (Regime::AsymptoticNormality, 1, Some(r)) = (self.regime, self.d, self.rates) {
            if (r.a_1g - r.a_2g).abs() > 1e-12 {
                return Err(AuctionError::InvalidArgument(
                    "h_1g and h_2g must shrink at the same rate in the normality regime".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpvFirstBandwidths {
    #[serde(rename = "h_G")]
    pub h_g: Vec<f64>,
    pub h_gb: f64,
    pub h_gx: Vec<f64>,
    pub h_delta: f64,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpvSecondBandwidths {
    pub h_fv: f64,
    pub h_fx: Vec<f64>,
    pub h_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum RuleOfThumb {
    Lpe(BandwidthPlan),
    GpvFirst(GpvFirstBandwidths),
    GpvSecond(GpvSecondBandwidths),
}

impl RuleOfThumb {
    pub fn into_lpe(self) -> Option<BandwidthPlan> {
        match self {
            RuleOfThumb::Lpe(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_gpv_first(self) -> Option<GpvFirstBandwidths> {
        match self {
            RuleOfThumb::GpvFirst(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_gpv_second(self) -> Option<GpvSecondBandwidths> {
        match self {
            RuleOfThumb::GpvSecond(p) => Some(p),
            _ => None,
        }
    }
}

fn positive_scale(sd: f64, what: &str) -> Result<f64> {
    if sd > 0.0 && sd.is_finite() {
        Ok(sd)
    } else {
        Err(AuctionError::DegenerateScale(what.to_string()))
    }
}

fn covariate_scales(ds: &AuctionDataset) -> Result<Vec<f64>> {
    ds.covariate_sd()
        .into_iter()
        .enumerate()
        .map(|(j, s)| positive_scale(s, &format!("x{}", j + 1)))
        .collect()
}

/// LPE rate exponents for dimension `d`.
pub fn lpe_rates(d: usize) -> RateExponents {
    if d <= 1 {
        RateExponents {
            a_g: 1.0 / 6.5,
            a_1g: 1.0 / 4.5,
            a_2g: 1.0 / 4.5,
        }
    } else {
        RateExponents {
            a_g: 1.0 / 8.5,
            a_1g: 1.0 / 9.5,
            a_2g: 1.0 / 9.5,
        }
    }
}

/// Boundary bandwidth `λ_δ · n^(−1/2)` (d ≤ 1) or `λ_δ · n^(−1/3)` (d = 2).
pub fn boundary_bandwidth(lambda: f64, n: usize, d: usize) -> f64 {
    let rate = if d <= 1 { 0.5 } else { 1.0 / 3.0 };
    lambda * (n as f64).powf(-rate)
}

/// Rule-of-thumb bandwidths for one bidder-count group.
///
/// `ds` should hold a single group; `IL` is its total bid count. For
/// [`BandwidthMethod::GpvSecond`] the bids of `ds` are read as the values to
/// be smoothed and every one of them counts as a survivor.
pub fn rule_of_thumb_bandwidths(
    ds: &AuctionDataset,
    method: BandwidthMethod,
    d: usize,
) -> Result<RuleOfThumb> {
    if ds.is_empty() {
        return Err(AuctionError::EmptyGroup(0));
    }
    if !(1..=2).contains(&d) {
        return Err(AuctionError::UnsupportedDimension(d));
    }
    if ds.covariate_dim() != d {
        return Err(AuctionError::InvalidArgument(format!(
            "dataset has d={}, rule requested for d={d}",
            ds.covariate_dim()
        )));
    }
    let n = ds.total_bids() as f64;
    let sx = covariate_scales(ds)?;
    let sb = positive_scale(ds.bid_sd(), "bids")?;
    Ok(match method {
        BandwidthMethod::Lpe => {
            let r = lpe_rates(d);
            let c = TRIWEIGHT_INFLATION * NORMAL_REFERENCE;
            let mut plan = BandwidthPlan::new(
                sx.iter().map(|s| c * s * n.powf(-r.a_g)).collect(),
                sx.iter().map(|s| c * s * n.powf(-r.a_1g)).collect(),
                c * sb * n.powf(-r.a_2g),
                Regime::AsymptoticNormality,
                d,
            )?;
            plan.rates = Some(r);
            RuleOfThumb::Lpe(plan)
        }
        BandwidthMethod::GpvFirst => {
            let (ag, agb) = if d == 1 { (1.0 / 9.0, 0.1) } else { (1.0 / 12.0, 1.0 / 13.0) };
            RuleOfThumb::GpvFirst(GpvFirstBandwidths {
                h_g: sx.iter().map(|s| NORMAL_REFERENCE * s * n.powf(-ag)).collect(),
                h_gb: NORMAL_REFERENCE * sb * n.powf(-agb),
                h_gx: sx.iter().map(|s| NORMAL_REFERENCE * s * n.powf(-agb)).collect(),
                h_delta: boundary_bandwidth(1.0, ds.total_bids(), d),
                d,
            })
        }
        BandwidthMethod::GpvSecond => {
            let values: Vec<f64> = ds.bids().collect();
            let x: Vec<Vec<f64>> = ds.auctions().iter().map(|a| a.x.clone()).collect();
            let per_value_x: Vec<Vec<f64>> = ds
                .auctions()
                .iter()
                .flat_map(|a| std::iter::repeat_n(a.x.clone(), a.bids.len()))
                .collect();
            RuleOfThumb::GpvSecond(gpv_second_step_bandwidths(&values, &per_value_x, &x, d)?)
        }
    })
}

/// Second-step bandwidths from the surviving pseudo-values (`v_hat`, with
/// their covariates `v_x`) and the covariates of all `L` auctions.
pub fn gpv_second_step_bandwidths(
    v_hat: &[f64],
    v_x: &[Vec<f64>],
    auction_x: &[Vec<f64>],
    d: usize,
) -> Result<GpvSecondBandwidths> {
    if v_hat.is_empty() {
        return Err(AuctionError::AllTrimmed);
    }
    let nt = v_hat.len() as f64;
    let l = auction_x.len() as f64;
    let (a_f, a_x) = if d <= 1 { (0.1, 1.0 / 9.0) } else { (1.0 / 13.0, 1.0 / 12.0) };
    let sv = positive_scale(sample_sd(v_hat), "pseudo-values")?;
    let mut h_fx = Vec::with_capacity(d);
    let mut h_x = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = v_x.iter().map(|x| x[j]).collect();
        let sx = positive_scale(sample_sd(&col), &format!("x{}", j + 1))?;
        h_fx.push(NORMAL_REFERENCE * sx * nt.powf(-a_f));
        let col_all: Vec<f64> = auction_x.iter().map(|x| x[j]).collect();
        let sx_all = positive_scale(sample_sd(&col_all), &format!("x{}", j + 1))?;
        h_x.push(NORMAL_REFERENCE * sx_all * l.powf(-a_x));
    }
    Ok(GpvSecondBandwidths {
        h_fv: NORMAL_REFERENCE * sv * nt.powf(-a_f),
        h_fx,
        h_x,
    })
}

fn implied_exponent(h: f64, l: usize) -> f64 {
    if l < 2 {
        return f64::NAN;
    }
    -h.ln() / (l as f64).ln()
}

/// Compares the plan's rate exponents against the rate conditions of its
/// regime. Exponents come from `plan.rates` when present and are otherwise
/// read off the values as `−ln h / ln L`; when a bandwidth has one entry per
/// covariate the largest entry (slowest rate) is used.
pub fn validate_bandwidth_plan(plan: &BandwidthPlan, l: usize, r: usize) -> ValidationReport {
    let mut report = ValidationReport::new();
    let d = plan.d as f64;
    let rf = r as f64;
    let widest = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let rates = plan.rates.unwrap_or_else(|| RateExponents {
        a_g: implied_exponent(widest(&plan.h_g), l),
        a_1g: implied_exponent(widest(&plan.h_1g), l),
        a_2g: implied_exponent(plan.h_2g, l),
    });
    if plan.rates.is_none() {
        report.info(
            "IMPLIED_RATES",
            format!(
                "no rate exponents recorded; using a_G={:.4}, a_1g={:.4}, a_2g={:.4} from L={l}",
                rates.a_g, rates.a_1g, rates.a_2g
            ),
        );
    }
    let mut check = |ok: bool, code: &str, what: String| {
        if ok {
            report.info(code, format!("satisfied: {what}"));
        } else {
            report.error(code, format!("violated: {what}"));
        }
    };

    match plan.regime {
        Regime::Consistency => {
            check(
                rates.a_g > 0.0 && d * rates.a_g < 1.0,
                "CONSISTENCY_RATE_G",
                format!("h_G -> 0 and L h_G^d / log L -> inf (a_G={:.4})", rates.a_g),
            );
            check(
                rates.a_1g > 0.0 && rates.a_2g > 0.0 && d * rates.a_1g + rates.a_2g < 1.0,
                "CONSISTENCY_RATE_G_DENSITY",
                format!(
                    "h_1g, h_2g -> 0 and L h_1g^d h_2g / log L -> inf (a_1g={:.4}, a_2g={:.4})",
                    rates.a_1g, rates.a_2g
                ),
            );
        }
        Regime::AsymptoticNormality => {
            check(
                rates.a_g * (rf + d) > 0.5,
                "BIAS_RATE_G",
                format!("sqrt(L) h_G^(R+d) -> 0 (a_G={:.4} > {:.4})", rates.a_g, 0.5 / (rf + d)),
            );
            check(
                d * rates.a_g < 0.5,
                "VARIANCE_RATE_G",
                format!("log L / (sqrt(L) h_G^d) -> 0 (d a_G={:.4} < 0.5)", d * rates.a_g),
            );
            check(
                rates.a_1g * (rf + d - 1.0) > 0.5,
                "BIAS_RATE_1G",
                format!(
                    "sqrt(L) h_1g^(R+d-1) -> 0 (a_1g={:.4} > {:.4})",
                    rates.a_1g,
                    0.5 / (rf + d - 1.0)
                ),
            );
            check(
                rates.a_2g * rf > 0.5,
                "BIAS_RATE_2G",
                format!("sqrt(L) h_2g^R -> 0 (a_2g={:.4} > {:.4})", rates.a_2g, 0.5 / rf),
            );
            check(
                d * rates.a_1g + rates.a_2g < 0.5,
                "VARIANCE_RATE_DENSITY",
                format!(
                    "log L / (sqrt(L) h_1g^d h_2g) -> 0 (d a_1g + a_2g={:.4} < 0.5)",
                    d * rates.a_1g + rates.a_2g
                ),
            );
            if plan.d == 1 {
                check(
                    (rates.a_1g - rates.a_2g).abs() <= 1e-12,
                    "EQUAL_DENSITY_RATES",
                    "h_1g and h_2g shrink at the same rate".into(),
                );
            }
            let stone_g = 1.0 / (2.0 * rf + 2.0 + d);
            let stone_density = 1.0 / (2.0 * rf + d);
            for (name, a, stone) in [
                ("h_G", rates.a_g, stone_g),
                ("h_1g", rates.a_1g, stone_density),
                ("h_2g", rates.a_2g, stone_density),
            ] {
                if a <= stone + 1e-12 {
                    report.error(
                        "OVERSMOOTHED",
                        format!("{name} exponent {a:.4} is not above the optimal-rate exponent {stone:.4}"),
                    );
                } else {
                    report.info(
                        "UNDERSMOOTHED",
                        format!("{name} exponent {a:.4} exceeds the optimal-rate exponent {stone:.4}"),
                    );
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AuctionRecord;

    /// Five bids per auction, covariate standard deviation exactly one.
    fn unit_scale_dataset(l: usize) -> AuctionDataset {
        let auctions = (0..l)
            .map(|i| {
                let x = if i % 2 == 0 { -1.0 } else { 1.0 };
                let bids = (0..5).map(|p| 1.0 + 0.1 * p as f64 + 0.001 * i as f64).collect();
                AuctionRecord::new(i.to_string(), vec![x], bids)
            })
            .collect();
        AuctionDataset::new(auctions, 1).unwrap()
    }

    #[test]
    fn lpe_rule_matches_direct_evaluation() {
        let ds = unit_scale_dataset(200);
        let sx = ds.covariate_sd()[0];
        let plan = rule_of_thumb_bandwidths(&ds, BandwidthMethod::Lpe, 1)
            .unwrap()
            .into_lpe()
            .unwrap();
        let expected = 2.978 * 1.06 * sx * 1000f64.powf(-1.0 / 6.5);
        assert!((plan.h_g[0] - expected).abs() < 1e-12);
        // With unit scale the value is about 1.0906.
        assert!((2.978 * 1.06 * 1000f64.powf(-1.0 / 6.5) - 1.0906).abs() < 1e-3);
        let sb = ds.bid_sd();
        assert!((plan.h_2g - 2.978 * 1.06 * sb * 1000f64.powf(-1.0 / 4.5)).abs() < 1e-12);
    }

    #[test]
    fn gpv_first_rule() {
        let ds = unit_scale_dataset(200);
        let sx = ds.covariate_sd()[0];
        let g = rule_of_thumb_bandwidths(&ds, BandwidthMethod::GpvFirst, 1)
            .unwrap()
            .into_gpv_first()
            .unwrap();
        assert!((g.h_g[0] - 1.06 * sx * 1000f64.powf(-1.0 / 9.0)).abs() < 1e-12);
        assert!((1.06 * 1000f64.powf(-1.0 / 9.0) - 0.4918).abs() < 1e-3);
        assert!((g.h_delta - 1000f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_covariate_rejected() {
        let auctions = (0..10)
            .map(|i| AuctionRecord::new(i.to_string(), vec![2.0], vec![1.0, 1.5 + i as f64]))
            .collect();
        let ds = AuctionDataset::new(auctions, 1).unwrap();
        let err = rule_of_thumb_bandwidths(&ds, BandwidthMethod::Lpe, 1).unwrap_err();
        assert_eq!(err.code(), "DEGENERATE_SCALE");
    }

    #[test]
    fn unsupported_dimension_and_empty() {
        let ds = AuctionDataset::new(vec![], 1).unwrap();
        let err = rule_of_thumb_bandwidths(&ds, BandwidthMethod::Lpe, 1).unwrap_err();
        assert_eq!(err.code(), "EMPTY_GROUP");
        let ds = unit_scale_dataset(10);
        let err = rule_of_thumb_bandwidths(&ds, BandwidthMethod::Lpe, 3).unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_DIMENSION");
    }

    #[test]
    fn rule_of_thumb_plan_is_undersmoothed() {
        let ds = unit_scale_dataset(200);
        let plan = rule_of_thumb_bandwidths(&ds, BandwidthMethod::Lpe, 1)
            .unwrap()
            .into_lpe()
            .unwrap();
        let r = validate_bandwidth_plan(&plan, 200, 3);
        assert!(r.passed, "{:?}", r.issues);
        assert!(!r.has_code("OVERSMOOTHED"));
    }

    #[test]
    fn optimal_rate_density_bandwidth_is_oversmoothed() {
        let mut plan = BandwidthPlan::uniform(0.5, 0.3, 0.3, Regime::AsymptoticNormality, 1).unwrap();
        plan.rates = Some(RateExponents {
            a_g: 1.0 / 6.5,
            a_1g: 1.0 / 7.0,
            a_2g: 1.0 / 7.0,
        });
        let r = validate_bandwidth_plan(&plan, 200, 3);
        assert!(!r.passed);
        assert!(r.with_code("OVERSMOOTHED").any(|i| i.message.starts_with("h_1g")));
    }

    #[test]
    fn consistency_regime_admits_optimal_rates() {
        let mut plan = BandwidthPlan::uniform(0.5, 0.3, 0.3, Regime::Consistency, 1).unwrap();
        plan.rates = Some(RateExponents {
            a_g: 1.0 / 9.0,
            a_1g: 1.0 / 7.0,
            a_2g: 1.0 / 7.0,
        });
        let r = validate_bandwidth_plan(&plan, 200, 3);
        assert!(r.passed, "{:?}", r.issues);
    }

    #[test]
    fn json_field_names() {
        let plan = BandwidthPlan::uniform(0.5, 0.3, 0.2, Regime::AsymptoticNormality, 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["h_G"], 0.5);
        assert_eq!(v["h_1g"], 0.3);
        assert_eq!(v["h_2g"], 0.2);
        assert_eq!(v["regime"], "asymptotic-normality");
        assert_eq!(v["d"], 1);
        let back: BandwidthPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
        let two = BandwidthPlan::new(vec![0.4, 0.5], vec![0.3, 0.2], 0.1, Regime::Consistency, 2).unwrap();
        let v = serde_json::to_value(&two).unwrap();
        assert_eq!(v["h_G"], serde_json::json!([0.4, 0.5]));
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(BandwidthPlan::uniform(0.0, 0.3, 0.3, Regime::Consistency, 1).is_err());
    }
}
