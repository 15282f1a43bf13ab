use std::fs;
use std::path::{Path, PathBuf};

use auctionkit::gmm::WeightingMode;
use auctionkit::sim::SpecId;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthKind {
    RuleOfThumb,
    Explicit,
}

/// Every setting a command can take. Flags and the JSON config file both
/// produce one of these; absent fields fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SpecId>,
    #[serde(rename = "I", default, skip_serializing_if = "Option::is_none")]
    pub bidders: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub auctions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_truth: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidths: Option<BandwidthKind>,
    #[serde(rename = "h_G", default, skip_serializing_if = "Option::is_none")]
    pub h_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_1g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_2g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<WeightingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Evaluation point; the sample median of the covariates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    /// Skip estimation and use this parameter for the parametric density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

fn to_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// `self` (flags) wins over `file`.
    pub fn over(self, file: RunConfig) -> Result<Self, CliError> {
        let mut merged = to_map(&file);
        merged.extend(to_map(&self));
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn with_defaults(mut self, defaults: RunConfig) -> Self {
        let mut merged = to_map(&defaults);
        merged.extend(to_map(&self));
        if let Ok(c) = serde_json::from_value(Value::Object(merged)) {
            self = c;
        }
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("auctionkit-out"))
    }

    pub fn bandwidth_kind(&self) -> Result<BandwidthKind, CliError> {
        let any_h = self.h_g.is_some() || self.h_1g.is_some() || self.h_2g.is_some();
        match (self.bandwidths, any_h) {
            (Some(BandwidthKind::RuleOfThumb), true) => Err(CliError::Config(
                "explicit bandwidths given with --bandwidths rule-of-thumb".into(),
            )),
            (Some(k), _) => Ok(k),
            (None, true) => Ok(BandwidthKind::Explicit),
            (None, false) => Ok(BandwidthKind::RuleOfThumb),
        }
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("{} needs --seed", self.command.as_deref().unwrap_or("this command"))))
    }

    /// Echo of the effective configuration written next to every output.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join("config.resolved.json"), text).map_err(|e| CliError::Runtime(e.into()))
    }
}
