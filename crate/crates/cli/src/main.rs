//! `auctionkit`: simulate first-price auctions, estimate value densities and
//! evaluate reserve-price policies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use auctionkit::gmm::WeightingMode;
use auctionkit::sim::SpecId;
use auctionkit::AuctionError;
use clap::{Args, Parser, Subcommand};

use config::{BandwidthKind, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or input paths (exit 2).
    Config(String),
    /// The computation itself failed (exit 3).
    Runtime(AuctionError),
}

impl From<AuctionError> for CliError {
    fn from(e: AuctionError) -> Self {
        match e {
            AuctionError::UnknownModel { .. } | AuctionError::ModelDimension { .. } | AuctionError::InvalidArgument(_) => {
                CliError::Config(format!("{}: {e}", e.code()))
            }
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Parser)]
#[command(name = "auctionkit", version, about = "Semiparametric estimation for first-price auctions")]
struct Cli {
    /// Worker threads; all cores when unset.
    #[arg(long, global = true, env = "AUCTIONKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from one of the simulation designs.
    Simulate(SimulateCmd),
    /// First stage plus GMM on a dataset.
    Estimate(EstimateCmd),
    /// Kernel (trim-and-invert) density estimate at one covariate point.
    Baseline(BaselineCmd),
    /// Optimal reserve and revenue under the true, parametric and kernel densities.
    Revenue(AnalysisCmd),
    /// Monte Carlo study.
    Mc(McCmd),
    /// True, parametric and kernel densities on one grid.
    PlotData(AnalysisCmd),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    spec: Option<SpecId>,
    /// Bidders per auction.
    #[arg(long = "I")]
    bidders: Option<usize>,
    /// Number of auctions.
    #[arg(long = "L")]
    auctions: Option<usize>,
}

#[derive(Args)]
struct InputArgs {
    /// Dataset CSV; simulated from --spec and --seed when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

fn parse_weighting(s: &str) -> Result<WeightingMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected identity or two-step".to_string())
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    bandwidths: Option<BandwidthKind>,
    #[arg(long = "h-g")]
    h_g: Option<f64>,
    #[arg(long = "h-1g")]
    h_1g: Option<f64>,
    #[arg(long = "h-2g")]
    h_2g: Option<f64>,
    /// Moment model from the registry.
    #[arg(long)]
    model: Option<String>,
    /// identity or two-step.
    #[arg(long, value_parser = parse_weighting)]
    omega: Option<WeightingMode>,
    /// Plain lognormal score instead of the truncation-aware one.
    #[arg(long)]
    no_truncation: bool,
    /// Classical sandwich variance without the first-stage term.
    #[arg(long)]
    no_correction: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    lambda_delta: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Covariate point, comma separated; sample median when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
}

#[derive(Args)]
struct SimulateCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    design: DesignArgs,
    /// Also write the latent values.
    #[arg(long)]
    with_truth: bool,
}

#[derive(Args)]
struct EstimateCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct BaselineCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    baseline: BaselineArgs,
}

#[derive(Args)]
struct AnalysisCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    baseline: BaselineArgs,
    /// Skip the kernel baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Use this parameter instead of estimating it, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
}

#[derive(Args)]
struct McCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    baseline: BaselineArgs,
    #[arg(long)]
    no_baseline: bool,
}

fn flag(set: bool, value: bool) -> Option<bool> {
    set.then_some(value)
}

impl CommonArgs {
    fn apply(&self, c: &mut RunConfig) {
        c.out = self.out.clone();
        c.seed = self.seed;
    }
}

impl DesignArgs {
    fn apply(&self, c: &mut RunConfig) {
        c.spec = self.spec;
        c.bidders = self.bidders;
        c.auctions = self.auctions;
    }
}

impl FitArgs {
    fn apply(&self, c: &mut RunConfig) {
        c.bandwidths = self.bandwidths;
        c.h_g = self.h_g;
        c.h_1g = self.h_1g;
        c.h_2g = self.h_2g;
        c.model = self.model.clone();
        c.omega = self.omega;
        c.truncation = flag(self.no_truncation, false);
        c.correction = flag(self.no_correction, false);
    }
}

impl BaselineArgs {
    fn apply(&self, c: &mut RunConfig) {
        c.lambda_delta = self.lambda_delta;
        c.grid_points = self.grid_points;
        c.x = self.x.clone();
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Estimate(_) => "estimate",
            Command::Baseline(_) => "baseline",
            Command::Revenue(_) => "revenue",
            Command::Mc(_) => "mc",
            Command::PlotData(_) => "plot-data",
        }
    }

    /// Flag layer of the configuration plus the config file path.
    fn flags(&self) -> (RunConfig, Option<PathBuf>) {
        let mut c = RunConfig::default();
        let common = match self {
            Command::Simulate(a) => {
                a.design.apply(&mut c);
                c.with_truth = flag(a.with_truth, true);
                &a.common
            }
            Command::Estimate(a) => {
                c.input = a.input.input.clone();
                a.design.apply(&mut c);
                a.fit.apply(&mut c);
                &a.common
            }
            Command::Baseline(a) => {
                c.input = a.input.input.clone();
                a.design.apply(&mut c);
                a.baseline.apply(&mut c);
                &a.common
            }
            Command::Revenue(a) | Command::PlotData(a) => {
                c.input = a.input.input.clone();
                a.design.apply(&mut c);
                a.fit.apply(&mut c);
                a.baseline.apply(&mut c);
                c.baseline = flag(a.no_baseline, false);
                c.theta = a.theta.clone();
                &a.common
            }
            Command::Mc(a) => {
                a.design.apply(&mut c);
                c.reps = a.reps;
                a.fit.apply(&mut c);
                a.baseline.apply(&mut c);
                c.baseline = flag(a.no_baseline, false);
                &a.common
            }
        };
        common.apply(&mut c);
        (c, common.config.clone())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let name = cli.command.name();
    let (flags, file) = cli.command.flags();
    let file_cfg = match file {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if file_cfg.command.as_deref().is_some_and(|c| c != name) {
        return Err(CliError::Config(format!(
            "config file is for '{}', not '{name}'",
            file_cfg.command.as_deref().unwrap_or_default()
        )));
    }
    let mut cfg = flags.over(file_cfg)?;
    cfg.command = Some(name.to_string());
    match cli.command {
        Command::Simulate(_) => commands::simulate(cfg),
        Command::Estimate(_) => commands::estimate(cfg),
        Command::Baseline(_) => commands::baseline(cfg),
        Command::Revenue(_) => commands::revenue(cfg),
        Command::Mc(_) => commands::mc(cfg),
        Command::PlotData(_) => commands::plot_data(cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(3)
        }
    }
}
