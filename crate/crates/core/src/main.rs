use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsml::harness::{self, ExperimentConfig, HarnessError, Stage};

/// Few-shot metric learning experiments.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate or import the dataset splits.
    Gen,
    /// Pre-train the embedding on meta-train data.
    Pretrain,
    /// Meta-train every configured adapter.
    MetaTrain,
    /// Meta-test every adapter and write the reports.
    Eval,
    /// All stages in order.
    RunAll,
    /// Full runs at several domain-gap levels plus a growth-rate trend.
    GapSweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        gaps: Vec<f64>,
    },
}

fn config_error(msg: &str) -> HarnessError {
    HarnessError::new(Stage::Config, anyhow::anyhow!("{msg}"))
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let path = cli.config.ok_or_else(|| config_error("--config is required"))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| config_error("no run directory: pass --out or set `output`"))?;
    match cli.verb {
        Verb::Gen => harness::gen(&cfg, &out).map(drop),
        Verb::Pretrain => harness::pretrain(&cfg, &out).map(drop),
        Verb::MetaTrain => harness::meta_train(&cfg, &out).map(drop),
        Verb::Eval => harness::eval(&cfg, &out).map(|t| print!("{}", t.to_text())),
        Verb::RunAll => harness::run(&cfg, &out).map(|t| print!("{}", t.to_text())),
        Verb::GapSweep { gaps } => harness::compare_gap_levels(&cfg, &gaps, &out).map(|r| print!("{}", r.to_text())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
