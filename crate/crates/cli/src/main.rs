//! `pcdetect`: compare point clouds, generate attacks, calibrate thresholds
//! and run retrieval benchmarks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcdetect::config::RunConfig;

#[derive(Parser)]
#[command(name = "pcdetect", version, about = "Copy detection for 3D point clouds")]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv per-iteration trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare a suspect against a reference; exit 0 = Copy, 1 = NotCopy.
    Compare(commands::CompareArgs),
    /// Write attacked copies of models plus a manifest.
    Attack(commands::AttackArgs),
    /// Sweep thresholds over labeled compare reports.
    Calibrate(commands::CalibrateArgs),
    /// Rank targets for every query and report Top-K rates.
    Retrieve(commands::RetrieveArgs),
    /// Attacked corpus against its sources: distances, Top-K and thresholds.
    Bench(commands::BenchArgs),
}

/// Run settings shared by every subcommand. Precedence: defaults, then
/// `--config`, then `PCDETECT_*` variables, then these flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set rpca_tol=1e-6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// Comma-separated measures (lr, kurt, corr).
    #[arg(long)]
    measures: Option<String>,
    /// none, hem or random.
    #[arg(long)]
    downsample: Option<String>,
    /// Block size for segmented LR.
    #[arg(long)]
    segment_t: Option<String>,
    #[arg(long)]
    t_corr: Option<String>,
    #[arg(long)]
    t_lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        config.apply_env(std::env::vars())?;
        let flags = [
            ("omega", &self.omega),
            ("max_iters", &self.max_iters),
            ("tol", &self.tol),
            ("measures", &self.measures),
            ("downsample", &self.downsample),
            ("segment_t", &self.segment_t),
            ("t_corr", &self.t_corr),
            ("t_lr", &self.t_lr),
            ("seed", &self.seed),
            ("workers", &self.workers),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            config.set(k.trim(), v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Compare(a) => commands::compare(a),
        Command::Attack(a) => commands::attack(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
