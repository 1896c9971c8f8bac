use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod config;
mod metrics;
mod run;
mod sweep;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "driftnet",
    version,
    about = "Asynchronous model-parallel training over a static dataflow IR"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config; writes CSV metrics, a JSONL event
    /// log, and final weights.
    Train(RunArgs),
    /// Compare every parameter gradient against central finite differences.
    Gradcheck(RunArgs),
    /// Train once per (max-active-keys, min-update-frequency) grid cell and
    /// collect a matrix CSV.
    Sweep(RunArgs),
    /// Analytic samples/s and bandwidth for a propagation workload.
    EstimateThroughput(EstimateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Cap on concurrently in-flight training instances.
    #[arg(long)]
    max_active_keys: Option<usize>,
    /// Gradient contributions per local parameter update.
    #[arg(long)]
    min_update_frequency: Option<usize>,
    /// Replicas per parameterized node.
    #[arg(long)]
    replicas: Option<usize>,
    /// Master seed for parameters and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeat the run this many times (seeds seed, seed+1, ...) and report
    /// the median time-to-target.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Output directory; defaults to the config's `out`, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// JSON throughput-model description.
    #[arg(long)]
    config: PathBuf,
    /// Optional directory for estimate.json; stdout always gets the numbers.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            threads: self.threads,
            max_active_keys: self.max_active_keys,
            min_update_frequency: self.min_update_frequency,
            replicas: self.replicas,
            seed: self.seed,
        });
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok((cfg, out))
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => {
            let (cfg, out) = args.load()?;
            run::cmd_train(&cfg, &out, args.repeat.max(1))
        }
        Cmd::Gradcheck(args) => {
            let explicit = args.out.is_some();
            let (cfg, out) = args.load()?;
            let dir = (explicit || cfg.out.is_some()).then_some(out);
            run::cmd_gradcheck(&cfg, dir.as_deref())
        }
        Cmd::Sweep(args) => {
            let (cfg, out) = args.load()?;
            sweep::cmd_sweep(&cfg, &out)
        }
        Cmd::EstimateThroughput(args) => {
            let text = std::fs::read_to_string(&args.config)?;
            let model: driftnet::estimate::ThroughputModel = serde_json::from_str(&text)?;
            let e = driftnet::estimate::estimate(&model)?;
            println!("{}", serde_json::to_string_pretty(&e)?);
            if let Some(dir) = args.out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("estimate.json"),
                    serde_json::to_string_pretty(&e)?,
                )?;
            }
            Ok(())
        }
    }
}
