//! `modrobe`: generate synthetic bundles, pretrain, sweep training-modality
//! sets, and turn score matrices into performance / robustness reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;
mod metrics;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use modrobe::datagen::{generate, load_bundle, save_bundle, DatasetBundle, GenConfig};
use modrobe::model;
use modrobe::numerics::{Precision, Real};
use modrobe::trainer::{pretrain, TrainConfig};

pub const RUNS_DIR_ENV: &str = "MODROBE_RUNS_DIR";

/// A failure caused by the invocation rather than by the computation.
#[derive(Debug)]
pub struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<modrobe::Error>() {
        Some(
            modrobe::Error::Config(_)
            | modrobe::Error::Matrix { .. }
            | modrobe::Error::MissingModality(_)
            | modrobe::Error::EmptyModalitySet,
        ) => 2,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(name = "modrobe", version, about = "Training-modality sweeps and robustness metrics for multimodal models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset bundle.
    GenData(GenDataArgs),
    /// Pretrain a backbone on a bundle.
    Pretrain(PretrainArgs),
    /// Train every method on every training-modality set and score every evaluation set.
    Sweep(run::SweepArgs),
    /// Summarize a score-matrix CSV.
    Metrics(metrics::MetricsArgs),
    /// Write reports for every method of a finished sweep.
    Report(metrics::ReportArgs),
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// JSON config file; fields left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set splits.train=500` or `--set modalities.0.noise=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_override)]
    pub set: Vec<(String, Value)>,
}

impl ConfigArgs {
    pub fn load<C: serde::Serialize + serde::de::DeserializeOwned + Default>(&self) -> Result<C> {
        config::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing bundle.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Bundle directory written by `gen-data`.
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn open_bundle(dir: &Path) -> Result<(DatasetBundle, String)> {
    if !dir.join("bundle.json").is_file() {
        return Err(usage(format!("no bundle at {} (run `modrobe gen-data` first)", dir.display())));
    }
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

pub fn load_train_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let cfg: TrainConfig = args.load()?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg: GenConfig = a.cfg.load()?;
    cfg.validate()?;
    if a.out.join("bundle.json").exists() && !a.force {
        return Err(usage(format!("{} already holds a bundle; pass --force to overwrite", a.out.display())));
    }
    let bundle = generate(&cfg, a.seed)?;
    let hash = save_bundle(&bundle, &a.out)?;
    let p = a.out.join("bundle.sha256");
    std::fs::write(&p, format!("{hash}\n")).with_context(|| format!("writing {}", p.display()))?;
    eprintln!(
        "wrote {} (pretrain {}, train {}, eval {}, self-distill {})",
        a.out.display(),
        bundle.pretrain.len(),
        bundle.train.len(),
        bundle.eval.len(),
        bundle.self_distill.len()
    );
    println!("{hash}");
    Ok(())
}

fn pretrain_typed<T: Real>(bundle: &DatasetBundle, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let (ck, log) = pretrain::<T>(bundle, cfg)?;
    model::save(&ck, out)?;
    if let Some((first, last)) = log.ends(20) {
        eprintln!("pretrain loss {first:.4} -> {last:.4} over {} steps", log.losses.len());
    }
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let cfg = load_train_config(&a.cfg)?;
    let (bundle, _) = open_bundle(&a.bundle)?;
    if a.out.exists() && !a.force {
        return Err(usage(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    match cfg.precision {
        Precision::F32 => pretrain_typed::<f32>(&bundle, &cfg, &a.out),
        Precision::F64 => pretrain_typed::<f64>(&bundle, &cfg, &a.out),
    }?;
    println!("{}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain_cmd(a),
        Cmd::Sweep(a) => run::sweep(a),
        Cmd::Metrics(a) => metrics::metrics(a),
        Cmd::Report(a) => metrics::report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
