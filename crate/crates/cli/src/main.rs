mod commands;
mod config;
mod exit;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ifss_core::data::StreamMode;

use crate::commands::MetaOptions;
use crate::config::{resolve_output, ExperimentConfig};
use crate::exit::{DataError, UsageError};
use crate::manifest::RunManifest;

/// Incremental few-shot segmentation experiments on synthetic scenes.
#[derive(Parser)]
#[command(name = "ifss", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene corpus.
    GenData(Common),
    /// Train a model.
    #[command(subcommand)]
    Train(Train),
    /// Evaluate a checkpoint on the incremental stream.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of ours, finetune, wi, meta-only, meta+inter.
        #[arg(long)]
        method: Option<String>,
        /// multi-step or single-step.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Run the ablation table and the lambda sweep over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated seeds; overrides `ablation.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads; overrides `ablation.workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild the summary tables from an ablation's runs.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Ablation output directory.
        #[arg(long)]
        from: PathBuf,
    },
    /// Check a run directory against its manifest and re-derive it.
    Verify {
        dir: PathBuf,
        /// Only check file hashes.
        #[arg(long)]
        no_rerun: bool,
    },
    /// Print the effective config as TOML.
    ShowConfig(Common),
}

#[derive(Subcommand)]
enum Train {
    /// Supervised training on the base classes.
    Base {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Meta-training from a base checkpoint.
    Meta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Continue from the periodic checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    let dir = cfg.run_dir();
    Ok((cfg, dir))
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = load(&c)?;
            commands::gen_data(&cfg, argv, &out, c.overwrite)?;
        }
        Command::Train(Train::Base { common, corpus }) => {
            let (cfg, out) = load(&common)?;
            commands::train_base(&cfg, argv, &corpus, &out, common.overwrite)?;
        }
        Command::Train(Train::Meta {
            common,
            corpus,
            base,
            resume,
            halt_after,
        }) => {
            let (cfg, out) = load(&common)?;
            let opts = MetaOptions {
                corpus: &corpus,
                base: &base,
                out: &out,
                overwrite: common.overwrite,
                resume,
                halt_after,
            };
            commands::train_meta(&cfg, argv, &opts)?;
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            method,
            mode,
            shots,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(m) = method {
                cfg.eval.method = commands::parse_method(&m)?;
            }
            if let Some(m) = mode {
                cfg.eval.mode = parse_mode(&m)?;
            }
            if let Some(k) = shots {
                cfg.eval.shots = k;
            }
            commands::eval(&cfg, argv, &corpus, &checkpoint, &out, common.overwrite)?;
        }
        Command::Ablate {
            common,
            corpus,
            seeds,
            workers,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            if let Some(w) = workers {
                cfg.ablation.workers = w;
            }
            let seeds = cfg.ablation.seeds.clone();
            commands::ablate(&cfg, argv, &corpus, &seeds, &out, common.overwrite)?;
        }
        Command::Report { common, from } => {
            let (cfg, out) = load(&common)?;
            commands::report(&cfg, argv, &from, &out, common.overwrite)?;
        }
        Command::Verify { dir, no_rerun } => verify(&resolve_output(&dir), !no_rerun)?,
        Command::ShowConfig(c) => print!("{}", load(&c)?.0.to_toml()),
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<StreamMode> {
    [StreamMode::MultiStep, StreamMode::SingleStep]
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| UsageError(format!("unknown mode {s:?}; expected multi-step or single-step")).into())
}

/// Checks hashes, then reruns the recorded command with the recorded config
/// in a scratch directory and compares every artifact.
fn verify(dir: &Path, rerun: bool) -> Result<()> {
    let recorded = RunManifest::load(dir)?;
    let broken = commands::integrity(dir, &recorded);
    if !broken.is_empty() {
        let list: Vec<String> = broken.iter().map(|p| p.display().to_string()).collect();
        return Err(DataError(format!("modified or missing: {}", list.join(", "))).into());
    }
    println!("{} artifacts match their recorded hashes", recorded.artifacts.len());
    if !rerun {
        return Ok(());
    }
    let scratch = tempfile::tempdir().context("creating scratch directory")?;
    let cfg_path = scratch.path().join("config.toml");
    let cfg: ExperimentConfig =
        serde_json::from_value(recorded.config.clone()).map_err(|e| DataError(format!("recorded config: {e}")))?;
    std::fs::write(&cfg_path, cfg.to_toml())?;
    let out = scratch.path().join("out");
    let argv = rederive_args(&recorded.command, &cfg_path, &out);
    let cli = Cli::try_parse_from(std::iter::once("ifss".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| DataError(format!("recorded command no longer parses: {e}")))?;
    run(cli, argv)?;
    let fresh = RunManifest::load(&out)?;
    let differing = commands::compare(&recorded, &fresh);
    if differing.is_empty() {
        println!("re-derivation reproduced every artifact byte for byte");
        Ok(())
    } else {
        let list: Vec<String> = differing.iter().map(|p| p.display().to_string()).collect();
        Err(DataError(format!("re-derivation differs in: {}", list.join(", "))).into())
    }
}

/// The recorded arguments with config and output pointed at the scratch
/// directory. Seeds are already part of the recorded config.
fn rederive_args(command: &[String], cfg: &Path, out: &Path) -> Vec<String> {
    let mut args = Vec::new();
    let mut it = command.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--config" | "-c" | "--out" | "-o" | "--seed" | "--halt-after" => {
                it.next();
            }
            "--overwrite" | "--resume" => {}
            s if s.starts_with("--config=") || s.starts_with("--out=") || s.starts_with("--seed=") => {}
            _ => args.push(a.clone()),
        }
    }
    args.extend(["--config".into(), cfg.display().to_string()]);
    args.extend(["--out".into(), out.display().to_string()]);
    args
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
