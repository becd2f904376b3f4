use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ifss_core::data::store::{read_corpus, write_corpus, CorpusManifest, MANIFEST_FILE as CORPUS_MANIFEST};
use ifss_core::data::{build_stream, generate_corpus, split_folds, AccessGuard, Scene, SessionStream, StreamOptions};
use ifss_core::eval::ablation::{ablation_suite, report_from_runs, AblationReport};
use ifss_core::eval::report::{metrics_file_name, metrics_jsonl, parse_runs_csv, runs_csv, series_csv, summary_csv, summary_table};
use ifss_core::eval::{run_incremental, EvalConfig, Method};
use ifss_core::features::FeatureCache;
use ifss_core::meta::{base_init, run_meta_training, MetaLogRecord, MetaResume};
use ifss_core::model::{Checkpoint, ParamSet, Sgd};
use ifss_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::exit::{DataError, UsageError};
use crate::manifest::{prepare_dir, Artifact, RunManifest};

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const META_CHECKPOINT: &str = "meta.ckpt";
pub const RESUME_CHECKPOINT: &str = "meta-resume.ckpt";
pub const BASE_LOG: &str = "base-log.jsonl";
pub const META_LOG: &str = "meta-log.jsonl";
pub const SESSIONS_LOG: &str = "sessions.jsonl";
pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "summary.txt";
pub const SERIES_FILE: &str = "lambda-series.csv";

/// Checkpoint metadata keys written by the CLI.
pub const KEY_TRAINING_HASH: &str = "ifss.training-config-hash";
pub const KEY_PARENT: &str = "ifss.parent-sha256";
pub const KEY_KIND: &str = "ifss.kind";
const KEY_EPOCHS_DONE: &str = "ifss.epochs-completed";
const KEY_LOG: &str = "ifss.log";
const VELOCITY_PREFIX: &str = "velocity.";

/// Hash of the settings a checkpoint depends on: seed, corpus, folds,
/// model, base and meta training.
pub fn training_hash(cfg: &ExperimentConfig) -> String {
    let v = serde_json::json!({
        "seed": cfg.seed,
        "corpus": cfg.corpus,
        "folds": cfg.folds,
        "model": cfg.model,
        "base": cfg.base,
        "meta": cfg.meta,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Reads the corpus at `dir`, recording it as an input and warning when it
/// was generated under different corpus settings.
pub fn load_corpus(dir: &Path, cfg: &ExperimentConfig, run: &mut RunManifest) -> Result<Vec<Scene>> {
    let (manifest, scenes) = read_corpus(dir)?;
    let input = Artifact::of(&dir.join(CORPUS_MANIFEST), dir.join(CORPUS_MANIFEST))?;
    let expected = cfg.catalog()?;
    if manifest.catalog != expected
        || manifest.seed != cfg.seed
        || (manifest.height, manifest.width) != (cfg.corpus.height, cfg.corpus.width)
        || manifest.scenes_per_class != cfg.corpus.scenes_per_class
    {
        run.warn(format!(
            "config drift: corpus at {} was generated with different corpus settings",
            dir.display()
        ));
    }
    run.inputs.push(input);
    Ok(scenes)
}

pub fn fold_classes(cfg: &ExperimentConfig) -> Result<(Vec<u32>, Vec<u32>)> {
    Ok(split_folds(&cfg.catalog()?, cfg.folds.count, cfg.folds.test_fold)?)
}

pub fn stream(cfg: &ExperimentConfig, eval: &EvalConfig, corpus: &[Scene]) -> Result<SessionStream> {
    let (base, novel) = fold_classes(cfg)?;
    Ok(build_stream(corpus, &base, &novel, StreamOptions::new(eval.mode, eval.shots), cfg.seed)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    if !path.is_file() {
        return Err(DataError(format!("checkpoint not found: {}", path.display())).into());
    }
    Ok(Checkpoint::load(path)?)
}

fn stamp(ck: &mut Checkpoint, cfg: &ExperimentConfig, kind: &str) {
    ck.metadata.insert(KEY_TRAINING_HASH.into(), training_hash(cfg));
    ck.metadata.insert(KEY_KIND.into(), kind.into());
}

pub fn gen_data(cfg: &ExperimentConfig, command: Vec<String>, out: &Path, overwrite: bool) -> Result<RunManifest> {
    let run = RunManifest::start(command, cfg);
    let catalog = cfg.catalog()?;
    let grid = (cfg.corpus.height, cfg.corpus.width);
    let scenes = generate_corpus(&catalog, cfg.corpus.scenes_per_class, grid, cfg.seed)?;
    prepare_dir(out, overwrite)?;
    let manifest = CorpusManifest::describe(&catalog, cfg.corpus.scenes_per_class, grid, cfg.seed, &scenes);
    write_corpus(out, &manifest, &scenes).with_context(|| format!("writing corpus to {}", out.display()))?;
    println!("wrote {} scenes of {} classes to {}", scenes.len(), catalog.len(), out.display());
    run.finish(out)
}

#[derive(Serialize)]
struct EpochLoss {
    epoch: usize,
    loss: f64,
}

pub fn train_base(
    cfg: &ExperimentConfig,
    command: Vec<String>,
    corpus_dir: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<RunManifest> {
    let mut run = RunManifest::start(command, cfg);
    let corpus = load_corpus(corpus_dir, cfg, &mut run)?;
    let stream = stream(cfg, &cfg.eval, &corpus)?;
    prepare_dir(out, overwrite)?;
    let params = ParamSet::init(&cfg.model, cfg.seed)?;
    let outcome = base_init(&corpus, &stream.sessions[0], params, &cfg.base, cfg.seed)?;
    write_jsonl(
        &out.join(BASE_LOG),
        outcome
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| EpochLoss { epoch, loss }),
    )?;
    let mut ck = Checkpoint::from_model(&outcome.params, Some(&outcome.classifier));
    stamp(&mut ck, cfg, "base");
    let sha = ck.save(&out.join(BASE_CHECKPOINT))?;
    println!(
        "base training: probe loss {:.4} -> {:.4}; checkpoint {sha}",
        outcome.initial_loss, outcome.final_loss
    );
    run.finish(out)
}

fn resume_checkpoint(params: &ParamSet, outer: &Sgd, done: usize, log: &[MetaLogRecord]) -> Checkpoint {
    let mut ck = Checkpoint::from_model(params, None);
    for (name, v) in params.names().iter().zip(outer.velocity()) {
        if let Some(v) = v {
            ck.arrays.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
        }
    }
    ck.metadata.insert(KEY_EPOCHS_DONE.into(), done.to_string());
    let log: Vec<String> = log.iter().map(|r| serde_json::to_string(r).expect("serializable")).collect();
    ck.metadata.insert(KEY_LOG.into(), log.join("\n"));
    ck
}

fn read_resume(ck: &Checkpoint) -> Result<MetaResume> {
    let bad = |m: &str| DataError(format!("resume checkpoint: {m}"));
    let params = ck.params()?;
    let velocity = params
        .names()
        .iter()
        .map(|n| ck.array(&format!("{VELOCITY_PREFIX}{n}")).cloned())
        .collect();
    let epochs_completed = ck
        .metadata
        .get(KEY_EPOCHS_DONE)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing epoch count"))?;
    let log = ck
        .metadata
        .get(KEY_LOG)
        .ok_or_else(|| bad("missing log"))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<MetaLogRecord>, _>>()
        .map_err(|e| bad(&e.to_string()))?;
    Ok(MetaResume {
        params,
        velocity,
        epochs_completed,
        log,
    })
}

pub struct MetaOptions<'a> {
    pub corpus: &'a Path,
    pub base: &'a Path,
    pub out: &'a Path,
    pub overwrite: bool,
    pub resume: bool,
    /// Stop after this many epochs, once the periodic checkpoint is written.
    pub halt_after: Option<usize>,
}

/// Returned when a run stops at `halt_after`.
pub const HALTED: &str = "halted";

pub fn train_meta(cfg: &ExperimentConfig, command: Vec<String>, opts: &MetaOptions<'_>) -> Result<Option<RunManifest>> {
    let mut run = RunManifest::start(command, cfg);
    let corpus = load_corpus(opts.corpus, cfg, &mut run)?;
    let stream = stream(cfg, &cfg.eval, &corpus)?;
    let (base_ck, base_sha) = load_checkpoint(opts.base)?;
    if base_ck.metadata.get(KEY_TRAINING_HASH) != Some(&training_hash(cfg)) {
        run.warn(format!("config drift: {} was trained under a different config", opts.base.display()));
    }
    run.inputs.push(Artifact::of(opts.base, opts.base.to_path_buf())?);
    run.parent = Some(base_sha.clone());

    let resume_path = opts.out.join(RESUME_CHECKPOINT);
    let resume = if opts.resume && resume_path.is_file() {
        let (ck, _) = Checkpoint::load(&resume_path)?;
        let r = read_resume(&ck)?;
        println!("resuming after epoch {}", r.epochs_completed);
        Some(r)
    } else {
        prepare_dir(opts.out, opts.overwrite || opts.resume)?;
        None
    };
    if opts.halt_after.is_some() && cfg.meta.checkpoint_every == 0 {
        bail!(UsageError("--halt-after needs meta.checkpoint_every > 0".into()));
    }

    let params = base_ck.params()?;
    let meta_cfg = cfg.meta_config();
    let mut cache = FeatureCache::new(&params);
    let mut halted = false;
    let mut hook = |done: usize, p: &ParamSet, o: &Sgd, log: &[MetaLogRecord]| -> ifss_core::Result<()> {
        resume_checkpoint(p, o, done, log).save(&resume_path)?;
        if opts.halt_after == Some(done) {
            halted = true;
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::Interrupted, HALTED)));
        }
        Ok(())
    };
    let result = run_meta_training(
        &corpus,
        &stream.sessions[0],
        params,
        &mut cache,
        &meta_cfg,
        resume,
        Some(&mut hook),
    );
    if halted {
        println!("stopped after epoch {}; rerun with --resume to continue", opts.halt_after.unwrap_or(0));
        return Ok(None);
    }
    let outcome = result?;
    write_jsonl(&opts.out.join(META_LOG), &outcome.log)?;
    let mut ck = Checkpoint::from_model(&outcome.params, Some(&outcome.classifier));
    stamp(&mut ck, cfg, "meta");
    ck.metadata.insert(KEY_PARENT.into(), base_sha);
    let sha = ck.save(&opts.out.join(META_CHECKPOINT))?;
    if resume_path.is_file() {
        fs::remove_file(&resume_path)?;
    }
    let last = outcome.log.iter().rev().find_map(|r| r.pseudo_hm);
    println!(
        "meta training: {} steps, final pseudo HM {}; checkpoint {sha}",
        outcome.log.len(),
        last.map_or("n/a".into(), |h| format!("{h:.2}"))
    );
    Ok(Some(run.finish(opts.out)?))
}

#[derive(Serialize)]
struct SessionHashes<'a> {
    session: usize,
    extractor: &'a str,
    head_projector: &'a str,
}

pub fn eval(
    cfg: &ExperimentConfig,
    command: Vec<String>,
    corpus_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<RunManifest> {
    let mut run = RunManifest::start(command, cfg);
    let corpus = load_corpus(corpus_dir, cfg, &mut run)?;
    let (ck, sha) = load_checkpoint(checkpoint)?;
    if ck.metadata.get(KEY_TRAINING_HASH) != Some(&training_hash(cfg)) {
        run.warn(format!("config drift: {} was trained under a different config", checkpoint.display()));
    }
    run.inputs.push(Artifact::of(checkpoint, checkpoint.to_path_buf())?);
    run.parent = Some(sha);
    let params = ck.params()?;
    let classifier = ck
        .classifier
        .clone()
        .ok_or_else(|| DataError(format!("{} holds no classifier", checkpoint.display())))?;
    let stream = stream(cfg, &cfg.eval, &corpus)?;
    prepare_dir(out, overwrite)?;

    let mut guard = AccessGuard::new();
    let mut cache = FeatureCache::new(&params);
    let outcome = run_incremental(&params, &classifier, &corpus, &stream, &cfg.eval, &mut guard, &mut cache, cfg.seed)?;
    if let Some(v) = guard.violations().first() {
        return Err(Error::ProtocolViolation {
            requested: v.requested,
            current: v.current,
        }
        .into());
    }
    let name = metrics_file_name(cfg.eval.method.tag(), stream.mode.tag(), stream.shots, cfg.seed);
    fs::write(out.join(&name), metrics_jsonl(&outcome.records))?;
    write_jsonl(
        &out.join(SESSIONS_LOG),
        outcome
            .extractor_hashes
            .iter()
            .zip(&outcome.adapted_hashes)
            .enumerate()
            .map(|(session, (e, a))| SessionHashes {
                session,
                extractor: e,
                head_projector: a,
            }),
    )?;
    let s = outcome.summary();
    println!(
        "{} {}: mIoU-B {:.2}  mIoU-N {:.2}  HM {:.2}",
        s.method, s.mode, s.miou_b, s.miou_n, s.hm
    );
    run.finish(out)
}

/// Writes the ablation tables; `ablate` and `report` share it so a report
/// regenerated from `runs.csv` matches the original byte for byte.
pub fn write_tables(dir: &Path, report: &AblationReport) -> Result<()> {
    fs::write(dir.join(SUMMARY_FILE), summary_csv(&report.summary))?;
    let mut table = summary_table(&report.summary);
    table.push('\n');
    table.push_str(&match report.best_lambda {
        Some(l) => format!("best lambda: {l}\n"),
        None => "best lambda: n/a\n".into(),
    });
    fs::write(dir.join(TABLE_FILE), table)?;
    fs::write(dir.join(SERIES_FILE), series_csv(&report.lambda_series))?;
    Ok(())
}

pub fn ablate(
    cfg: &ExperimentConfig,
    command: Vec<String>,
    corpus_dir: &Path,
    seeds: &[u64],
    out: &Path,
    overwrite: bool,
) -> Result<RunManifest> {
    if seeds.is_empty() {
        bail!(UsageError("ablation needs at least one seed".into()));
    }
    let mut run = RunManifest::start(command, cfg);
    let corpus = load_corpus(corpus_dir, cfg, &mut run)?;
    let (base, novel) = fold_classes(cfg)?;
    prepare_dir(out, overwrite)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.ablation.workers)
        .build()
        .context("building the worker pool")?;
    let report = pool.install(|| ablation_suite(&corpus, &base, &novel, seeds, &cfg.ablation_config()))?;
    fs::write(out.join(RUNS_FILE), runs_csv(&report.runs))?;
    write_tables(out, &report)?;
    print!("{}", fs::read_to_string(out.join(TABLE_FILE))?);
    run.finish(out)
}

pub fn report(cfg: &ExperimentConfig, command: Vec<String>, from: &Path, out: &Path, overwrite: bool) -> Result<RunManifest> {
    let mut run = RunManifest::start(command, cfg);
    let runs_path = from.join(RUNS_FILE);
    let text = fs::read_to_string(&runs_path).map_err(|e| DataError(format!("{}: {e}", runs_path.display())))?;
    run.inputs.push(Artifact::of(&runs_path, runs_path.clone())?);
    let report = report_from_runs(parse_runs_csv(&text)?);
    prepare_dir(out, overwrite)?;
    write_tables(out, &report)?;
    print!("{}", fs::read_to_string(out.join(TABLE_FILE))?);
    run.finish(out)
}

/// Files whose recorded hash no longer matches, or that went missing.
pub fn integrity(dir: &Path, manifest: &RunManifest) -> Vec<PathBuf> {
    manifest
        .artifacts
        .iter()
        .filter(|a| Artifact::of(&dir.join(&a.path), a.path.clone()).map_or(true, |now| now.sha256 != a.sha256))
        .map(|a| a.path.clone())
        .collect()
}

/// Artifacts of `original` whose hash differs in `rederived`.
pub fn compare(original: &RunManifest, rederived: &RunManifest) -> Vec<PathBuf> {
    original
        .artifacts
        .iter()
        .filter(|a| {
            rederived
                .artifacts
                .iter()
                .find(|b| b.path == a.path)
                .map_or(true, |b| b.sha256 != a.sha256)
        })
        .map(|a| a.path.clone())
        .collect()
}

/// Method tags accepted on the command line.
pub fn parse_method(s: &str) -> Result<Method> {
    s.parse().map_err(|_| {
        let tags: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
        UsageError(format!("unknown method {s:?}; expected one of {}", tags.join(", "))).into()
    })
}
