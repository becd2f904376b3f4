use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{argmax_lambda, lambda_series, summarize, sweep_label, SummaryRow};
use super::{run_incremental, EvalConfig, Method, MetricsRecord};
use crate::data::corpus::Scene;
use crate::data::guard::AccessGuard;
use crate::data::stream::{build_stream, StreamOptions};
use crate::error::{Error, Result};
use crate::features::FeatureCache;
use crate::meta::{base_init, run_meta_training, BaseConfig, MetaConfig, RegKind};
use crate::model::{ModelConfig, ParamSet, PrototypeClassifier};

/// Default λ sweep.
pub const SWEEP_LAMBDAS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub base: BaseConfig,
    /// Template for every meta-trained variant; `lambda`, `regularizer` and
    /// `seed` are set per cell.
    pub meta: MetaConfig,
    /// Template for every evaluation; `method`, `lambda` and
    /// `update_extractor` are set per cell.
    pub eval: EvalConfig,
    pub lambdas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            base: BaseConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
            lambdas: SWEEP_LAMBDAS.to_vec(),
        }
    }
}

/// One cell of the table.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub method: Method,
    /// Which trained model the cell evaluates.
    pub model: Variant,
    pub lambda: f64,
    pub update_extractor: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Base,
    MetaOnly,
    MetaInter,
    /// Meta-trained with the redistribution loss at this λ.
    Ours(f64),
}

/// Method × backbone-arm cells followed by the λ sweep.
pub fn cells(cfg: &AblationConfig) -> Vec<Cell> {
    let lambda = cfg.meta.lambda;
    let mut out = Vec::new();
    let rows = [
        ("baseline", Method::Finetune, Variant::Base),
        ("meta-only", Method::MetaOnly, Variant::MetaOnly),
        ("meta+inter", Method::MetaInter, Variant::MetaInter),
        ("ours", Method::Ours, Variant::Ours(lambda)),
    ];
    for unfrozen in [false, true] {
        for (name, method, model) in rows {
            out.push(Cell {
                label: if unfrozen { format!("{name}+unfrozen") } else { name.to_string() },
                method,
                model,
                lambda,
                update_extractor: unfrozen,
            });
        }
    }
    for &l in &cfg.lambdas {
        out.push(Cell {
            label: sweep_label(l),
            method: Method::Ours,
            model: Variant::Ours(l),
            lambda: l,
            update_extractor: false,
        });
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    /// Final-session record of every (cell, seed), cells in table order and
    /// seeds ascending within a cell.
    pub runs: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    /// `(λ, mean HM, std HM, seeds)`.
    pub lambda_series: Vec<(f64, f64, f64, usize)>,
    pub best_lambda: Option<f64>,
}

fn variants(cells: &[Cell]) -> Vec<Variant> {
    let mut v: Vec<Variant> = Vec::new();
    for c in cells {
        if !v.contains(&c.model) {
            v.push(c.model);
        }
    }
    v
}

/// Trains every variant for one seed and evaluates every cell. Returns the
/// final-session records in cell order.
pub fn run_seed(
    corpus: &[Scene],
    base_classes: &[u32],
    novel_classes: &[u32],
    cfg: &AblationConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let opts = StreamOptions::new(cfg.eval.mode, cfg.eval.shots);
    let stream = build_stream(corpus, base_classes, novel_classes, opts, seed)?;
    let base = base_init(
        corpus,
        &stream.sessions[0],
        ParamSet::init(&cfg.model, seed)?,
        &cfg.base,
        seed,
    )?;
    let mut cache = FeatureCache::new(&base.params);
    cache.ensure(&base.params, corpus, &stream.sessions[0].train)?;

    let cells = cells(cfg);
    let trained: Vec<(Variant, ParamSet, PrototypeClassifier)> = variants(&cells)
        .into_par_iter()
        .map(|v| {
            let meta_cfg = |lambda: f64, regularizer: RegKind| MetaConfig {
                lambda,
                regularizer,
                seed,
                ..cfg.meta.clone()
            };
            let mc = match v {
                Variant::Base => return Ok((v, base.params.clone(), base.classifier.clone())),
                Variant::MetaOnly => meta_cfg(0.0, RegKind::Redistribution),
                Variant::MetaInter => meta_cfg(cfg.meta.lambda, RegKind::Inter),
                Variant::Ours(l) => meta_cfg(l, RegKind::Redistribution),
            };
            let mut c = cache.clone();
            let out = run_meta_training(corpus, &stream.sessions[0], base.params.clone(), &mut c, &mc, None, None)?;
            Ok((v, out.params, out.classifier))
        })
        .collect::<Result<Vec<_>>>()?;

    cells
        .iter()
        .map(|cell| {
            let (_, params, classifier) = trained
                .iter()
                .find(|(v, _, _)| *v == cell.model)
                .expect("every variant trained");
            let ecfg = EvalConfig {
                method: cell.method,
                lambda: cell.lambda,
                update_extractor: cell.update_extractor,
                ..cfg.eval.clone()
            };
            let mut guard = AccessGuard::new();
            let out = run_incremental(params, classifier, corpus, &stream, &ecfg, &mut guard, &mut cache, seed)?;
            if !guard.is_clean() {
                return Err(Error::ProtocolViolation {
                    requested: guard.violations()[0].requested,
                    current: guard.violations()[0].current,
                });
            }
            let mut rec = out.summary().clone();
            rec.method = cell.label.clone();
            Ok(rec)
        })
        .collect()
}

/// Runs the full table over `seeds`, in parallel across seeds.
pub fn ablation_suite(
    corpus: &[Scene],
    base_classes: &[u32],
    novel_classes: &[u32],
    seeds: &[u64],
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let per_seed = sorted
        .par_iter()
        .map(|&s| run_seed(corpus, base_classes, novel_classes, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let n_cells = per_seed[0].len();
    let mut runs = Vec::with_capacity(n_cells * sorted.len());
    for c in 0..n_cells {
        for recs in &per_seed {
            runs.push(recs[c].clone());
        }
    }
    Ok(report_from_runs(runs))
}

/// Summary, λ series and best λ from run records.
pub fn report_from_runs(runs: Vec<MetricsRecord>) -> AblationReport {
    let summary = summarize(&runs);
    let series = lambda_series(&summary);
    AblationReport {
        best_lambda: argmax_lambda(&series),
        lambda_series: series,
        summary,
        runs,
    }
}
