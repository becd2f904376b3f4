//! Online incremental evaluation, metrics, baselines and the ablation suite.

pub mod ablation;
pub mod metrics;
pub mod predict;
pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{Scene, IGNORE_LABEL};
use crate::data::guard::{guarded_fetch, AccessGuard};
use crate::data::stream::{SessionStream, Split, StreamMode};
use crate::error::{Error, Result};
use crate::features::{feature_labels, FeatureCache};
use crate::meta::ADAPTED;
use crate::model::{backbone_features, expand_classifier, Group, OldOperand, ParamSet, PrototypeClassifier, Sgd};
use crate::objective::{loss_and_grads, Input, Regularizer, Sample};
use crate::support::prototypes_for;

pub use metrics::{compute_miou, harmonic_mean, ConfusionAccumulator};
use predict::{predict_labels, upsample_labels};

/// How incremental sessions adapt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Cross-entropy plus the redistribution loss.
    #[serde(rename = "ours")]
    Ours,
    /// Cross-entropy on the new classes' pixels only, from the base model.
    #[serde(rename = "finetune")]
    Finetune,
    /// Imprint prototypes, no parameter updates.
    #[serde(rename = "wi")]
    Wi,
    /// Cross-entropy only, from a meta-trained model.
    #[serde(rename = "meta-only")]
    MetaOnly,
    /// Cross-entropy plus the separation-only loss.
    #[serde(rename = "meta+inter")]
    MetaInter,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ours,
        Method::Finetune,
        Method::Wi,
        Method::MetaOnly,
        Method::MetaInter,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Finetune => "finetune",
            Method::Wi => "wi",
            Method::MetaOnly => "meta-only",
            Method::MetaInter => "meta+inter",
        }
    }

    /// Whether the method expects meta-trained parameters.
    pub fn meta_trained(self) -> bool {
        matches!(self, Method::Ours | Method::MetaOnly | Method::MetaInter)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: StreamMode,
    pub shots: usize,
    /// Gradient steps per incremental session.
    pub steps: usize,
    pub lr: f64,
    pub method: Method,
    /// Weight of the prototype regularizer for `ours` and `meta+inter`.
    pub lambda: f64,
    pub operand: OldOperand,
    /// Keep training the extractor during incremental sessions.
    pub update_extractor: bool,
    /// Scale imprinted prototypes to unit length.
    pub imprint_normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: StreamMode::MultiStep,
            shots: 1,
            steps: 20,
            lr: 0.05,
            method: Method::Ours,
            lambda: 0.3,
            operand: OldOperand::Anchor,
            update_extractor: false,
            imprint_normalize: false,
        }
    }
}

impl EvalConfig {
    pub fn regularizer(&self) -> Regularizer {
        match self.method {
            Method::Ours => Regularizer::Redistribution {
                lambda: self.lambda,
                operand: self.operand,
            },
            Method::MetaInter => Regularizer::Inter { lambda: self.lambda },
            _ => Regularizer::None,
        }
    }
}

/// One evaluation result. Serializes to exactly the fields of a metrics
/// file line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub mode: String,
    pub shots: usize,
    pub seed: u64,
    pub session: usize,
    pub miou_b: f64,
    pub miou_n: f64,
    pub hm: f64,
    /// IoU per evaluated class, percentage scale.
    #[serde(skip)]
    pub per_class: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Records for sessions `0..T`; session 0 is before any novel class.
    pub records: Vec<MetricsRecord>,
    /// Extractor hash after each session.
    pub extractor_hashes: Vec<String>,
    /// Head and projector hash after each session.
    pub adapted_hashes: Vec<String>,
    pub params: ParamSet,
    pub classifier: PrototypeClassifier,
}

impl EvalOutcome {
    /// Record of the final session.
    pub fn summary(&self) -> &MetricsRecord {
        self.records.last().expect("at least the base session")
    }
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Keeps the labels of `classes` and ignores every other pixel.
fn novel_only(mut labels: Vec<u8>, classes: &[u32]) -> Vec<u8> {
    for l in labels.iter_mut() {
        if !classes.contains(&(*l as u32)) {
            *l = IGNORE_LABEL;
        }
    }
    labels
}

/// Runs the stream session by session: imprint the new prototypes, adapt,
/// then score every test scene seen so far. All scene access goes through
/// `guard`. `cache` holds extractor outputs of the incoming parameters and
/// is used while the extractor is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn run_incremental(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    corpus: &[Scene],
    stream: &SessionStream,
    cfg: &EvalConfig,
    guard: &mut AccessGuard,
    cache: &mut FeatureCache,
    seed: u64,
) -> Result<EvalOutcome> {
    let mut params = params.clone();
    if cfg.update_extractor {
        params.unfreeze_extractor();
    } else {
        params.freeze_extractor();
    }
    let mut classifier = classifier.clone();
    let mut trainable = ADAPTED.to_vec();
    if cfg.update_extractor {
        trainable.push(Group::Extractor);
    }
    let reg = cfg.regularizer();
    let mut extractor_touched = false;
    let mut out = EvalOutcome {
        records: Vec::new(),
        extractor_hashes: Vec::new(),
        adapted_hashes: Vec::new(),
        params: params.clone(),
        classifier: classifier.clone(),
    };

    for t in 0..stream.len() {
        guard.advance_to(t);
        let visible = stream.seen_classes(t);
        if t > 0 {
            let train = guarded_fetch(guard, stream, t, Split::Train)?.to_vec();
            let cached = !extractor_touched;
            if cached {
                cache.ensure(&params, corpus, &train)?;
            }
            let cache_ref = cached.then_some(&*cache);
            let mut new = prototypes_for(
                &params,
                corpus,
                &train,
                &stream.sessions[t].classes,
                &visible,
                usize::MAX,
                cache_ref,
            )?;
            if cfg.imprint_normalize {
                new = new.into_iter().map(|(c, v)| (c, unit(v))).collect();
            }
            classifier = expand_classifier(&classifier, &params, new)?;

            if cfg.method != Method::Wi && cfg.steps > 0 {
                let samples: Vec<Sample<'_>> = train
                    .iter()
                    .map(|&i| Sample {
                        input: if cfg.update_extractor {
                            Input::Image(corpus[i].image_chw())
                        } else {
                            Input::Cached(cache.get(i))
                        },
                        labels: if cfg.method == Method::Finetune {
                            novel_only(feature_labels(&corpus[i], &visible), &stream.sessions[t].classes)
                        } else {
                            feature_labels(&corpus[i], &visible)
                        },
                    })
                    .collect();
                let mut opt = Sgd::new(cfg.lr as f32, 0.0);
                for _ in 0..cfg.steps {
                    let (l, grads) = loss_and_grads(&params, &classifier, &samples, reg, &trainable)?;
                    if !l.total.is_finite() {
                        return Err(Error::Diverged { epoch: t });
                    }
                    opt.step(&mut params, &grads);
                }
                if !params.is_finite() {
                    return Err(Error::Diverged { epoch: t });
                }
                extractor_touched |= cfg.update_extractor;
            }
        }

        let mut acc = ConfusionAccumulator::new();
        for i in 0..=t {
            let ids = guarded_fetch(guard, stream, i, Split::Test)?.to_vec();
            if !extractor_touched {
                cache.ensure(&params, corpus, &ids)?;
            }
            let preds = ids
                .par_iter()
                .map(|&id| {
                    let feats;
                    let f = if extractor_touched {
                        feats = backbone_features(&params, &corpus[id].image_chw())?;
                        &feats
                    } else {
                        cache.get(id)
                    };
                    let p = predict_labels(&params, &classifier, f)?;
                    Ok(upsample_labels(&p, f.shape()[1], f.shape()[2]))
                })
                .collect::<Result<Vec<_>>>()?;
            for (id, p) in ids.iter().zip(preds) {
                acc.add(&p, &corpus[*id].visible_mask(&visible));
            }
        }
        let base = stream.base_classes();
        let miou_b = 100.0 * compute_miou(&acc, base)?;
        let miou_n = if t == 0 {
            0.0
        } else {
            100.0 * compute_miou(&acc, &stream.novel_classes(t))?
        };
        out.records.push(MetricsRecord {
            method: cfg.method.tag().to_string(),
            mode: stream.mode.tag().to_string(),
            shots: stream.shots,
            seed,
            session: t,
            miou_b,
            miou_n,
            hm: harmonic_mean(miou_b, miou_n)?,
            per_class: acc
                .per_class(&visible)
                .into_iter()
                .map(|(c, v)| (c, 100.0 * v))
                .collect(),
        });
        out.extractor_hashes.push(params.hash_groups(&[Group::Extractor]));
        out.adapted_hashes.push(params.hash_groups(&ADAPTED));
    }
    out.params = params;
    out.classifier = classifier;
    Ok(out)
}

/// Fine-tuning baseline: cross-entropy on the new classes' pixels only,
/// everything else ignored, optionally with the extractor still training.
#[allow(clippy::too_many_arguments)]
pub fn baseline_finetune(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    corpus: &[Scene],
    stream: &SessionStream,
    cfg: &EvalConfig,
    guard: &mut AccessGuard,
    cache: &mut FeatureCache,
    seed: u64,
) -> Result<EvalOutcome> {
    let cfg = EvalConfig {
        method: Method::Finetune,
        ..cfg.clone()
    };
    run_incremental(params, classifier, corpus, stream, &cfg, guard, cache, seed)
}

/// Weight-imprinting baseline: prototypes are appended, nothing is trained.
#[allow(clippy::too_many_arguments)]
pub fn baseline_wi(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    corpus: &[Scene],
    stream: &SessionStream,
    cfg: &EvalConfig,
    guard: &mut AccessGuard,
    cache: &mut FeatureCache,
    seed: u64,
) -> Result<EvalOutcome> {
    let cfg = EvalConfig {
        method: Method::Wi,
        update_extractor: false,
        ..cfg.clone()
    };
    run_incremental(params, classifier, corpus, stream, &cfg, guard, cache, seed)
}
