//! Base training and first-order meta-training over pseudo-incremental
//! sequences drawn from the base session.

pub mod base;

use serde::{Deserialize, Serialize};

use crate::data::corpus::Scene;
use crate::data::stream::{sample_pseudo_sequence, Session, SessionStream};
use crate::error::{Error, Result};
use crate::eval::metrics::{compute_miou, harmonic_mean, ConfusionAccumulator};
use crate::eval::predict::predict_labels;
use crate::features::{feature_labels, FeatureCache};
use crate::model::{expand_classifier, Group, OldOperand, ParamSet, PrototypeClassifier, Sgd};
use crate::objective::{loss_and_grads, Input, LossParts, Regularizer, Sample};
use crate::rng;
use crate::support::{build_classifier, prototypes_for};

pub use base::{base_init, BaseConfig, BaseOutcome};

/// Groups updated by inner and outer loops.
pub const ADAPTED: [Group; 2] = [Group::Head, Group::Projector];

/// Regularizer family used in the meta objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    #[default]
    Redistribution,
    Inter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    /// Inner gradient steps per task.
    pub inner_steps: usize,
    /// Regularizer weight; 0 trains with cross-entropy only.
    pub lambda: f64,
    /// Pseudo-novel sessions per sequence.
    pub tasks: usize,
    pub shots: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Outer-loop momentum.
    pub momentum: f64,
    pub regularizer: RegKind,
    pub operand: OldOperand,
    /// Cap on scenes per class when pooling pseudo-base prototypes.
    pub proto_scenes: usize,
    /// Held-out scenes per pseudo class.
    pub test_per_class: usize,
    /// Periodic checkpoint interval in epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Put the pseudo-base test scenes into the meta-test set along with the
    /// first task's, so the meta loss also measures forgetting.
    pub base_in_meta_test: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.01,
            inner_steps: 3,
            lambda: 0.3,
            tasks: 3,
            shots: 1,
            epochs: 60,
            seed: 0,
            momentum: 0.9,
            regularizer: RegKind::Redistribution,
            operand: OldOperand::Anchor,
            proto_scenes: 10,
            base_in_meta_test: true,
            test_per_class: 10,
            checkpoint_every: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("meta: {m}")));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if self.tasks == 0 {
            return bad("tasks must be at least 1");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Regularizer {
        match self.regularizer {
            RegKind::Redistribution => Regularizer::Redistribution {
                lambda: self.lambda,
                operand: self.operand,
            },
            RegKind::Inter => Regularizer::Inter { lambda: self.lambda },
        }
    }
}

/// State carried through one pseudo sequence.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub params: ParamSet,
    pub classifier: PrototypeClassifier,
    /// Accumulated meta-test scene ids.
    pub d_meta: Vec<usize>,
    pub task_index: usize,
}

/// One record per (epoch, task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRecord {
    pub epoch: usize,
    pub task: usize,
    /// Task loss before each inner step and after the last one.
    pub inner_losses: Vec<f64>,
    pub meta_loss: f64,
    pub meta_ce: f64,
    /// `λ · L` share of the meta loss.
    pub reg_share: f64,
    pub d_meta_size: usize,
    /// Pseudo-base / pseudo-novel scores on the meta-test scenes after the
    /// last task of the epoch, percentage scale.
    pub pseudo_miou_b: Option<f64>,
    pub pseudo_miou_n: Option<f64>,
    pub pseudo_hm: Option<f64>,
}

fn samples<'a>(
    corpus: &[Scene],
    cache: &'a FeatureCache,
    ids: &[usize],
    visible: &[u32],
) -> Vec<Sample<'a>> {
    ids.iter()
        .map(|&i| Sample {
            input: Input::Cached(cache.get(i)),
            labels: feature_labels(&corpus[i], visible),
        })
        .collect()
}

/// `L` plain gradient steps of size `alpha` on the task's cross-entropy,
/// applied to a copy of `params`. Returns the adapted copy and the task
/// loss before each step and after the last.
pub fn inner_adapt(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    task: &[Sample<'_>],
    alpha: f64,
    steps: usize,
) -> Result<(ParamSet, Vec<f64>)> {
    if task.is_empty() {
        return Err(Error::invalid("inner_adapt", "task has no scenes"));
    }
    let mut adapted = params.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (l, grads) = loss_and_grads(&adapted, classifier, task, Regularizer::None, &ADAPTED)?;
        losses.push(l.total);
        adapted.apply(-(alpha as f32), &grads);
    }
    let (l, _) = loss_and_grads(&adapted, classifier, task, Regularizer::None, &[])?;
    losses.push(l.total);
    Ok((adapted, losses))
}

/// First-order meta update: the meta objective's gradient at `adapted` is
/// applied to `params` by `outer`.
pub fn meta_step(
    params: &mut ParamSet,
    adapted: &ParamSet,
    classifier: &PrototypeClassifier,
    d_meta: &[Sample<'_>],
    reg: Regularizer,
    outer: &mut Sgd,
    epoch: usize,
) -> Result<LossParts> {
    if d_meta.is_empty() {
        return Err(Error::invalid("meta_step", "meta-test set is empty"));
    }
    let (l, grads) = loss_and_grads(adapted, classifier, d_meta, reg, &ADAPTED)?;
    if !l.total.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    outer.step(params, &grads);
    if !params.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    Ok(l)
}

/// Pseudo sequence of `epoch`.
pub fn epoch_sequence(
    corpus: &[Scene],
    base: &Session,
    cfg: &MetaConfig,
    epoch: usize,
) -> Result<SessionStream> {
    let seed = rng::derive_seed(cfg.seed, &format!("sequence/{epoch}"));
    sample_pseudo_sequence(corpus, base, cfg.tasks, cfg.shots, cfg.test_per_class, seed)
}

fn pseudo_scores(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    corpus: &[Scene],
    cache: &FeatureCache,
    seq: &SessionStream,
    d_meta: &[usize],
) -> Result<(f64, f64, f64)> {
    let visible = seq.seen_classes(seq.len() - 1);
    let mut acc = ConfusionAccumulator::new();
    for &i in d_meta {
        let pred = predict_labels(params, classifier, cache.get(i))?;
        acc.add(&pred, &feature_labels(&corpus[i], &visible));
    }
    let b = 100.0 * compute_miou(&acc, seq.base_classes())?;
    let n = 100.0 * compute_miou(&acc, &seq.novel_classes(seq.len() - 1))?;
    Ok((b, n, harmonic_mean(b, n)?))
}

/// Where to pick up an interrupted run.
#[derive(Clone, Debug)]
pub struct MetaResume {
    pub params: ParamSet,
    pub velocity: Vec<Option<crate::tensor::Array<f32>>>,
    pub epochs_completed: usize,
    pub log: Vec<MetaLogRecord>,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub params: ParamSet,
    /// Prototypes over the full base train split under the trained params.
    pub classifier: PrototypeClassifier,
    pub log: Vec<MetaLogRecord>,
}

/// Called after every `checkpoint_every` epochs with the epochs completed,
/// the parameters, the outer optimizer and the log so far.
pub type CheckpointHook<'h> = dyn FnMut(usize, &ParamSet, &Sgd, &[MetaLogRecord]) -> Result<()> + 'h;

/// Meta-training. Each epoch samples a pseudo sequence, pools a fresh
/// classifier over its pseudo base, then for each pseudo-novel task expands
/// the classifier, adapts a copy of the parameters, adds the task's test
/// scenes to the meta-test set and takes a meta step. With
/// `base_in_meta_test` the pseudo-base test scenes join the meta-test set
/// at the first task. The meta-test set is reset after the last task. The
/// extractor is never updated.
pub fn run_meta_training(
    corpus: &[Scene],
    base: &Session,
    params: ParamSet,
    cache: &mut FeatureCache,
    cfg: &MetaConfig,
    resume: Option<MetaResume>,
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    if base.classes.len() <= cfg.tasks {
        return Err(Error::InsufficientData(format!(
            "{} base classes cannot host {} pseudo sessions",
            base.classes.len(),
            cfg.tasks
        )));
    }
    let mut params = params;
    params.freeze_extractor();
    cache.ensure(&params, corpus, &base.train)?;
    let reg = cfg.regularizer();
    let mut outer = Sgd::new(cfg.beta as f32, cfg.momentum as f32);
    let (start, mut log) = match resume {
        Some(r) => {
            params = r.params;
            params.freeze_extractor();
            outer.set_velocity(r.velocity);
            (r.epochs_completed, r.log)
        }
        None => (0, Vec::new()),
    };
    let mut hook = hook;

    for epoch in start..cfg.epochs {
        let seq = epoch_sequence(corpus, base, cfg, epoch)?;
        let mut state = MetaState {
            classifier: build_classifier(&params, corpus, &seq.sessions[0], cfg.proto_scenes, Some(cache))?,
            params: params.clone(),
            d_meta: Vec::new(),
            task_index: 0,
        };
        for j in 1..seq.len() {
            state.task_index = j;
            let session = &seq.sessions[j];
            let visible = seq.seen_classes(j);
            let new = prototypes_for(
                &state.params,
                corpus,
                &session.train,
                &session.classes,
                &visible,
                usize::MAX,
                Some(cache),
            )?;
            state.classifier = expand_classifier(&state.classifier, &state.params, new)?;

            let task = samples(corpus, cache, &session.train, &visible);
            let (adapted, inner_losses) =
                inner_adapt(&state.params, &state.classifier, &task, cfg.alpha, cfg.inner_steps)?;

            if j == 1 && cfg.base_in_meta_test {
                state.d_meta.extend_from_slice(&seq.sessions[0].test);
            }
            state.d_meta.extend_from_slice(&session.test);
            let meta = samples(corpus, cache, &state.d_meta, &visible);
            let parts = meta_step(&mut state.params, &adapted, &state.classifier, &meta, reg, &mut outer, epoch)?;

            let last = j + 1 == seq.len();
            let scores = if last {
                Some(pseudo_scores(&state.params, &state.classifier, corpus, cache, &seq, &state.d_meta)?)
            } else {
                None
            };
            log.push(MetaLogRecord {
                epoch,
                task: j,
                inner_losses,
                meta_loss: parts.total,
                meta_ce: parts.ce,
                reg_share: reg.lambda() * parts.reg,
                d_meta_size: state.d_meta.len(),
                pseudo_miou_b: scores.map(|s| s.0),
                pseudo_miou_n: scores.map(|s| s.1),
                pseudo_hm: scores.map(|s| s.2),
            });
        }
        state.d_meta.clear();
        params = state.params;

        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(h) = hook.as_deref_mut() {
                h(done, &params, &outer, &log)?;
            }
        }
    }
    let classifier = build_classifier(&params, corpus, base, usize::MAX, Some(cache))?;
    Ok(MetaOutcome {
        params,
        classifier,
        log,
    })
}
