use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Scene;
use crate::data::stream::Session;
use crate::error::{Error, Result};
use crate::features::feature_labels;
use crate::graph::{Graph, Var};
use crate::model::net::{backbone, head, pixel_rows, project_rows};
use crate::model::proto::score_projected;
use crate::model::{ce_loss, Adam, ParamSet, PrototypeClassifier, BACKGROUND};
use crate::rng;
use crate::support::build_classifier;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    /// Passes over the base train split.
    pub epochs: usize,
    /// Scenes per gradient step.
    pub batch: usize,
    /// Adam step size.
    pub lr: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 9,
            lr: 0.005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseOutcome {
    /// Trained parameters with the extractor frozen.
    pub params: ParamSet,
    /// Prototypes over the whole base train split.
    pub classifier: PrototypeClassifier,
    /// Loss on a fixed probe batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Batch loss under a learnable cosine classifier `weights: [1 + C, d]`
/// (background first). Returns the loss, the parameter nodes and the
/// classifier node.
fn batch_loss(
    g: &mut Graph<f32>,
    params: &ParamSet,
    weights: &Array<f32>,
    corpus: &[Scene],
    classes: &[u32],
    batch: &[usize],
) -> Result<(Var, Vec<Var>, Var)> {
    let p = params.bind(g);
    let w = g.input(weights.clone());
    let projected = project_rows(g, &p, w)?;
    let mut ids = vec![BACKGROUND];
    ids.extend_from_slice(classes);
    let mut acc: Option<Var> = None;
    for &id in batch {
        let x = g.input(corpus[id].image_chw());
        let f = backbone(g, &p, x)?;
        let e = head(g, &p, f)?;
        let rows = pixel_rows(g, e)?;
        let s = score_projected(g, rows, projected, params.config().tau)?;
        let l = ce_loss(g, s, &feature_labels(&corpus[id], classes), &ids)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let loss = g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
    Ok((loss, p.vars().to_vec(), w))
}

/// Supervised training of the whole network on the base session with a
/// learnable cosine classifier, which is discarded afterwards; the returned
/// classifier holds MAP prototypes over the base train split. The extractor
/// is frozen on return.
pub fn base_init(
    corpus: &[Scene],
    base: &Session,
    params: ParamSet,
    cfg: &BaseConfig,
    seed: u64,
) -> Result<BaseOutcome> {
    if base.classes.is_empty() || base.train.is_empty() {
        return Err(Error::InsufficientData("base session is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("base: batch must be at least 1".into()));
    }
    let classes = base.classes.clone();
    let mut params = params;
    params.unfreeze_extractor();

    let d = params.config().embed_dim;
    let mut init_rng = rng::stream(seed, "init/classifier");
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Array::new(
        [classes.len() + 1, d],
        (0..(classes.len() + 1) * d)
            .map(|_| (scale * rng::normal(&mut init_rng)) as f32)
            .collect(),
    )?;

    // One scene per class, the first of each in split order.
    let probe: Vec<usize> = classes
        .iter()
        .filter_map(|&c| base.train.iter().copied().find(|&i| corpus[i].primary == c))
        .collect();
    let probe_loss = |params: &ParamSet, weights: &Array<f32>| -> Result<f64> {
        let mut g = Graph::new();
        let (l, _, _) = batch_loss(&mut g, params, weights, corpus, &classes, &probe)?;
        Ok(g.value(l).item() as f64)
    };
    let initial_loss = probe_loss(&params, &weights)?;

    let mut opt = Adam::new(cfg.lr as f32);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = base.train.clone();
        order.shuffle(&mut rng::item_stream(seed, "init", epoch as u64 + 1));
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let (l, vars, w) = batch_loss(&mut g, &params, &weights, corpus, &classes, batch)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += value;
            steps += 1;
            let grads = g.backward(l)?;
            let mut all: Vec<_> = vars.iter().map(|&v| Some(grads.get(v))).collect();
            all.push(Some(grads.get(w)));
            let mut dirs = opt.directions(&all);
            let wd = dirs.pop().flatten().expect("classifier direction");
            params.apply(-opt.lr, &dirs);
            for (x, &dx) in weights.data_mut().iter_mut().zip(wd.data()) {
                *x -= opt.lr * dx;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(total / steps.max(1) as f64);
    }
    let final_loss = probe_loss(&params, &weights)?;
    params.freeze_extractor();
    let classifier = build_classifier(&params, corpus, base, usize::MAX, None)?;
    Ok(BaseOutcome {
        params,
        classifier,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}
