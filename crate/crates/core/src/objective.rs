//! The session objective: mean pixel cross-entropy over a set of scenes plus
//! an optional prototype regularizer, with gradients for chosen groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::loss::select_rows;
use crate::model::net::{backbone, head, pixel_rows, project_rows};
use crate::model::proto::score_projected;
use crate::model::{ce_loss, inter_loss, redistribution_loss, Bound, Group, OldOperand, ParamSet, PrototypeClassifier};
use crate::tensor::{Array, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Regularizer {
    None,
    /// `λ · L_r`.
    Redistribution { lambda: f64, operand: OldOperand },
    /// `λ · L_inter`.
    Inter { lambda: f64 },
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::Redistribution { lambda, .. } | Regularizer::Inter { lambda } => lambda,
        }
    }
}

/// Where a scene's extractor output comes from.
#[derive(Clone, Debug)]
pub enum Input<'a> {
    /// Precomputed extractor output `[C, h, w]`.
    Cached(&'a Array<f32>),
    /// Raw `[3, H, W]` image, run through the extractor in the graph.
    Image(Array<f32>),
}

#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub input: Input<'a>,
    /// Class id per feature pixel.
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    /// Unweighted regularizer value; 0 when inactive.
    pub reg: f64,
    pub total: f64,
}

/// Nodes of a built objective.
pub struct Built {
    pub total: Var,
    pub ce: Var,
    pub reg: Option<Var>,
}

/// Builds the objective in `g`. Prototypes enter as constants.
pub fn build<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    classifier: &PrototypeClassifier,
    samples: &[Sample<'_>],
    reg: Regularizer,
    tau: f64,
) -> Result<Built> {
    if samples.is_empty() {
        return Err(Error::invalid("objective", "no scenes"));
    }
    let protos = g.input(classifier.matrix().cast());
    let projected = project_rows(g, p, protos)?;
    let ids = classifier.class_ids();
    let mut acc: Option<Var> = None;
    for s in samples {
        let feat = match &s.input {
            Input::Cached(a) => g.input(a.cast()),
            Input::Image(img) => {
                let x = g.input(img.cast());
                backbone(g, p, x)?
            }
        };
        let emb = head(g, p, feat)?;
        let rows = pixel_rows(g, emb)?;
        let scores = score_projected(g, rows, projected, tau)?;
        let l = ce_loss(g, scores, &s.labels, &ids)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let ce = g.scale(acc.expect("non-empty"), 1.0 / samples.len() as f64);

    let reg_node = match reg {
        Regularizer::None => None,
        Regularizer::Redistribution { .. } | Regularizer::Inter { .. } => {
            let (old, new, anchors) = classifier.old_new_split()?;
            if old.is_empty() || new.is_empty() {
                None
            } else {
                let a = g.input(anchors.cast());
                let new_p = select_rows(g, projected, &new)?;
                Some(match reg {
                    Regularizer::Redistribution { operand, .. } => {
                        let old_p = select_rows(g, projected, &old)?;
                        redistribution_loss(g, a, old_p, new_p, operand)?
                    }
                    _ => inter_loss(g, a, new_p)?,
                })
            }
        }
    };
    let total = match reg_node {
        Some(r) if reg.lambda() != 0.0 => {
            let w = g.scale(r, reg.lambda());
            g.add(ce, w)?
        }
        _ => ce,
    };
    Ok(Built {
        total,
        ce,
        reg: reg_node,
    })
}

fn parts<T: Real>(g: &Graph<T>, b: &Built) -> LossParts {
    LossParts {
        ce: g.value(b.ce).item().to_f64_lossy(),
        reg: b.reg.map_or(0.0, |r| g.value(r).item().to_f64_lossy()),
        total: g.value(b.total).item().to_f64_lossy(),
    }
}

/// Objective value only.
pub fn loss(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    samples: &[Sample<'_>],
    reg: Regularizer,
) -> Result<LossParts> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let b = build(&mut g, &p, classifier, samples, reg, params.config().tau)?;
    Ok(parts(&g, &b))
}

/// Objective value and gradients for the tensors of `trainable`; other
/// entries are `None`.
pub fn loss_and_grads(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    samples: &[Sample<'_>],
    reg: Regularizer,
    trainable: &[Group],
) -> Result<(LossParts, Vec<Option<Array<f32>>>)> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let b = build(&mut g, &p, classifier, samples, reg, params.config().tau)?;
    let lp = parts(&g, &b);
    if !lp.total.is_finite() {
        return Ok((lp, vec![None; params.len()]));
    }
    let grads = g.backward(b.total)?;
    let out = p
        .vars()
        .iter()
        .enumerate()
        .map(|(i, &v)| trainable.contains(&params.group(i)).then(|| grads.get(v)))
        .collect();
    Ok((lp, out))
}
