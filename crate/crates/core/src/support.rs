//! Prototype construction from labelled scenes.

use rayon::prelude::*;

use crate::data::corpus::Scene;
use crate::data::stream::Session;
use crate::error::Result;
use crate::features::{feature_labels, FeatureCache};
use crate::graph::{Graph, Var};
use crate::model::proto::{class_mask, map_prototype_graph};
use crate::model::{backbone_features, embed, ParamSet, PrototypeClassifier, BACKGROUND};
use crate::tensor::Array;

/// Extractor outputs of `ids`, from `cache` when given, else computed with
/// the current extractor.
pub fn backbone_outputs(
    params: &ParamSet,
    corpus: &[Scene],
    ids: &[usize],
    cache: Option<&FeatureCache>,
) -> Result<Vec<Array<f32>>> {
    match cache {
        Some(c) => Ok(ids.iter().map(|&i| c.get(i).clone()).collect()),
        None => ids
            .par_iter()
            .map(|&i| backbone_features(params, &corpus[i].image_chw()))
            .collect(),
    }
}

/// Masked average of `class` over embeddings `[d, h, w]` and label grids.
pub fn class_prototype(embeddings: &[Array<f32>], labels: &[Vec<u8>], class: u32) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = embeddings.iter().map(|e| g.input(e.clone())).collect();
    let masks: Vec<Array<f32>> = embeddings
        .iter()
        .zip(labels)
        .map(|(e, l)| class_mask(l, e.shape()[1], e.shape()[2], class))
        .collect();
    let p = map_prototype_graph(&mut g, &vars, &masks)?;
    Ok(g.value(p).data().to_vec())
}

/// Prototypes for `classes`, each from the scenes of `ids` whose primary
/// class it is, taking at most `max_per_class` of them.
pub fn prototypes_for(
    params: &ParamSet,
    corpus: &[Scene],
    ids: &[usize],
    classes: &[u32],
    visible: &[u32],
    max_per_class: usize,
    cache: Option<&FeatureCache>,
) -> Result<Vec<(u32, Vec<f32>)>> {
    classes
        .iter()
        .map(|&c| {
            let chosen: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&i| corpus[i].primary == c)
                .take(max_per_class)
                .collect();
            let outs = backbone_outputs(params, corpus, &chosen, cache)?;
            let embs = outs.iter().map(|o| embed(params, o)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<Vec<u8>> = chosen.iter().map(|&i| feature_labels(&corpus[i], visible)).collect();
            Ok((c, class_prototype(&embs, &labels, c)?))
        })
        .collect()
}

/// Session-0 classifier: one prototype per class of `session` plus a
/// background prototype over the background pixels of the same scenes.
pub fn build_classifier(
    params: &ParamSet,
    corpus: &[Scene],
    session: &Session,
    max_per_class: usize,
    cache: Option<&FeatureCache>,
) -> Result<PrototypeClassifier> {
    let visible = &session.classes;
    let mut chosen = Vec::new();
    for &c in visible {
        chosen.extend(
            session
                .train
                .iter()
                .copied()
                .filter(|&i| corpus[i].primary == c)
                .take(max_per_class),
        );
    }
    let outs = backbone_outputs(params, corpus, &chosen, cache)?;
    let embs = outs.iter().map(|o| embed(params, o)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<u8>> = chosen.iter().map(|&i| feature_labels(&corpus[i], visible)).collect();
    let mut base = Vec::with_capacity(visible.len());
    for &c in visible {
        let (e, l): (Vec<_>, Vec<_>) = chosen
            .iter()
            .zip(embs.iter().zip(&labels))
            .filter(|(&i, _)| corpus[i].primary == c)
            .map(|(_, (e, l))| (e.clone(), l.clone()))
            .unzip();
        base.push((c, class_prototype(&e, &l, c)?));
    }
    let background = class_prototype(&embs, &labels, BACKGROUND)?;
    PrototypeClassifier::new(background, base)
}
