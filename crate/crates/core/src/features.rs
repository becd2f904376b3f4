//! Per-scene extractor outputs. The extractor is frozen after base training,
//! so its output for a scene never changes and is computed once.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::corpus::{downsample_labels, Scene};
use crate::error::{Error, Result};
use crate::model::{backbone_features, Group, ParamSet};
use crate::tensor::Array;

#[derive(Clone, Debug)]
pub struct FeatureCache {
    extractor_hash: String,
    entries: HashMap<usize, Array<f32>>,
}

impl FeatureCache {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            extractor_hash: params.hash_groups(&[Group::Extractor]),
            entries: HashMap::new(),
        }
    }

    /// Computes missing entries for `ids`, in parallel.
    pub fn ensure(&mut self, params: &ParamSet, corpus: &[Scene], ids: &[usize]) -> Result<()> {
        let missing: Vec<usize> = {
            let mut m: Vec<usize> = ids.iter().copied().filter(|i| !self.entries.contains_key(i)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if missing.is_empty() {
            return Ok(());
        }
        if params.hash_groups(&[Group::Extractor]) != self.extractor_hash {
            return Err(Error::InvalidConfig(
                "feature cache built for a different extractor".into(),
            ));
        }
        let computed = missing
            .par_iter()
            .map(|&id| {
                let scene = corpus
                    .get(id)
                    .ok_or_else(|| Error::InvalidConfig(format!("scene {id} not in corpus")))?;
                Ok((id, backbone_features(params, &scene.image_chw())?))
            })
            .collect::<Result<Vec<_>>>()?;
        self.entries.extend(computed);
        Ok(())
    }

    /// Cached output of `id`. Panics when [`Self::ensure`] has not covered it.
    pub fn get(&self, id: usize) -> &Array<f32> {
        &self.entries[&id]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Labels at feature resolution with classes outside `visible` mapped to
/// background.
pub fn feature_labels(scene: &Scene, visible: &[u32]) -> Vec<u8> {
    downsample_labels(&scene.visible_mask(visible), scene.height(), scene.width())
}
