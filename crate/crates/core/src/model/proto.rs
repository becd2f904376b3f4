use serde::{Deserialize, Serialize};

use super::net::{hwc_to_chw, project, project_rows};
use super::params::{Bound, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Array, Real};

/// Class id of the background prototype.
pub const BACKGROUND: u32 = 0;

/// Masked average pooling averaged over shots. Each feature map is `[d, h, w]`
/// and each mask `[h, w]`; shots whose mask is empty are left out and the
/// average runs over the remaining ones.
pub fn map_prototype_graph<T: Real>(
    g: &mut Graph<T>,
    features: &[Var],
    masks: &[Array<T>],
) -> Result<Var> {
    if features.len() != masks.len() {
        return Err(Error::invalid(
            "map_prototype",
            format!("{} feature maps but {} masks", features.len(), masks.len()),
        ));
    }
    let mut pooled = Vec::new();
    for (&f, m) in features.iter().zip(masks) {
        if m.data().iter().any(|&v| v > T::zero()) {
            pooled.push(g.masked_avg_pool(f, m)?);
        }
    }
    let Some((&first, rest)) = pooled.split_first() else {
        return Err(Error::EmptySupport);
    };
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / pooled.len() as f64))
}

/// Prototype from `[h, w, d]` feature maps and binary `[h, w]` masks.
pub fn map_prototype<T: Real>(features: &[Array<T>], masks: &[Array<T>]) -> Result<Array<T>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = features.iter().map(|f| g.input(hwc_to_chw(f))).collect();
    let p = map_prototype_graph(&mut g, &vars, masks)?;
    Ok(g.value(p).clone())
}

/// Binary `[h, w]` mask of `class` in a label grid.
pub fn class_mask<T: Real>(labels: &[u8], h: usize, w: usize, class: u32) -> Array<T> {
    debug_assert_eq!(labels.len(), h * w);
    Array::from_fn([h, w], |i| {
        if labels[i] as u32 == class {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Per-pixel softmax over cosine similarity to projected prototypes.
/// `rows` is `[P, d]`, `prototypes` `[N, d]` (pre-projection); returns `[P, N]`.
pub fn score_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    rows: Var,
    prototypes: Var,
    tau: f64,
) -> Result<Var> {
    let projected = project_rows(g, p, prototypes)?;
    score_projected(g, rows, projected, tau)
}

/// As [`score_graph`] with prototypes already projected.
pub fn score_projected<T: Real>(g: &mut Graph<T>, rows: Var, projected: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("score_pixels", "tau must be positive"));
    }
    let cos = g.cosine_pairwise(rows, projected)?;
    let logits = g.scale(cos, 1.0 / tau);
    g.softmax(logits, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: u32,
    /// Pre-projection embedding.
    pub vector: Vec<f32>,
    pub session_born: usize,
    /// Projected value at the end of the previous session.
    pub anchor: Option<Vec<f32>>,
}

/// Ordered prototypes; index 0 is the background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    prototypes: Vec<Prototype>,
    session: usize,
}

fn check_vector(class: u32, v: &[f32]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid(
            "prototype",
            format!("class {class}: vector must be finite and nonzero"),
        ));
    }
    Ok(())
}

impl PrototypeClassifier {
    /// Session-0 classifier: background first, then `base` in the given order.
    pub fn new(background: Vec<f32>, base: Vec<(u32, Vec<f32>)>) -> Result<Self> {
        let mut prototypes = Vec::with_capacity(base.len() + 1);
        check_vector(BACKGROUND, &background)?;
        prototypes.push(Prototype {
            class_id: BACKGROUND,
            vector: background,
            session_born: 0,
            anchor: None,
        });
        let d = prototypes[0].vector.len();
        for (class_id, vector) in base {
            if prototypes.iter().any(|p| p.class_id == class_id) {
                return Err(Error::DuplicateClass(class_id));
            }
            if vector.len() != d {
                return Err(Error::invalid("prototype", "inconsistent dimension"));
            }
            check_vector(class_id, &vector)?;
            prototypes.push(Prototype {
                class_id,
                vector,
                session_born: 0,
                anchor: None,
            });
        }
        Ok(Self {
            prototypes,
            session: 0,
        })
    }

    /// Restores a classifier from stored prototypes.
    pub fn from_parts(prototypes: Vec<Prototype>, session: usize) -> Result<Self> {
        let Some(first) = prototypes.first() else {
            return Err(Error::invalid("prototype", "classifier is empty"));
        };
        let d = first.vector.len();
        for (i, p) in prototypes.iter().enumerate() {
            if prototypes[..i].iter().any(|q| q.class_id == p.class_id) {
                return Err(Error::DuplicateClass(p.class_id));
            }
            if p.vector.len() != d || p.anchor.as_ref().is_some_and(|a| a.len() != d) {
                return Err(Error::invalid("prototype", "inconsistent dimension"));
            }
            check_vector(p.class_id, &p.vector)?;
        }
        Ok(Self {
            prototypes,
            session,
        })
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].vector.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    pub fn index_of(&self, class: u32) -> Option<usize> {
        self.prototypes.iter().position(|p| p.class_id == class)
    }

    /// Pre-projection vectors as `[N, d]`.
    pub fn matrix(&self) -> Array<f32> {
        let d = self.dim();
        let data = self.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect();
        Array::new([self.len(), d], data).expect("consistent dimension")
    }

    /// Indices of the old foreground prototypes (born before the current
    /// session), of the prototypes born in it, and the old anchors `[Nb, d]`.
    pub fn old_new_split(&self) -> Result<(Vec<usize>, Vec<usize>, Array<f32>)> {
        let mut old = Vec::new();
        let mut new = Vec::new();
        let mut anchors = Vec::new();
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.session_born == self.session {
                if p.class_id != BACKGROUND {
                    new.push(i);
                }
            } else if p.class_id != BACKGROUND {
                let a = p.anchor.as_ref().ok_or(Error::AnchorMissing(p.class_id))?;
                anchors.extend_from_slice(a);
                old.push(i);
            }
        }
        let anchors = Array::new([old.len(), self.dim()], anchors)?;
        Ok((old, new, anchors))
    }

    /// Replaces the vector of `class`.
    pub fn set_vector(&mut self, class: u32, vector: Vec<f32>) -> Result<()> {
        let i = self
            .index_of(class)
            .ok_or_else(|| Error::invalid("prototype", format!("class {class} not present")))?;
        check_vector(class, &vector)?;
        self.prototypes[i].vector = vector;
        Ok(())
    }
}

/// Appends `new` prototypes as a new session. Old prototypes keep their index
/// and vector and take the current projected vector as their anchor.
/// Expanding by nothing returns the classifier unchanged.
pub fn expand_classifier(
    classifier: &PrototypeClassifier,
    params: &ParamSet,
    new: Vec<(u32, Vec<f32>)>,
) -> Result<PrototypeClassifier> {
    if new.is_empty() {
        return Ok(classifier.clone());
    }
    for (i, (id, v)) in new.iter().enumerate() {
        if classifier.index_of(*id).is_some() || new[..i].iter().any(|(o, _)| o == id) {
            return Err(Error::DuplicateClass(*id));
        }
        if v.len() != classifier.dim() {
            return Err(Error::invalid("expand_classifier", "inconsistent dimension"));
        }
        check_vector(*id, v)?;
    }
    let projected = project(params, &classifier.matrix())?;
    let d = classifier.dim();
    let session = classifier.session + 1;
    let mut prototypes: Vec<Prototype> = classifier
        .prototypes
        .iter()
        .enumerate()
        .map(|(i, p)| Prototype {
            anchor: Some(projected.data()[i * d..(i + 1) * d].to_vec()),
            ..p.clone()
        })
        .collect();
    prototypes.extend(new.into_iter().map(|(class_id, vector)| Prototype {
        class_id,
        vector,
        session_born: session,
        anchor: None,
    }));
    Ok(PrototypeClassifier {
        prototypes,
        session,
    })
}

/// Score map `[h, w, N]` for an `[h, w, d]` feature map.
pub fn score_pixels<T: Real>(
    params: &ParamSet,
    features: &Array<T>,
    classifier: &PrototypeClassifier,
    tau: f64,
) -> Result<Array<T>> {
    let (h, w, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let mut g = Graph::<T>::new();
    let p = params.bind(&mut g);
    let rows = g.input(features.clone().reshape([h * w, d])?);
    let protos = g.input(classifier.matrix().cast());
    let s = score_graph(&mut g, &p, rows, protos, tau)?;
    g.value(s).clone().reshape([h, w, classifier.len()])
}
