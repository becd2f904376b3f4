use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::corpus::CHANNELS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Array, Real};

/// The three parameter groups of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    /// Convolutional feature extractor.
    Extractor,
    /// 1×1 convolution mapping extractor output to the embedding.
    Head,
    /// Linear prototype projector.
    Projector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each 3×3 conv layer. The first two layers are
    /// followed by a 2×2 mean pool, so features sit at 1/4 resolution.
    pub conv_channels: Vec<usize>,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    /// Softmax temperature over cosine scores.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16, 32, 32],
            embed_dim: 32,
            tau: 0.1,
        }
    }
}

/// Number of leading conv layers followed by a 2×2 pool.
pub const POOLED_LAYERS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() < POOLED_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "need at least {POOLED_LAYERS} conv layers"
            )));
        }
        if self.conv_channels.contains(&0) || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the extractor output.
    pub fn backbone_channels(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }

    /// `(name, group, shape)` of every tensor in storage order.
    pub fn layout(&self) -> Vec<(String, Group, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = CHANNELS;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), Group::Extractor, vec![cout, cin, 3, 3]));
            out.push((format!("extractor.{i}.bias"), Group::Extractor, vec![cout]));
            cin = cout;
        }
        let d = self.embed_dim;
        out.push(("head.weight".into(), Group::Head, vec![d, cin, 1, 1]));
        out.push(("head.bias".into(), Group::Head, vec![d]));
        out.push(("projector.weight".into(), Group::Projector, vec![d, d]));
        out.push(("projector.bias".into(), Group::Projector, vec![d]));
        out
    }
}

/// Named network parameters `{extractor, head, projector}`.
///
/// Cloning yields an independent copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Array<f32>>,
    extractor_frozen: bool,
}

impl ParamSet {
    /// He-normal convolutions, scaled-normal head, identity projector, zero
    /// biases. Draws from the `init` sub-stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let d = config.embed_dim;
        let values = config
            .layout()
            .into_iter()
            .map(|(name, _, shape)| {
                if name.ends_with("bias") {
                    Array::zeros(shape)
                } else if name == "projector.weight" {
                    Array::from_fn(shape, |i| if i / d == i % d { 1.0 } else { 0.0 })
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    Array::from_fn(shape, |_| (rng::normal(&mut rng) * std) as f32)
                }
            })
            .collect();
        Self::from_values(config, values)
    }

    /// All-zero parameters.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let values = config.layout().into_iter().map(|(_, _, s)| Array::zeros(s)).collect();
        Self::from_values(config, values)
    }

    /// Assembles parameters from values in layout order.
    pub fn from_values(config: &ModelConfig, values: Vec<Array<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != values.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, got {}",
                layout.len(),
                values.len()
            )));
        }
        for ((name, _, shape), v) in layout.iter().zip(&values) {
            if v.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    v.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            names: layout.iter().map(|l| l.0.clone()).collect(),
            groups: layout.iter().map(|l| l.1).collect(),
            values,
            extractor_frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, i: usize) -> Group {
        self.groups[i]
    }

    pub fn values(&self) -> &[Array<f32>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &Array<f32> {
        &self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Indices of tensors belonging to any of `groups`.
    pub fn indices(&self, groups: &[Group]) -> Vec<usize> {
        (0..self.len()).filter(|&i| groups.contains(&self.groups[i])).collect()
    }

    pub fn freeze_extractor(&mut self) {
        self.extractor_frozen = true;
    }

    /// Lets the extractor train again, for arms that keep updating it.
    pub fn unfreeze_extractor(&mut self) {
        self.extractor_frozen = false;
    }

    pub fn extractor_frozen(&self) -> bool {
        self.extractor_frozen
    }

    /// Adds `step · delta[i]` to every tensor with a `Some` delta. Frozen
    /// extractor tensors are never touched.
    pub fn apply(&mut self, step: f32, delta: &[Option<Array<f32>>]) {
        for (i, d) in delta.iter().enumerate() {
            if let Some(d) = d {
                if self.extractor_frozen && self.groups[i] == Group::Extractor {
                    continue;
                }
                self.values[i].axpy(step, d);
            }
        }
    }

    pub fn set(&mut self, i: usize, value: Array<f32>) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "param-set",
                left: self.values[i].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Array::is_finite)
    }

    /// Hex SHA-256 over names, shapes and little-endian values of `groups`.
    pub fn hash_groups(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for i in self.indices(groups) {
            h.update(self.names[i].as_bytes());
            for &e in self.values[i].shape() {
                h.update((e as u32).to_le_bytes());
            }
            h.update(self.values[i].to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_groups(&[Group::Extractor, Group::Head, Group::Projector])
    }

    /// Inserts every tensor into `g` as a parameter leaf.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        Bound::new(
            self.config.conv_channels.len(),
            self.values.iter().map(|v| g.param(v.cast())).collect(),
        )
    }
}

/// Graph leaves of a [`ParamSet`], in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: usize,
    vars: Vec<Var>,
}

impl Bound {
    /// `vars` must follow [`ModelConfig::layout`] for a stack of `layers`
    /// conv layers.
    pub fn new(layers: usize, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), 2 * layers + 4, "layout length");
        Self { layers, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    pub fn head(&self) -> (Var, Var) {
        let n = 2 * self.layers;
        (self.vars[n], self.vars[n + 1])
    }

    pub fn projector(&self) -> (Var, Var) {
        let n = 2 * self.layers;
        (self.vars[n + 2], self.vars[n + 3])
    }
}
