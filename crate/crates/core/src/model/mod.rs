//! Segmentation network, prototypes, scoring and losses.

pub mod checkpoint;
pub mod loss;
pub mod net;
pub mod optim;
pub mod params;
pub mod proto;

pub use checkpoint::Checkpoint;
pub use loss::{ce_loss, inter_loss, redistribution_loss, OldOperand};
pub use net::{backbone_features, embed, extract, project};
pub use optim::{Adam, Sgd};
pub use params::{Bound, Group, ModelConfig, ParamSet};
pub use proto::{
    expand_classifier, map_prototype, score_pixels, Prototype, PrototypeClassifier, BACKGROUND,
};
