//! Prototype-based incremental few-shot semantic segmentation.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod meta;
pub mod model;
pub mod objective;
pub mod rng;
pub mod support;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Array, Real};
