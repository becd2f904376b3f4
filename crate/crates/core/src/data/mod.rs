//! Synthetic scenes, class catalogs, session streams and the access guard.

pub mod catalog;
pub mod corpus;
pub mod guard;
pub mod store;
pub mod stream;

pub use catalog::{split_folds, ClassCatalog, ClassEntry, ShapeFamily};
pub use corpus::{generate_corpus, Scene, FEATURE_STRIDE, IGNORE_LABEL};
pub use guard::{guarded_fetch, AccessGuard, Violation};
pub use stream::{build_stream, sample_pseudo_sequence, Session, SessionStream, Split, StreamMode, StreamOptions};
