#![allow(dead_code)]

pub mod gradsuite;
pub mod oracles;

use ifss_core::data::{
    build_stream, generate_corpus, split_folds, ClassCatalog, Scene, SessionStream, ShapeFamily, StreamMode,
    StreamOptions,
};
use ifss_core::meta::{base_init, BaseConfig, BaseOutcome};
use ifss_core::model::{ModelConfig, ParamSet};

/// Eight classes on a 24×24 grid: small enough for debug-speed tests.
pub fn small_corpus() -> (ClassCatalog, Vec<Scene>) {
    let catalog = ClassCatalog::with_families(&ShapeFamily::ALL[..8]);
    let corpus = generate_corpus(&catalog, 24, (24, 24), 11).unwrap();
    (catalog, corpus)
}

pub fn small_options(mode: StreamMode) -> StreamOptions {
    StreamOptions {
        test_per_class: 4,
        ..StreamOptions::new(mode, 1)
    }
}

/// Six base classes, two novel ones.
pub fn small_stream(catalog: &ClassCatalog, corpus: &[Scene], mode: StreamMode, seed: u64) -> SessionStream {
    let (base, novel) = split_folds(catalog, 4, 3).unwrap();
    build_stream(corpus, &base, &novel, small_options(mode), seed).unwrap()
}

pub fn small_base(corpus: &[Scene], stream: &SessionStream, seed: u64) -> BaseOutcome {
    let cfg = BaseConfig {
        epochs: 2,
        batch: 8,
        ..Default::default()
    };
    base_init(corpus, &stream.sessions[0], ParamSet::init(&ModelConfig::default(), seed).unwrap(), &cfg, seed).unwrap()
}
