use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ifss_core::data::{ClassCatalog, ShapeFamily};
use ifss_core::eval::ablation::{AblationConfig, SWEEP_LAMBDAS};
use ifss_core::eval::EvalConfig;
use ifss_core::meta::{BaseConfig, MetaConfig};
use ifss_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::UsageError;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "IFSS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Shape families, one class each, in class-id order.
    pub families: Vec<ShapeFamily>,
    pub scenes_per_class: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            scenes_per_class: 40,
            height: 48,
            width: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub count: usize,
    /// Fold whose classes arrive as novel sessions.
    pub test_fold: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { count: 4, test_fold: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    /// Worker threads for the ablation; 0 uses every core.
    pub workers: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            lambdas: SWEEP_LAMBDAS.to_vec(),
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; relative paths resolve against the output root.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

/// Everything a pipeline stage needs. Every key has a default; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Corpus, stream, initialisation, pseudo sequences and
    /// adaptation all draw from named sub-streams of it; `meta.seed` is
    /// replaced by this value.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub folds: FoldConfig,
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("bad config: {}", e.message().trim())).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The file at `path`, or the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("serializable config");
        hex::encode(Sha256::digest(json))
    }

    /// JSON with keys sorted at every level.
    pub fn canonical(&self) -> serde_json::Value {
        let v = serde_json::to_value(self).expect("serializable config");
        serde_json::from_str(&v.to_string()).expect("round trip")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        if self.corpus.families.is_empty() {
            return Err(UsageError("corpus.families is empty".into()).into());
        }
        Ok(ClassCatalog::with_families(&self.corpus.families))
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: self.seed,
            ..self.meta.clone()
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            model: self.model.clone(),
            base: self.base.clone(),
            meta: self.meta.clone(),
            eval: self.eval.clone(),
            lambdas: self.ablation.lambdas.clone(),
        }
    }

    /// Run directory after applying the output-root override.
    pub fn run_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
