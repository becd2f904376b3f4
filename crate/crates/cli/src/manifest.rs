use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::exit::{DataError, UsageError};

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory for outputs, as given for inputs.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path, shown: PathBuf) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: shown,
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

/// Provenance of one output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand words and arguments that produced the directory.
    pub command: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub engine_version: String,
    pub revision: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<Artifact>,
    /// SHA-256 of the checkpoint this run started from.
    pub parent: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: Vec<String>, config: &ExperimentConfig) -> Self {
        Self {
            command,
            config_hash: config.hash(),
            config: config.canonical(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            revision: env!("IFSS_REVISION").into(),
            started_unix: now_unix(),
            finished_unix: 0,
            inputs: Vec::new(),
            parent: None,
            artifacts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    /// Hashes every file under `dir` except the manifest and writes it.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.artifacts = list_files(dir)?
            .into_iter()
            .filter(|p| p != Path::new(MANIFEST_FILE))
            .map(|rel| Artifact::of(&dir.join(&rel), rel))
            .collect::<Result<_>>()?;
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| DataError(format!("{}: {e}", path.display())).into())
    }
}

/// Relative paths of all files below `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Makes `dir` ready for a fresh run. A non-empty directory is an error
/// unless `overwrite` is set, in which case it is cleared.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !overwrite {
            return Err(UsageError(format!(
                "{} is not empty; pass --overwrite to replace it",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
