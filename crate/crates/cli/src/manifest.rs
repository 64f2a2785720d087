//! `experiment.json`: links the corpus hash, resolved config, checkpoint and
//! reports of one subcommand run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use slg_core::corpus::{SPLITS, STATS_FILE};

pub const MANIFEST_FILE: &str = "experiment.json";

#[derive(Debug, Serialize)]
pub struct CorpusRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: &'static str,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusRef>,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(subcommand: &'static str, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand,
            seed: None,
            corpus: None,
            config: serde_json::to_value(config)?,
            checkpoint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn corpus(mut self, dir: &Path) -> Result<Self> {
        self.corpus = Some(CorpusRef {
            path: dir.to_path_buf(),
            sha256: corpus_sha256(dir)?,
        });
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Hash over the split files and statistics of a corpus directory, each
/// prefixed with its name so renames change the digest.
pub fn corpus_sha256(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let names = SPLITS.iter().map(|s| format!("{s}.jsonl")).chain([STATS_FILE.to_string()]);
    for name in names {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
