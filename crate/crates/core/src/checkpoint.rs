//! Checkpoint directories: `config.json` (format version, kind, resolved
//! config, vocabularies), `tensors.bin` with its JSON index, and
//! `norm_stats.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slg_autodiff::{blob, ParamStore, Tensor};

use crate::corpus::{NormStats, Vocabulary};
use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const NORM_FILE: &str = "norm_stats.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<C> {
    format_version: u32,
    kind: String,
    config: C,
    vocabularies: BTreeMap<String, Vocabulary>,
}

pub struct Loaded<C> {
    pub config: C,
    pub vocabularies: BTreeMap<String, Vocabulary>,
    pub stats: Option<NormStats>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl<C> Loaded<C> {
    pub fn vocab(&self, name: &str) -> Result<Vocabulary> {
        self.vocabularies
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing vocabulary {name:?}")))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    vocabularies: BTreeMap<String, Vocabulary>,
    stats: Option<&NormStats>,
    params: &ParamStore<f32>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        vocabularies,
    };
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, to_json(&header)? + "\n").map_err(io_err(&path))?;
    let path = dir.join(NORM_FILE);
    fs::write(&path, to_json(&stats)? + "\n").map_err(io_err(&path))?;
    blob::write_blobs(params, dir)?;
    Ok(())
}

/// Kind recorded in a checkpoint, without decoding the rest.
pub fn peek_kind(dir: &Path) -> Result<String> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{CONFIG_FILE}: {e}")))?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("{CONFIG_FILE} has no kind")))
}

pub fn load<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<Loaded<C>> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{CONFIG_FILE}: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v} is not supported (this build reads version {FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let header: Header<C> = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("{CONFIG_FILE}: {e}")))?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {kind}",
            header.kind
        )));
    }
    let path = dir.join(NORM_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let stats: Option<NormStats> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{NORM_FILE}: {e}")))?;
    if let Some(s) = &stats {
        s.validate()?;
    }
    let tensors = blob::read_blobs(dir).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Loaded {
        config: header.config,
        vocabularies: header.vocabularies,
        stats,
        tensors,
    })
}

/// Replaces the freshly initialized tensors of `store` with checkpoint data.
pub fn restore(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    store
        .load_named(tensors)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Cfg {
        width: usize,
    }

    fn sample(dir: &Path) -> ParamStore<f32> {
        let mut store = ParamStore::new(4);
        store.xavier("w", 3, 2).unwrap();
        let mut vocabs = BTreeMap::new();
        vocabs.insert("src".to_string(), Vocabulary::from_tokens(["A"]));
        save(dir, "toy", &Cfg { width: 3 }, vocabs, None, &store).unwrap();
        store
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample(dir.path());
        let l: Loaded<Cfg> = load(dir.path(), "toy").unwrap();
        assert_eq!(l.config, Cfg { width: 3 });
        assert_eq!(l.tensors[0].1, *store.get(store.id("w").unwrap()));
        assert!(l.stats.is_none());
        assert_eq!(peek_kind(dir.path()).unwrap(), "toy");
    }

    #[test]
    fn version_bump_refused() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        let p = dir.path().join(CONFIG_FILE);
        let t = fs::read_to_string(&p).unwrap().replace(
            "\"format_version\": 1",
            "\"format_version\": 2",
        );
        fs::write(&p, t).unwrap();
        let err = load::<Cfg>(dir.path(), "toy").err().unwrap();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn wrong_kind_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        assert!(load::<Cfg>(dir.path(), "other").is_err());
        let p = dir.path().join(blob::BLOB_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load::<Cfg>(dir.path(), "toy"), Err(Error::Checkpoint(_))));
    }
}
