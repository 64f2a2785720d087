//! Layered run configuration: defaults < JSON file < command-line flags.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Config file and field overrides accepted by every training command.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct Layers {
    /// JSON file holding any subset of the config fields. Unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set epochs=5` or `--set effects.duration=2.0`.
    /// Values are read as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Resolves a config of type `C`. `flags` are dedicated command-line options
/// already converted to dotted keys; they apply after the file and before
/// `--set`, and `--seed` writes `seed_key` last.
pub fn resolve<C>(layers: &Layers, seed_key: &str, flags: Vec<(String, Value)>) -> Result<C>
where
    C: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(C::default())?;
    if let Some(path) = &layers.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !file.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        merge(&mut value, file);
    }
    for (key, v) in flags {
        set_path(&mut value, &key, v)?;
    }
    for item in &layers.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {item:?}"))?;
        set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = layers.seed {
        set_path(&mut value, seed_key, Value::from(seed))?;
    }
    serde_json::from_value(value).context("invalid configuration")
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    if key.is_empty() {
        bail!("empty config key");
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("config key {key:?}: {:?} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        rate: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Toy {
        epochs: usize,
        seed: u64,
        name: String,
        inner: Inner,
    }

    impl Default for Toy {
        fn default() -> Self {
            Self {
                epochs: 3,
                seed: 1,
                name: "a".into(),
                inner: Inner { rate: 0.5 },
            }
        }
    }

    fn layers(file: Option<&str>, set: &[&str], seed: Option<u64>) -> (Layers, Option<tempfile::NamedTempFile>) {
        let tmp = file.map(|body| {
            let f = tempfile::NamedTempFile::new().unwrap();
            fs::write(f.path(), body).unwrap();
            f
        });
        let l = Layers {
            config: tmp.as_ref().map(|f| f.path().to_path_buf()),
            set: set.iter().map(|s| s.to_string()).collect(),
            seed,
        };
        (l, tmp)
    }

    #[test]
    fn later_layers_win() {
        let (l, _f) = layers(Some(r#"{"epochs": 7, "inner": {"rate": 0.1}}"#), &["epochs=9", "name=b"], Some(4));
        let c: Toy = resolve(&l, "seed", vec![]).unwrap();
        assert_eq!(
            c,
            Toy {
                epochs: 9,
                seed: 4,
                name: "b".into(),
                inner: Inner { rate: 0.1 }
            }
        );
    }

    #[test]
    fn flags_sit_between_file_and_set() {
        let (l, _f) = layers(Some(r#"{"epochs": 7}"#), &[], None);
        let c: Toy = resolve(&l, "seed", vec![("epochs".into(), Value::from(8))]).unwrap();
        assert_eq!(c.epochs, 8);
        let (l, _f) = layers(None, &["epochs=2"], None);
        let c: Toy = resolve(&l, "seed", vec![("epochs".into(), Value::from(8))]).unwrap();
        assert_eq!(c.epochs, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (l, _f) = layers(Some(r#"{"epoch": 7}"#), &[], None);
        assert!(resolve::<Toy>(&l, "seed", vec![]).is_err());
        let (l, _f) = layers(None, &["inner.speed=1"], None);
        assert!(resolve::<Toy>(&l, "seed", vec![]).is_err());
        let (l, _f) = layers(None, &["epochs"], None);
        assert!(resolve::<Toy>(&l, "seed", vec![]).is_err());
    }

    #[test]
    fn nested_seed_key() {
        let (l, _f) = layers(None, &[], Some(11));
        let c: Toy = resolve(&l, "inner.rate", vec![]).unwrap();
        assert_eq!(c.inner.rate, 11.0);
    }
}
