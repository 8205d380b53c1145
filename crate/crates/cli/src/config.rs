//! Run configuration: defaults, a JSON config file, and flag overrides
//! addressed by dotted paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Settings shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; `null` lets the pool pick.
    pub threads: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("out"), threads: None }
    }
}

/// A flag value: JSON if it parses, a plain string otherwise.
pub fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses a `path=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let Some((path, raw)) = s.split_once('=') else {
        bail!("expected PATH=VALUE, got {s:?}");
    };
    Ok((path.trim().to_string(), flag_value(raw)))
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("unknown config key {path}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Sets an existing dotted path.
pub fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("config path {path}: {} is not a section", parts[..i].join("."));
        };
        let Some(next) = map.get_mut(*part) else {
            bail!("unknown config key {}", parts[..=i].join("."));
        };
        node = next;
    }
    *node = value;
    Ok(())
}

fn remove_path(tree: &mut Value, path: &str) {
    let (parent, key) = match path.rsplit_once('.') {
        Some((p, k)) => (Some(p), k),
        None => (None, path),
    };
    let mut node = tree;
    if let Some(p) = parent {
        for part in p.split('.') {
            match node.get_mut(part) {
                Some(n) => node = n,
                None => return,
            }
        }
    }
    if let Value::Object(map) = node {
        map.remove(key);
    }
}

/// Defaults, then `file`, then `overrides` in order. Paths listed in
/// `hidden` (nested seeds derived from the top-level one) are not
/// addressable and are left at their defaults.
pub fn resolve<T>(file: Option<&Path>, overrides: &[(String, Value)], hidden: &[&str]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut tree = serde_json::to_value(T::default())?;
    for h in hidden {
        remove_path(&mut tree, h);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !patch.is_object() {
            bail!("config file {} must hold a JSON object", path.display());
        }
        merge(&mut tree, patch, "")?;
    }
    for (path, value) in overrides {
        set_path(&mut tree, path, value.clone())?;
    }
    serde_json::from_value(tree).context("invalid configuration")
}

/// The resolved configuration as written next to the outputs.
pub fn echo<T: Serialize>(config: &T, hidden: &[&str]) -> Result<String> {
    let mut tree = serde_json::to_value(config)?;
    for h in hidden {
        remove_path(&mut tree, h);
    }
    Ok(serde_json::to_string_pretty(&sorted(tree))? + "\n")
}

fn sorted(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<(String, Value)> = m.into_iter().collect();
            keys.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(keys.into_iter().map(|(k, v)| (k, sorted(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sorted).collect()),
        other => other,
    }
}
