//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Flag overrides keyed by dotted path (`crop.size`); unset flags are skipped.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut node = &mut self.0;
            for p in parts {
                node = node
                    .entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("nested override keys are objects");
            }
            node.insert(last.to_string(), v);
        }
        self
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }
}

pub const SUBCOMMANDS: [&str; 7] = [
    "gen-toy",
    "train-segmenter",
    "train-detector",
    "train-filter",
    "train-diagnoser",
    "predict",
    "evaluate",
];

/// The part of a config file that applies to `subcommand`.
///
/// A file may hold the settings directly, a section per subcommand
/// (`{"train-detector": {...}}`), or be a run manifest written earlier.
fn section(subcommand: &str, file: Value, path: &Path) -> Result<Value> {
    let Value::Object(mut obj) = file else {
        bail!("{}: config must be a JSON object", path.display());
    };
    if let Some(v) = obj.remove(subcommand) {
        return Ok(v);
    }
    if let (Some(Value::String(sub)), Some(_)) = (obj.get("subcommand"), obj.get("config")) {
        if sub != subcommand {
            bail!("{}: manifest belongs to `{sub}`, not `{subcommand}`", path.display());
        }
        return Ok(obj.remove("config").expect("checked above"));
    }
    if obj.keys().any(|k| SUBCOMMANDS.contains(&k.as_str())) {
        return Ok(Value::Object(Map::new()));
    }
    Ok(Value::Object(obj))
}

fn check_keys(defaults: &Value, given: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(g)) = (defaults, given) else {
        return Ok(());
    };
    for (k, v) in g {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match d.get(k) {
            None => bail!("unknown config key `{path}`"),
            Some(dv) => check_keys(dv, v, &path)?,
        }
    }
    Ok(())
}

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

/// Applies flags over the config file over `defaults`.
/// Returns the resolved settings and the keys the file set.
pub fn resolve<T: Serialize + DeserializeOwned>(
    subcommand: &str,
    defaults: &T,
    file: Option<&Path>,
    flags: Overrides,
) -> Result<(T, Vec<String>)> {
    let mut merged = serde_json::to_value(defaults)?;
    let mut file_keys = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let raw: Value = serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?;
        let given = section(subcommand, raw, path)?;
        check_keys(&merged, &given, "").with_context(|| format!("config {}", path.display()))?;
        if let Value::Object(o) = &given {
            file_keys = o.keys().cloned().collect();
        }
        merge(&mut merged, given);
    }
    merge(&mut merged, Value::Object(flags.0));
    let cfg = serde_json::from_value(merged).context("invalid configuration")?;
    Ok((cfg, file_keys))
}
