use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Record of one invocation, written next to everything it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Effective settings after defaults, config file and flags.
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub timestamp: String,
    pub argv: Vec<String>,
    /// Run-specific facts such as loss traces or skipped images.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new<T: Serialize>(subcommand: &str, config: &T, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            argv: std::env::args().collect(),
            details: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.outputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn detail<T: Serialize>(&mut self, name: &str, value: &T) -> Result<&mut Self> {
        self.details.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    /// `<dir>/<subcommand>.manifest.json`
    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.manifest.json", self.subcommand))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = self.path_in(dir);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
