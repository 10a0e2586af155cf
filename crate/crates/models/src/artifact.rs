//! Stage-tagged model files. Weights are stored as safetensors; a JSON header
//! with the format version, stage, architecture, training configuration and
//! loss trace rides in the safetensors metadata block.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DEVICE;

pub const FORMAT_VERSION: &str = "dentcascade-artifact/1";
const HEADER_KEY: &str = "dentcascade";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmenter,
    Detector,
    Filter,
    Diagnoser,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Segmenter => "segmenter",
            Stage::Detector => "detector",
            Stage::Filter => "filter",
            Stage::Diagnoser => "diagnoser",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: String,
    pub stage: Stage,
    pub arch: serde_json::Value,
    pub config: serde_json::Value,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Serialized weights plus everything needed to rebuild and run the model.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub header: ArtifactHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelArtifact {
    pub fn new(
        stage: Stage,
        arch: &impl Serialize,
        config: &impl Serialize,
        loss_trace: Vec<f64>,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let to_value = |v: serde_json::Result<serde_json::Value>| {
            v.map_err(|e| Error::Domain(format!("cannot encode model metadata: {e}")))
        };
        Ok(Self {
            header: ArtifactHeader {
                format_version: FORMAT_VERSION.to_string(),
                stage,
                arch: to_value(serde_json::to_value(arch))?,
                config: to_value(serde_json::to_value(config))?,
                loss_trace,
            },
            tensors,
        })
    }

    pub fn stage(&self) -> Stage {
        self.header.stage
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.header.loss_trace
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.header.stage != expected {
            return Err(Error::Stage {
                expected,
                found: self.header.stage,
            });
        }
        Ok(())
    }

    pub fn arch<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.arch.clone())
            .map_err(|e| Error::Domain(format!("malformed architecture block: {e}")))
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Domain(format!("malformed configuration block: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)
            .map_err(|e| Error::Domain(format!("cannot encode artifact header: {e}")))?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
        safetensors::serialize(self.tensors.iter(), Some(meta))
            .map_err(|e| Error::Domain(format!("cannot encode weights: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::artifact(origin, format!("not a safetensors file: {e}")))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::artifact(origin, "missing model header"))?;
        let header: ArtifactHeader =
            serde_json::from_str(raw).map_err(|e| Error::artifact(origin, format!("malformed model header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::artifact(
                origin,
                format!(
                    "format version {} is not supported (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &DEVICE)
            .map_err(|e| Error::artifact(origin, format!("cannot decode weights: {e}")))?
            .into_iter()
            .collect();
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::artifact(dir, e.to_string()))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::artifact(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the stage tag in one step.
    pub fn load_stage(path: &Path, stage: Stage) -> Result<Self> {
        let a = Self::load(path)?;
        a.expect_stage(stage)?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_version_check() {
        let t = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0], (2, 2), &DEVICE).unwrap();
        let a = ModelArtifact::new(
            Stage::Filter,
            &serde_json::json!({"w": 2}),
            &serde_json::json!({"epochs": 3}),
            vec![1.0, 0.5],
            BTreeMap::from([("x".to_string(), t)]),
        )
        .unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.to_bytes().unwrap());
        let b = ModelArtifact::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(b.header, a.header);
        assert_eq!(
            b.tensors["x"].to_vec2::<f32>().unwrap(),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]]
        );
        assert!(matches!(b.expect_stage(Stage::Detector), Err(Error::Stage { .. })));

        let mut old = a.clone();
        old.header.format_version = "dentcascade-artifact/0".into();
        let err = ModelArtifact::from_bytes(&old.to_bytes().unwrap(), Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("not supported"));
        assert!(ModelArtifact::from_bytes(b"garbage", Path::new("mem")).is_err());
    }
}
