//! The full cascade: detect and number teeth, crop each one, drop the
//! healthy ones, and diagnose the rest.

use std::fs;
use std::path::{Path, PathBuf};

use dentcascade_core::corpus::{write_predictions, Dataset, PipelineResult, ToothPrediction};
use dentcascade_core::{Detection, Raster};
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, Stage};
use crate::detector::{DetectParams, Detector};
use crate::error::{Error, Result};
use crate::hybrid::{predict_diagnoses, predict_filter, HybridModel};

/// Decision thresholds of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub detection: DetectParams,
    pub filter: f64,
    pub diagnosis: f64,
}

pub struct PipelineModels {
    pub detector: Detector,
    pub filter: HybridModel,
    pub diagnoser: HybridModel,
    pub thresholds: Thresholds,
}

impl PipelineModels {
    /// Checks stage tags and takes each stage's default thresholds from its artifact.
    pub fn new(detector: &ModelArtifact, filter: &ModelArtifact, diagnoser: &ModelArtifact) -> Result<Self> {
        filter.expect_stage(Stage::Filter)?;
        diagnoser.expect_stage(Stage::Diagnoser)?;
        let detector = Detector::from_artifact(detector)?;
        let filter = HybridModel::from_artifact(filter)?;
        let diagnoser = HybridModel::from_artifact(diagnoser)?;
        let thresholds = Thresholds {
            detection: detector.config().detect_params(),
            filter: filter.default_threshold(),
            diagnosis: diagnoser.default_threshold(),
        };
        Ok(Self {
            detector,
            filter,
            diagnoser,
            thresholds,
        })
    }

    pub fn load(detector: &Path, filter: &Path, diagnoser: &Path) -> Result<Self> {
        Self::new(
            &ModelArtifact::load_stage(detector, Stage::Detector)?,
            &ModelArtifact::load_stage(filter, Stage::Filter)?,
            &ModelArtifact::load_stage(diagnoser, Stage::Diagnoser)?,
        )
    }

    pub fn with_thresholds(mut self, thresholds: Thresholds) -> Self {
        self.thresholds = thresholds;
        self
    }
}

/// Stage-1 output and the final result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub detections: Vec<Detection>,
    pub result: PipelineResult,
}

/// Runs the stages after detection on the given detections.
pub fn classify_detections(
    image: &Raster,
    image_id: &str,
    detections: &[Detection],
    models: &PipelineModels,
) -> Result<PipelineResult> {
    let mut teeth = Vec::new();
    for det in detections {
        let crop = models.filter.crop_spec().crop(image, &det.bbox)?;
        let (_, abnormal) = predict_filter(&models.filter, &crop, models.thresholds.filter)?;
        if !abnormal {
            continue;
        }
        let crop = if models.diagnoser.crop_spec() == models.filter.crop_spec() {
            crop
        } else {
            models.diagnoser.crop_spec().crop(image, &det.bbox)?
        };
        let (diagnosis_probs, diagnoses) = predict_diagnoses(&models.diagnoser, &crop, models.thresholds.diagnosis)?;
        teeth.push(ToothPrediction {
            bbox: det.bbox,
            tooth: det.tooth(),
            confidence: det.confidence,
            diagnosis_probs,
            diagnoses,
        });
    }
    teeth.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.tooth.cmp(&b.tooth)));
    Ok(PipelineResult {
        image_id: image_id.to_string(),
        teeth,
    })
}

pub fn run_pipeline_traced(image: &Raster, image_id: &str, models: &PipelineModels) -> Result<ImageOutcome> {
    let detections = models.detector.detect_with(image, &models.thresholds.detection)?;
    let result = classify_detections(image, image_id, &detections, models)?;
    Ok(ImageOutcome { detections, result })
}

pub fn run_pipeline(image: &Raster, image_id: &str, models: &PipelineModels) -> Result<PipelineResult> {
    Ok(run_pipeline_traced(image, image_id, models)?.result)
}

/// Stage-1 detections in prediction-file form (no diagnoses).
pub fn detections_as_result(image_id: &str, detections: &[Detection]) -> PipelineResult {
    PipelineResult {
        image_id: image_id.to_string(),
        teeth: detections
            .iter()
            .map(|d| ToothPrediction {
                bbox: d.bbox,
                tooth: d.tooth(),
                confidence: d.confidence,
                diagnosis_probs: [0.0; 4],
                diagnoses: Default::default(),
            })
            .collect(),
    }
}

/// Images to run a batch over.
pub enum BatchSource<'a> {
    Dataset(&'a Dataset),
    Directory(PathBuf),
    Files(Vec<PathBuf>),
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

impl BatchSource<'_> {
    /// (image id, path) pairs in a deterministic order.
    fn entries(&self) -> Result<Vec<(String, PathBuf)>> {
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        Ok(match self {
            BatchSource::Dataset(ds) => ds.images.iter().map(|im| (im.id.clone(), ds.image_path(im))).collect(),
            BatchSource::Directory(dir) => {
                let listing =
                    fs::read_dir(dir).map_err(|e| Error::Domain(format!("cannot list {}: {e}", dir.display())))?;
                let mut files: Vec<PathBuf> = listing
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .and_then(|x| x.to_str())
                            .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                    })
                    .collect();
                files.sort();
                files.into_iter().map(|p| (stem(&p), p)).collect()
            }
            BatchSource::Files(files) => files.iter().map(|p| (stem(p), p.clone())).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub image_id: String,
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub results: Vec<PipelineResult>,
    /// Stage-1 detections per successful image.
    pub detections: Vec<PipelineResult>,
    pub failures: Vec<BatchFailure>,
}

/// Runs the cascade over every image, isolating per-image failures, and
/// writes the successful results to `out_path`.
pub fn run_batch(source: &BatchSource, models: &PipelineModels, out_path: &Path) -> Result<BatchOutput> {
    let entries = source.entries()?;
    if entries.is_empty() {
        return Err(Error::Domain("batch contains no images".into()));
    }
    let mut out = BatchOutput {
        results: Vec::new(),
        detections: Vec::new(),
        failures: Vec::new(),
    };
    for (id, path) in entries {
        let outcome = Raster::load(&path)
            .map_err(Error::from)
            .and_then(|image| run_pipeline_traced(&image, &id, models));
        match outcome {
            Ok(o) => {
                log::info!(
                    "{id}: {} detections, {} abnormal",
                    o.detections.len(),
                    o.result.teeth.len()
                );
                out.detections.push(detections_as_result(&id, &o.detections));
                out.results.push(o.result);
            }
            Err(e) => {
                log::warn!("{id}: {e}");
                out.failures.push(BatchFailure {
                    image_id: id,
                    path,
                    error: e.to_string(),
                });
            }
        }
    }
    if out.results.is_empty() {
        return Err(Error::Domain(format!(
            "all {} images failed; first error: {}",
            out.failures.len(),
            out.failures[0].error
        )));
    }
    write_predictions(&out.results, out_path)?;
    Ok(out)
}
