//! Core of the dental cascade toolkit: the FDI tooth vocabulary, annotation
//! corpora and crops, the synthetic toy corpus, label-consistent
//! augmentation, and the AP/F1 metrics used to score every stage.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod raster;
pub mod seeding;
pub mod synthetic;
pub mod types;

pub use corpus::{
    crop_tooth, load_corpus, read_predictions, write_corpus, write_predictions, AnnotationRecord, CorpusKind, CropSpec,
    Dataset, ImageRecord, PipelineResult, ToothPrediction,
};
pub use error::{Error, Result};
pub use raster::Raster;
pub use types::{iou, BBox, Detection, Diagnosis, DiagnosisSet, ToothLabel, NUM_TOOTH_CLASSES};
