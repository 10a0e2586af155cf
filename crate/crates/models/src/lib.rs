//! Learned stages of the dental cascade: tooth detector, lesion segmenter,
//! hybrid healthy-filter and diagnosis classifiers, and the pipeline that
//! chains them.

pub mod artifact;
pub mod detector;
pub mod error;
pub mod hybrid;
pub mod nn;
pub mod pipeline;
pub mod segmenter;

pub use artifact::{ModelArtifact, Stage, FORMAT_VERSION};
pub use detector::{nms, train_detector, DetectParams, Detector, DetectorConfig};
pub use error::{Error, Result};
pub use hybrid::{
    build_hybrid, predict_diagnoses, predict_filter, train_diagnoser, train_filter, CropLabel, CropSample,
    HybridConfig, HybridModel,
};
pub use pipeline::{run_batch, run_pipeline, BatchOutput, BatchSource, PipelineModels, Thresholds};
pub use segmenter::{combined_loss, dice_loss, extract_encoder, train_segmenter, EncoderHandle, SegConfig, Segmenter};
