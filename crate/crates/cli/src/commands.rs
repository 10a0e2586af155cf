use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dentcascade_core::augment::AugPolicy;
use dentcascade_core::corpus::{load_corpus, read_predictions, write_predictions, CorpusKind};
use dentcascade_core::metrics::{ap_summary, cascade_scores, detection_instances, Averaging, EvalReport};
use dentcascade_core::synthetic::{generate_toy_corpus, ToyConfig, DIAGNOSIS_FILE, ENUMERATION_FILE, MASK_FILE};
use dentcascade_models::artifact::{ModelArtifact, Stage};
use dentcascade_models::hybrid::{diagnoser_samples, filter_samples};
use dentcascade_models::pipeline::{run_batch, BatchSource, PipelineModels, Thresholds};
use dentcascade_models::{
    extract_encoder, train_detector as fit_detector, train_diagnoser as fit_diagnoser, train_filter as fit_filter,
    train_segmenter as fit_segmenter, DetectorConfig, HybridConfig, SegConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, Overrides};
use crate::manifest::RunManifest;
use crate::{
    DetectionFlags, EvaluateArgs, GenToyArgs, HybridFlags, PredictArgs, TrainDetectorArgs, TrainDiagnoserArgs,
    TrainFilterArgs, TrainSegmenterArgs, Training,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Directory holding `file`, created if needed.
fn parent_dir(file: &Path) -> Result<PathBuf> {
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok(dir)
}

fn training_overrides(t: &Training) -> Overrides {
    let mut o = Overrides::default();
    o.set("epochs", t.epochs)
        .set("learning_rate", t.lr)
        .set("batch_size", t.batch_size)
        .set("seed", t.run.seed);
    o
}

fn detection_overrides(o: &mut Overrides, d: &DetectionFlags) {
    o.set("score_threshold", d.score_threshold)
        .set("nms_iou", d.nms_iou)
        .set("max_per_class", d.max_per_class.map(|l| l.as_option()));
}

/// Saves a trained artifact as `<out>/<stage>.safetensors` with its manifest.
fn finish_training(artifact: &ModelArtifact, out: &Path, mut manifest: RunManifest) -> Result<()> {
    create_dir(out)?;
    let path = out.join(format!("{}.safetensors", artifact.stage()));
    artifact.save(&path)?;
    let trace = artifact.loss_trace();
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        log::info!("loss {first:.5} -> {last:.5} over {} epochs", trace.len());
    }
    manifest.output("artifact", &path).detail("loss_trace", &trace)?;
    let m = manifest.write(out)?;
    log::info!("wrote {} and {}", path.display(), m.display());
    Ok(())
}

pub fn gen_toy(a: GenToyArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("n_images", a.n_images)
        .set("width", a.width)
        .set("height", a.height)
        .set("abnormal_rate", a.abnormal_rate)
        .set("missing_rate", a.missing_rate)
        .set("seed", a.run.seed)
        .set("crop.size", a.crop_size)
        .set("crop.pad_fraction", a.pad_fraction);
    let (cfg, _) = resolve("gen-toy", &ToyConfig::default(), a.run.common.config.as_deref(), o)?;
    create_dir(&a.out)?;
    let corpus = generate_toy_corpus(&cfg, &a.out)?;
    log::info!(
        "{} images, {} teeth, {} abnormal",
        corpus.enumeration.len(),
        corpus.enumeration.annotation_count(),
        corpus.diagnosis.annotation_count()
    );
    let mut m = RunManifest::new("gen-toy", &cfg, Some(cfg.seed))?;
    m.output("enumeration", &a.out.join(ENUMERATION_FILE))
        .output("diagnosis", &a.out.join(DIAGNOSIS_FILE))
        .output("masks", &a.out.join(MASK_FILE));
    m.write(&a.out)?;
    Ok(())
}

pub fn train_segmenter(a: TrainSegmenterArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, CorpusKind::Mask)?;
    let mut o = training_overrides(&a.train);
    o.set("crop_size", a.crop_size)
        .set("encoder_depth", a.encoder_depth)
        .set("base_channels", a.base_channels)
        .set("encoder_pooling", a.pooling);
    let crop_flag = o.contains("crop_size");
    let (mut cfg, file_keys): (SegConfig, _) = resolve(
        "train-segmenter",
        &SegConfig::default(),
        a.train.run.common.config.as_deref(),
        o,
    )?;
    if !crop_flag && !file_keys.iter().any(|k| k == "crop_size") {
        if let Some(crop) = corpus.crop {
            cfg.crop_size = crop.size;
        }
    }
    let artifact = fit_segmenter(&corpus, &cfg)?;
    let mut m = RunManifest::new("train-segmenter", &cfg, Some(cfg.seed))?;
    m.input("corpus", &a.corpus);
    finish_training(&artifact, &a.train.out, m)
}

pub fn train_detector(a: TrainDetectorArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, CorpusKind::Enumeration)?;
    let mut o = training_overrides(&a.train);
    detection_overrides(&mut o, &a.detection);
    if a.no_augment {
        o.set("augment", Some(AugPolicy::none()));
    }
    let (cfg, _): (DetectorConfig, _) = resolve(
        "train-detector",
        &DetectorConfig::default(),
        a.train.run.common.config.as_deref(),
        o,
    )?;
    let artifact = fit_detector(&corpus, &cfg)?;
    let mut m = RunManifest::new("train-detector", &cfg, Some(cfg.seed))?;
    m.input("corpus", &a.corpus);
    finish_training(&artifact, &a.train.out, m)
}

fn hybrid_config(subcommand: &str, defaults: HybridConfig, h: &HybridFlags) -> Result<HybridConfig> {
    let mut o = training_overrides(&h.train);
    o.set("decision_threshold", h.threshold)
        .set("freeze_encoder", h.unfreeze_encoder.then_some(false))
        .set("pretrained_deep_path", h.pretrained_deep.as_ref())
        .set("deep_channels", h.deep_channels.as_ref());
    Ok(resolve(subcommand, &defaults, h.train.run.common.config.as_deref(), o)?.0)
}

pub fn train_filter(a: TrainFilterArgs) -> Result<()> {
    let h = &a.hybrid;
    let cfg = hybrid_config("train-filter", HybridConfig::filter(), h)?;
    let encoder = extract_encoder(&ModelArtifact::load_stage(&h.segmenter, Stage::Segmenter)?)?;
    let enumeration = load_corpus(&a.enumeration, CorpusKind::Enumeration)?;
    let diagnosis = load_corpus(&h.diagnosis, CorpusKind::Diagnosis)?;
    let samples = filter_samples(&enumeration, &diagnosis, &encoder.crop_spec())?;
    log::info!("{} tooth crops", samples.len());
    let artifact = fit_filter(&samples, &encoder, &cfg)?;
    let mut m = RunManifest::new("train-filter", &cfg, Some(cfg.seed))?;
    m.input("segmenter", &h.segmenter)
        .input("enumeration", &a.enumeration)
        .input("diagnosis", &h.diagnosis);
    finish_training(&artifact, &h.train.out, m)
}

pub fn train_diagnoser(a: TrainDiagnoserArgs) -> Result<()> {
    let h = &a.hybrid;
    let cfg = hybrid_config("train-diagnoser", HybridConfig::diagnoser(), h)?;
    let encoder = extract_encoder(&ModelArtifact::load_stage(&h.segmenter, Stage::Segmenter)?)?;
    let diagnosis = load_corpus(&h.diagnosis, CorpusKind::Diagnosis)?;
    let samples = diagnoser_samples(&diagnosis, &encoder.crop_spec())?;
    log::info!("{} abnormal tooth crops", samples.len());
    let artifact = fit_diagnoser(&samples, &encoder, &cfg)?;
    let mut m = RunManifest::new("train-diagnoser", &cfg, Some(cfg.seed))?;
    m.input("segmenter", &h.segmenter).input("diagnosis", &h.diagnosis);
    finish_training(&artifact, &h.train.out, m)
}

/// Inference thresholds; defaults come from the loaded artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictConfig {
    score_threshold: f64,
    nms_iou: f64,
    max_per_class: Option<usize>,
    filter_threshold: f64,
    diagnosis_threshold: f64,
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let models = PipelineModels::load(&a.detector, &a.filter, &a.diagnoser)?;
    let t = models.thresholds;
    let defaults = PredictConfig {
        score_threshold: t.detection.score_threshold,
        nms_iou: t.detection.nms_iou,
        max_per_class: t.detection.max_per_class,
        filter_threshold: t.filter,
        diagnosis_threshold: t.diagnosis,
    };
    let mut o = Overrides::default();
    detection_overrides(&mut o, &a.detection);
    o.set("filter_threshold", a.filter_threshold)
        .set("diagnosis_threshold", a.diagnosis_threshold);
    let (cfg, _) = resolve("predict", &defaults, a.common.config.as_deref(), o)?;
    let mut detection = t.detection;
    detection.score_threshold = cfg.score_threshold;
    detection.nms_iou = cfg.nms_iou;
    detection.max_per_class = cfg.max_per_class;
    detection.validate()?;
    let thresholds = Thresholds {
        detection,
        filter: cfg.filter_threshold,
        diagnosis: cfg.diagnosis_threshold,
    };
    for (name, v) in [
        ("filter_threshold", thresholds.filter),
        ("diagnosis_threshold", thresholds.diagnosis),
    ] {
        anyhow::ensure!(v > 0.0 && v < 1.0, "{name} must lie in (0, 1), got {v}");
    }
    let models = models.with_thresholds(thresholds);

    let mut m = RunManifest::new("predict", &cfg, None)?;
    m.input("detector", &a.detector)
        .input("filter", &a.filter)
        .input("diagnoser", &a.diagnoser);
    let corpus;
    let source = if let Some(path) = &a.corpus {
        m.input("corpus", path);
        corpus = load_corpus(path, CorpusKind::Enumeration)?;
        BatchSource::Dataset(&corpus)
    } else if let Some(dir) = &a.images {
        m.input("images", dir);
        BatchSource::Directory(dir.clone())
    } else {
        for (i, p) in a.image.iter().enumerate() {
            m.input(&format!("image_{i}"), p);
        }
        BatchSource::Files(a.image.clone())
    };

    let dir = parent_dir(&a.out)?;
    let out = run_batch(&source, &models, &a.out)?;
    m.output("predictions", &a.out);
    if let Some(path) = &a.detections_out {
        parent_dir(path)?;
        write_predictions(&out.detections, path)?;
        m.output("detections", path);
    }
    let emitted: usize = out.results.iter().map(|r| r.teeth.len()).sum();
    log::info!(
        "{} images, {} abnormal teeth reported, {} failed",
        out.results.len(),
        emitted,
        out.failures.len()
    );
    m.detail("thresholds", &thresholds)?;
    if !out.failures.is_empty() {
        m.detail("failures", &out.failures)?;
    }
    m.write(&dir)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalConfig {
    averaging: Averaging,
    decimals: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            averaging: Averaging::Macro,
            decimals: 2,
        }
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("averaging", a.averaging).set("decimals", a.decimals);
    let (cfg, _) = resolve("evaluate", &EvalConfig::default(), a.common.config.as_deref(), o)?;

    let preds = read_predictions(&a.preds)?;
    let gt = load_corpus(&a.gt, CorpusKind::Enumeration)?;
    let detected = match &a.detections {
        Some(path) => read_predictions(path)?,
        None => preds.clone(),
    };
    let detection = ap_summary(&detection_instances(&detected, &gt)).context("detection AP")?;
    let cascade = match &a.diagnosis_gt {
        Some(path) => {
            let diagnosis = load_corpus(path, CorpusKind::Diagnosis)?;
            Some(cascade_scores(&preds, &gt, &diagnosis, cfg.averaging)?)
        }
        None => None,
    };
    let report = EvalReport {
        detection: Some(detection),
        cascade,
        averaging: cfg.averaging,
    };
    let table = report.render_table(cfg.decimals);
    print!("{table}");

    let mut m = RunManifest::new("evaluate", &cfg, None)?;
    m.input("preds", &a.preds).input("gt", &a.gt);
    if let Some(p) = &a.diagnosis_gt {
        m.input("diagnosis_gt", p);
    }
    if let Some(p) = &a.detections {
        m.input("detections", p);
    }
    let mut dir = None;
    if let Some(path) = &a.out {
        dir = Some(parent_dir(path)?);
        let text = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        m.output("report", path);
    }
    if let Some(path) = &a.table_out {
        let d = parent_dir(path)?;
        dir.get_or_insert(d);
        fs::write(path, &table).with_context(|| format!("cannot write {}", path.display()))?;
        m.output("table", path);
    }
    if let Some(dir) = dir {
        m.write(&dir)?;
    }
    Ok(())
}
