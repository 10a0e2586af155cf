//! Dual-path crop classifier: a transplanted segmentation encoder and a
//! VGG16-layout convolutional path, pooled, concatenated and fed to a small
//! fully connected head. Instantiated as the healthy/abnormal filter (one
//! output) and as the multi-label diagnoser (four outputs).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Linear, Optimizer};
use dentcascade_core::corpus::{mine_tooth_labels, CropSpec, Dataset};
use dentcascade_core::seeding::rng_from;
use dentcascade_core::{Diagnosis, DiagnosisSet, Raster};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, Stage};
use crate::error::{Error, Result};
use crate::nn::{self, conv, conv_relu, dense, Init, ParamStore, DEVICE};
use crate::segmenter::{check_crop, global_pool, is_encoder_tensor, Encoder, EncoderHandle, Pooling, SegArch};

/// Convolutions per block in the VGG16 feature extractor.
pub const VGG16_BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];

const ENCODER_PREFIX: &str = "encoder.";
const INIT_STREAM: u64 = 0x4B1D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    /// 1 for the abnormality filter, 4 for the diagnoser.
    pub num_outputs: usize,
    pub freeze_encoder: bool,
    pub head_widths: [usize; 2],
    /// Channel width of each of the five VGG16 blocks.
    pub deep_channels: [usize; 5],
    /// Optional safetensors file with deep-path weights, either under this
    /// crate's names (`deep.block{b}.conv{i}.weight`) or torchvision's
    /// `features.{n}.weight` layout.
    pub pretrained_deep_path: Option<PathBuf>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub decision_threshold: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            num_outputs: 1,
            freeze_encoder: true,
            head_widths: [512, 128],
            deep_channels: [16, 32, 64, 128, 128],
            pretrained_deep_path: None,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            decision_threshold: 0.5,
        }
    }
}

impl HybridConfig {
    pub fn filter() -> Self {
        Self::default()
    }

    pub fn diagnoser() -> Self {
        Self {
            num_outputs: Diagnosis::COUNT,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outputs != 1 && self.num_outputs != Diagnosis::COUNT {
            return Err(Error::config(format!(
                "num_outputs must be 1 or 4, got {}",
                self.num_outputs
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config(format!(
                "decision_threshold must lie in (0, 1), got {}",
                self.decision_threshold
            )));
        }
        if self.head_widths.contains(&0) || self.deep_channels.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    fn stage(&self) -> Stage {
        if self.num_outputs == 1 {
            Stage::Filter
        } else {
            Stage::Diagnoser
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridArch {
    pub encoder: SegArch,
    pub deep_channels: [usize; 5],
    pub head_widths: [usize; 2],
    pub num_outputs: usize,
}

impl HybridArch {
    pub fn crop(&self) -> CropSpec {
        self.encoder.crop
    }

    pub fn fusion_width(&self) -> usize {
        self.encoder.feature_width() + self.deep_channels[4]
    }
}

struct HybridNet {
    encoder: Encoder,
    deep: Vec<Vec<Conv2d>>,
    fc: [Linear; 2],
    out: Linear,
}

impl HybridNet {
    fn build(ps: &mut ParamStore, arch: &HybridArch) -> Result<Self> {
        let encoder = Encoder::build(ps, ENCODER_PREFIX, &arch.encoder)?;
        let mut deep = Vec::new();
        let mut c_in = 1;
        for (b, (&n, &c)) in VGG16_BLOCKS.iter().zip(&arch.deep_channels).enumerate() {
            let mut block = Vec::new();
            for i in 0..n {
                block.push(conv(ps, &deep_name(b, i), c_in, c, 3, 1)?);
                c_in = c;
            }
            deep.push(block);
        }
        let [h0, h1] = arch.head_widths;
        let fc = [
            dense(ps, "head.fc0", arch.fusion_width(), h0, Init::He(arch.fusion_width()))?,
            dense(ps, "head.fc1", h0, h1, Init::He(h0))?,
        ];
        let out = nn::dense_with_bias(ps, "head.out", h1, arch.num_outputs, 0.0)?;
        Ok(Self { encoder, deep, fc, out })
    }

    fn deep_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.deep {
            for c in block {
                h = conv_relu(&h, c)?;
            }
            // Blocks past the point where the map is 1x1 keep the resolution.
            let (_, _, hh, ww) = h.dims4()?;
            if hh >= 2 && ww >= 2 {
                h = h.max_pool2d(2)?;
            }
        }
        global_pool(&h, Pooling::Average)
    }

    fn head(&self, enc: &Tensor, deep: &Tensor) -> Result<Tensor> {
        let f = Tensor::cat(&[enc, deep], 1)?;
        let h = self.fc[0].forward(&f)?.relu()?;
        let h = self.fc[1].forward(&h)?.relu()?;
        Ok(self.out.forward(&h)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head(&self.encoder.features(x)?, &self.deep_features(x)?)
    }
}

fn deep_name(block: usize, conv: usize) -> String {
    format!("deep.block{block}.conv{conv}")
}

/// Torchvision's VGG16 `features` index of each convolution, in order.
fn torchvision_vgg16_names() -> Vec<String> {
    let mut names = Vec::new();
    let mut idx = 0;
    for &n in &VGG16_BLOCKS {
        for _ in 0..n {
            names.push(format!("features.{idx}"));
            idx += 2;
        }
        idx += 1;
    }
    names
}

/// Loads deep-path weights into `ps`. Three-channel first-layer kernels are
/// summed over colour so they apply to grayscale crops.
fn load_pretrained_deep(ps: &mut ParamStore, path: &Path, arch: &HybridArch) -> Result<()> {
    let raw = candle_core::safetensors::load(path, &DEVICE)
        .map_err(|e| Error::artifact(path, format!("cannot read pretrained weights: {e}")))?;
    let ours: Vec<String> = VGG16_BLOCKS
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (0..n).map(move |i| deep_name(b, i)))
        .collect();
    let theirs = torchvision_vgg16_names();
    let source = if raw.contains_key(&format!("{}.weight", ours[0])) {
        &ours
    } else if raw.contains_key(&format!("{}.weight", theirs[0])) {
        &theirs
    } else {
        return Err(Error::artifact(path, "no recognised VGG16 convolution weights"));
    };
    let mut c_in = 1;
    let widths = VGG16_BLOCKS
        .iter()
        .zip(&arch.deep_channels)
        .flat_map(|(&n, &c)| std::iter::repeat_n(c, n));
    for ((dst, src), c) in ours.iter().zip(source).zip(widths) {
        let get = |suffix: &str| {
            raw.get(&format!("{src}.{suffix}"))
                .ok_or_else(|| Error::artifact(path, format!("missing {src}.{suffix}")))
        };
        let mut w = get("weight")?.clone();
        if c_in == 1 && w.dim(1)? == 3 {
            w = w.sum_keepdim(1)?;
        }
        if w.dims() != [c, c_in, 3, 3] {
            return Err(Error::artifact(
                path,
                format!(
                    "{src}.weight has shape {:?}, deep path needs {:?}",
                    w.dims(),
                    [c, c_in, 3, 3]
                ),
            ));
        }
        ps.insert(&format!("{dst}.weight"), &w)?;
        ps.insert(&format!("{dst}.bias"), get("bias")?)?;
        c_in = c;
    }
    Ok(())
}

fn init_store(encoder: &EncoderHandle, cfg: &HybridConfig, arch: &HybridArch) -> Result<ParamStore> {
    let mut ps = ParamStore::seeded(rng_from(&[cfg.seed, INIT_STREAM]));
    for (name, t) in encoder.tensors() {
        ps.insert(&format!("{ENCODER_PREFIX}{name}"), t)?;
    }
    if let Some(path) = &cfg.pretrained_deep_path {
        load_pretrained_deep(&mut ps, path, arch)?;
    }
    Ok(ps)
}

fn arch_of(encoder: &EncoderHandle, cfg: &HybridConfig) -> Result<HybridArch> {
    if encoder.width() == 0 {
        return Err(Error::Domain("encoder has no feature width".into()));
    }
    Ok(HybridArch {
        encoder: *encoder.arch(),
        deep_channels: cfg.deep_channels,
        head_widths: cfg.head_widths,
        num_outputs: cfg.num_outputs,
    })
}

/// An untrained hybrid model around `encoder`.
pub fn build_hybrid(encoder: &EncoderHandle, cfg: &HybridConfig) -> Result<ModelArtifact> {
    cfg.validate()?;
    let arch = arch_of(encoder, cfg)?;
    let mut ps = init_store(encoder, cfg, &arch)?;
    HybridNet::build(&mut ps, &arch)?;
    ModelArtifact::new(cfg.stage(), &arch, cfg, Vec::new(), ps.tensors())
}

/// Training target of one crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropLabel {
    Abnormal(bool),
    Diagnoses(DiagnosisSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub crop: Raster,
    pub label: CropLabel,
}

fn crops_for(teeth: &[(PathBuf, dentcascade_core::BBox)], crop: &CropSpec) -> Result<Vec<Raster>> {
    let mut cache: HashMap<&Path, Raster> = HashMap::new();
    let mut out = Vec::with_capacity(teeth.len());
    for (path, bbox) in teeth {
        if !cache.contains_key(path.as_path()) {
            cache.insert(path, Raster::load(path)?);
        }
        out.push(crop.crop(&cache[path.as_path()], bbox)?);
    }
    Ok(out)
}

/// Healthy/abnormal crops mined from an enumeration and a diagnosis corpus.
pub fn filter_samples(enumeration: &Dataset, diagnosis: &Dataset, crop: &CropSpec) -> Result<Vec<CropSample>> {
    let teeth = mine_tooth_labels(enumeration, diagnosis)?;
    let boxes: Vec<_> = teeth.iter().map(|t| (t.image_path.clone(), t.bbox)).collect();
    Ok(crops_for(&boxes, crop)?
        .into_iter()
        .zip(&teeth)
        .map(|(crop, t)| CropSample {
            crop,
            label: CropLabel::Abnormal(!t.diagnoses.is_empty()),
        })
        .collect())
}

/// Abnormal-tooth crops with their diagnosis sets.
pub fn diagnoser_samples(diagnosis: &Dataset, crop: &CropSpec) -> Result<Vec<CropSample>> {
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for image in &diagnosis.images {
        for ann in &image.annotations {
            boxes.push((diagnosis.image_path(image), ann.bbox));
            labels.push(ann.diagnoses.unwrap_or_default());
        }
    }
    Ok(crops_for(&boxes, crop)?
        .into_iter()
        .zip(labels)
        .map(|(crop, d)| CropSample {
            crop,
            label: CropLabel::Diagnoses(d),
        })
        .collect())
}

fn train_hybrid(
    samples: &[CropSample],
    targets: Vec<f32>,
    encoder: &EncoderHandle,
    cfg: &HybridConfig,
) -> Result<ModelArtifact> {
    let arch = arch_of(encoder, cfg)?;
    let s = arch.crop().size;
    for sample in samples {
        check_crop(&sample.crop, s)?;
    }
    let n = samples.len();
    let refs: Vec<&[f32]> = samples.iter().map(|c| c.crop.data()).collect();
    let x = nn::images_to_tensor(&refs, s, s)?;
    let y = Tensor::from_vec(targets, (n, cfg.num_outputs), &DEVICE)?;

    let mut ps = init_store(encoder, cfg, &arch)?;
    let net = HybridNet::build(&mut ps, &arch)?;
    // A frozen encoder yields fixed features, so they are computed once.
    let cached = if cfg.freeze_encoder {
        ps.freeze_prefix(ENCODER_PREFIX);
        let mut parts = Vec::new();
        for start in (0..n).step_by(64) {
            let len = 64.min(n - start);
            parts.push(net.encoder.features(&x.narrow(0, start, len)?)?.detach());
        }
        Some(Tensor::cat(&parts, 0)?)
    } else {
        None
    };
    let mut opt = nn::adamw(ps.trainable(), cfg.learning_rate)?;
    log::info!("{}: {n} crops, fusion width {}", cfg.stage(), arch.fusion_width());

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng_from(&[cfg.seed, INIT_STREAM, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let idx = Tensor::new(batch, &DEVICE)?;
            let xb = x.index_select(&idx, 0)?;
            let enc = match &cached {
                Some(f) => f.index_select(&idx, 0)?,
                None => net.encoder.features(&xb)?,
            };
            let logits = net.head(&enc, &net.deep_features(&xb)?)?;
            let loss = nn::bce_with_logits(&logits, &y.index_select(&idx, 0)?)?;
            opt.backward_step(&loss)?;
            total += nn::scalar(&loss)? * batch.len() as f64;
        }
        let mean = total / n as f64;
        log::info!("{} epoch {}/{}: loss {mean:.5}", cfg.stage(), epoch + 1, cfg.epochs);
        trace.push(mean);
    }
    ModelArtifact::new(cfg.stage(), &arch, cfg, trace, ps.tensors())
}

/// Trains the healthy/abnormal filter with binary cross-entropy.
pub fn train_filter(data: &[CropSample], encoder: &EncoderHandle, cfg: &HybridConfig) -> Result<ModelArtifact> {
    cfg.validate()?;
    if cfg.num_outputs != 1 {
        return Err(Error::config("the filter needs num_outputs = 1"));
    }
    let mut targets = Vec::with_capacity(data.len());
    for s in data {
        match s.label {
            CropLabel::Abnormal(a) => targets.push(a as u8 as f32),
            CropLabel::Diagnoses(_) => return Err(Error::data("filter samples must carry binary labels")),
        }
    }
    let positives = targets.iter().filter(|&&t| t > 0.5).count();
    if positives == 0 || positives == targets.len() {
        return Err(Error::config(format!(
            "filter training needs healthy and abnormal crops, got {positives} abnormal of {}",
            targets.len()
        )));
    }
    train_hybrid(data, targets, encoder, cfg)
}

/// Trains the four-label diagnoser with mean per-label binary cross-entropy.
pub fn train_diagnoser(data: &[CropSample], encoder: &EncoderHandle, cfg: &HybridConfig) -> Result<ModelArtifact> {
    cfg.validate()?;
    if cfg.num_outputs != Diagnosis::COUNT {
        return Err(Error::config("the diagnoser needs num_outputs = 4"));
    }
    if data.is_empty() {
        return Err(Error::config("no diagnosis crops to train on"));
    }
    let mut targets = Vec::with_capacity(data.len() * Diagnosis::COUNT);
    for (i, s) in data.iter().enumerate() {
        match s.label {
            CropLabel::Diagnoses(d) if !d.is_empty() => targets.extend(d.to_indicator()),
            CropLabel::Diagnoses(_) => return Err(Error::data(format!("crop {i} has an empty diagnosis set"))),
            CropLabel::Abnormal(_) => return Err(Error::data("diagnoser samples must carry diagnosis sets")),
        }
    }
    train_hybrid(data, targets, encoder, cfg)
}

/// A trained filter or diagnoser ready for inference.
pub struct HybridModel {
    stage: Stage,
    arch: HybridArch,
    config: HybridConfig,
    net: HybridNet,
    tensors: BTreeMap<String, Tensor>,
}

impl HybridModel {
    pub fn from_artifact(model: &ModelArtifact) -> Result<Self> {
        let stage = model.stage();
        if !matches!(stage, Stage::Filter | Stage::Diagnoser) {
            return Err(Error::Stage {
                expected: Stage::Filter,
                found: stage,
            });
        }
        let arch: HybridArch = model.arch()?;
        let config: HybridConfig = model.config()?;
        let mut ps = ParamStore::from_tensors(model.tensors.clone());
        let net = HybridNet::build(&mut ps, &arch)?;
        Ok(Self {
            stage,
            arch,
            config,
            net,
            tensors: model.tensors.clone(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn arch(&self) -> &HybridArch {
        &self.arch
    }

    pub fn crop_spec(&self) -> CropSpec {
        self.arch.crop()
    }

    pub fn default_threshold(&self) -> f64 {
        self.config.decision_threshold
    }

    /// Encoder weights embedded in this model, under the segmenter's names.
    pub fn encoder_tensors(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(ENCODER_PREFIX).map(|k| (k.to_string(), t.clone())))
            .filter(|(n, _)| is_encoder_tensor(n))
            .collect()
    }

    pub fn encoder_handle(&self) -> Result<EncoderHandle> {
        EncoderHandle::new(self.arch.encoder, self.encoder_tensors())
    }

    /// Sigmoid outputs for one crop. Crops are always evaluated alone, so a
    /// result never depends on what else is being classified.
    pub fn probabilities(&self, crop: &Raster) -> Result<Vec<f64>> {
        let s = self.arch.crop().size;
        check_crop(crop, s)?;
        let x = nn::images_to_tensor(&[crop.data()], s, s)?;
        let p = candle_nn::ops::sigmoid(&self.net.logits(&x)?)?;
        Ok(p.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(())
}

/// Abnormality probability and verdict (`probability >= threshold`).
pub fn predict_filter(model: &HybridModel, crop: &Raster, threshold: f64) -> Result<(f64, bool)> {
    if model.stage != Stage::Filter {
        return Err(Error::Stage {
            expected: Stage::Filter,
            found: model.stage,
        });
    }
    check_threshold(threshold)?;
    let p = model.probabilities(crop)?[0];
    Ok((p, p >= threshold))
}

/// Labels at or above `threshold`; when none qualify, the single most
/// probable label (lowest code on ties).
pub fn decide_diagnoses(probs: &[f64; 4], threshold: f64) -> DiagnosisSet {
    let mut set = DiagnosisSet::empty();
    for d in Diagnosis::ALL {
        if probs[d.code()] >= threshold {
            set.insert(d);
        }
    }
    if set.is_empty() {
        let mut best = Diagnosis::ALL[0];
        for d in Diagnosis::ALL {
            if probs[d.code()] > probs[best.code()] {
                best = d;
            }
        }
        set.insert(best);
    }
    set
}

pub fn predict_diagnoses(model: &HybridModel, crop: &Raster, threshold: f64) -> Result<([f64; 4], DiagnosisSet)> {
    if model.stage != Stage::Diagnoser {
        return Err(Error::Stage {
            expected: Stage::Diagnoser,
            found: model.stage,
        });
    }
    check_threshold(threshold)?;
    let p = model.probabilities(crop)?;
    let probs = [p[0], p[1], p[2], p[3]];
    Ok((probs, decide_diagnoses(&probs, threshold)))
}
