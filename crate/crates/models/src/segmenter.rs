//! Lesion segmentation on tooth crops with a U-net, and extraction of its
//! encoder as a reusable feature path.

use std::collections::BTreeMap;

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Optimizer};
use dentcascade_core::corpus::{CorpusKind, CropSpec, Dataset};
use dentcascade_core::seeding::rng_from;
use dentcascade_core::Raster;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, Stage};
use crate::error::{Error, Result};
use crate::nn::{self, conv, conv_relu, ParamStore, DEVICE};

pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the cross-entropy term.
pub const BCE_CLAMP: f64 = 1e-7;

const INIT_STREAM: u64 = 0x5E6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub epsilon: f64,
    /// How the bottleneck map is reduced to the encoder feature vector.
    pub encoder_pooling: Pooling,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 8,
            crop_size: 128,
            encoder_depth: 4,
            base_channels: 16,
            epsilon: DEFAULT_EPSILON,
            encoder_pooling: Pooling::Average,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.encoder_depth == 0 || self.base_channels == 0 {
            return Err(Error::config("encoder_depth and base_channels must be positive"));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(1 << self.encoder_depth) {
            return Err(Error::config(format!(
                "crop_size {} is not divisible by 2^{}",
                self.crop_size, self.encoder_depth
            )));
        }
        Ok(())
    }
}

/// Architecture stored with a segmenter artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegArch {
    pub crop: CropSpec,
    pub depth: usize,
    pub base_channels: usize,
    pub pooling: Pooling,
}

impl SegArch {
    pub fn feature_width(&self) -> usize {
        self.base_channels << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

fn check_pair(probs: &[f32], mask: &[bool]) -> Result<()> {
    if probs.len() != mask.len() {
        return Err(Error::Domain(format!(
            "probability map has {} pixels but the mask has {}",
            probs.len(),
            mask.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss_with(probs: &[f32], mask: &[bool], epsilon: f64) -> Result<f64> {
    check_pair(probs, mask)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(mask) {
        let p = p as f64;
        sp += p;
        if g {
            inter += p;
            sg += 1.0;
        }
    }
    Ok(1.0 - (2.0 * inter + epsilon) / (sp + sg + epsilon))
}

pub fn dice_loss(probs: &[f32], mask: &[bool]) -> Result<f64> {
    dice_loss_with(probs, mask, DEFAULT_EPSILON)
}

/// Mean of pixel-averaged clamped BCE and Dice loss.
pub fn combined_loss_with(probs: &[f32], mask: &[bool], epsilon: f64) -> Result<f64> {
    let dice = dice_loss_with(probs, mask, epsilon)?;
    let mut bce = 0.0;
    for (&p, &g) in probs.iter().zip(mask) {
        let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= if g { p.ln() } else { (1.0 - p).ln() };
    }
    bce /= probs.len().max(1) as f64;
    Ok((bce + dice) / 2.0)
}

pub fn combined_loss(probs: &[f32], mask: &[bool]) -> Result<f64> {
    combined_loss_with(probs, mask, DEFAULT_EPSILON)
}

/// Differentiable Dice loss over every element of the tensors (the whole batch
/// counts as one region).
pub fn dice_loss_tensor(probs: &Tensor, mask: &Tensor, epsilon: f64) -> Result<Tensor> {
    let inter = probs.mul(mask)?.sum_all()?;
    let total = (probs.sum_all()? + mask.sum_all()?)?;
    let ratio = inter.affine(2.0, epsilon)?.div(&total.affine(1.0, epsilon)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

pub fn combined_loss_tensor(probs: &Tensor, mask: &Tensor, epsilon: f64) -> Result<Tensor> {
    let p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = mask.mul(&p.log()?)?;
    let neg = mask.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    let bce = (pos + neg)?.mean_all()?.neg()?;
    let dice = dice_loss_tensor(probs, mask, epsilon)?;
    Ok(((bce + dice)? * 0.5)?)
}

pub(crate) fn global_pool(x: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let flat = x.flatten_from(2)?;
    Ok(match pooling {
        Pooling::Average => flat.mean(D::Minus1)?,
        Pooling::Max => flat.max(D::Minus1)?,
    })
}

/// Downsampling half of the U-net, up to and including the bottleneck.
pub(crate) struct Encoder {
    levels: Vec<(Conv2d, Conv2d)>,
    bottleneck: (Conv2d, Conv2d),
    pooling: Pooling,
}

impl Encoder {
    pub(crate) fn build(ps: &mut ParamStore, prefix: &str, arch: &SegArch) -> Result<Self> {
        let mut levels = Vec::new();
        let mut c_in = 1;
        for l in 0..arch.depth {
            let c = arch.channels(l);
            levels.push((
                conv(ps, &format!("{prefix}enc.{l}.conv0"), c_in, c, 3, 1)?,
                conv(ps, &format!("{prefix}enc.{l}.conv1"), c, c, 3, 1)?,
            ));
            c_in = c;
        }
        let c = arch.feature_width();
        let bottleneck = (
            conv(ps, &format!("{prefix}bott.conv0"), c_in, c, 3, 1)?,
            conv(ps, &format!("{prefix}bott.conv1"), c, c, 3, 1)?,
        );
        Ok(Self {
            levels,
            bottleneck,
            pooling: arch.pooling,
        })
    }

    fn encode(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for (a, b) in &self.levels {
            h = conv_relu(&conv_relu(&h, a)?, b)?;
            skips.push(h.clone());
            h = h.max_pool2d(2)?;
        }
        let h = conv_relu(&conv_relu(&h, &self.bottleneck.0)?, &self.bottleneck.1)?;
        Ok((skips, h))
    }

    /// Pooled bottleneck features `[B, width]` of normalised crops `[B, 1, S, S]`.
    pub(crate) fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h) = self.encode(x)?;
        global_pool(&h, self.pooling)
    }
}

struct UNet {
    encoder: Encoder,
    /// Per level, deepest first: upsampling conv, then two convs after the skip join.
    decoder: Vec<(Conv2d, Conv2d, Conv2d)>,
    head: Conv2d,
}

impl UNet {
    fn build(ps: &mut ParamStore, arch: &SegArch) -> Result<Self> {
        let encoder = Encoder::build(ps, "", arch)?;
        let mut decoder = Vec::new();
        for l in (0..arch.depth).rev() {
            let (c_deep, c) = (arch.channels(l + 1), arch.channels(l));
            decoder.push((
                conv(ps, &format!("dec.{l}.up"), c_deep, c, 3, 1)?,
                conv(ps, &format!("dec.{l}.conv0"), 2 * c, c, 3, 1)?,
                conv(ps, &format!("dec.{l}.conv1"), c, c, 3, 1)?,
            ));
        }
        let head = conv(ps, "head", arch.channels(0), 1, 1, 1)?;
        Ok(Self { encoder, decoder, head })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (skips, mut h) = self.encoder.encode(x)?;
        for ((up, a, b), skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let (_, _, hh, ww) = skip.dims4()?;
            h = conv_relu(&h.upsample_nearest2d(hh, ww)?, up)?;
            h = Tensor::cat(&[skip, &h], 1)?;
            h = conv_relu(&conv_relu(&h, a)?, b)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

fn arch_of(cfg: &SegConfig, crop: CropSpec) -> SegArch {
    SegArch {
        crop,
        depth: cfg.encoder_depth,
        base_channels: cfg.base_channels,
        pooling: cfg.encoder_pooling,
    }
}

/// Crops and masks of a mask corpus as `[N, 1, S, S]` tensors.
fn load_mask_samples(ds: &Dataset, cfg: &SegConfig) -> Result<(Tensor, Tensor, CropSpec)> {
    if ds.kind != CorpusKind::Mask {
        return Err(Error::config(format!(
            "segmenter training needs a mask corpus, got {:?}",
            ds.kind
        )));
    }
    let crop = ds
        .crop
        .ok_or_else(|| Error::config("mask corpus has no crop specification"))?;
    if crop.size != cfg.crop_size {
        return Err(Error::config(format!(
            "mask corpus crops are {} px but crop_size is {}",
            crop.size, cfg.crop_size
        )));
    }
    let mut pixels = Vec::new();
    let mut masks = Vec::new();
    for image in &ds.images {
        if image.annotations.is_empty() {
            continue;
        }
        let raster = ds.load_image(image)?;
        for ann in &image.annotations {
            let c = crop.crop(&raster, &ann.bbox)?;
            pixels.push(c.into_data());
            masks.extend(
                ds.load_mask(image, ann)?
                    .into_iter()
                    .map(|m| if m { 1f32 } else { 0.0 }),
            );
        }
    }
    if pixels.is_empty() {
        return Err(Error::config("mask corpus has no annotations"));
    }
    let n = pixels.len();
    let s = crop.size;
    let refs: Vec<&[f32]> = pixels.iter().map(|p| p.as_slice()).collect();
    let x = nn::images_to_tensor(&refs, s, s)?;
    let m = Tensor::from_vec(masks, (n, 1, s, s), &DEVICE)?;
    Ok((x, m, crop))
}

pub fn train_segmenter(ds: &Dataset, cfg: &SegConfig) -> Result<ModelArtifact> {
    cfg.validate()?;
    let (x, m, crop) = load_mask_samples(ds, cfg)?;
    let n = x.dim(0)?;
    let arch = arch_of(cfg, crop);
    let mut ps = ParamStore::seeded(rng_from(&[cfg.seed, INIT_STREAM]));
    let net = UNet::build(&mut ps, &arch)?;
    let mut opt = nn::adamw(ps.trainable(), cfg.learning_rate)?;
    log::info!("segmenter: {n} crops, {} parameter tensors", ps.len());

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng_from(&[cfg.seed, INIT_STREAM, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let idx = Tensor::new(batch, &DEVICE)?;
            let xb = x.index_select(&idx, 0)?;
            let mb = m.index_select(&idx, 0)?;
            let probs = candle_nn::ops::sigmoid(&net.logits(&xb)?)?;
            let loss = combined_loss_tensor(&probs, &mb, cfg.epsilon)?;
            opt.backward_step(&loss)?;
            total += nn::scalar(&loss)? * batch.len() as f64;
        }
        let mean = total / n as f64;
        log::info!("segmenter epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        trace.push(mean);
    }
    ModelArtifact::new(Stage::Segmenter, &arch, cfg, trace, ps.tensors())
}

/// A trained segmenter ready for inference.
pub struct Segmenter {
    arch: SegArch,
    net: UNet,
}

impl Segmenter {
    pub fn from_artifact(model: &ModelArtifact) -> Result<Self> {
        model.expect_stage(Stage::Segmenter)?;
        let arch: SegArch = model.arch()?;
        let mut ps = ParamStore::from_tensors(model.tensors.clone());
        let net = UNet::build(&mut ps, &arch)?;
        Ok(Self { arch, net })
    }

    pub fn arch(&self) -> &SegArch {
        &self.arch
    }

    /// Per-pixel lesion probabilities for one crop, same extent as the input.
    pub fn segment(&self, crop: &Raster) -> Result<Raster> {
        let s = self.arch.crop.size;
        check_crop(crop, s)?;
        let x = nn::images_to_tensor(&[crop.data()], s, s)?;
        let probs = candle_nn::ops::sigmoid(&self.net.logits(&x)?)?;
        let data = probs.flatten_all()?.to_vec1::<f32>()?;
        Ok(Raster::new(s, s, data)?)
    }
}

pub(crate) fn check_crop(crop: &Raster, size: usize) -> Result<()> {
    if crop.width() != size || crop.height() != size {
        return Err(Error::Domain(format!(
            "crop is {}x{}, model expects {size}x{size}",
            crop.width(),
            crop.height()
        )));
    }
    Ok(())
}

/// Tensor names belonging to the encoder path.
pub(crate) fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("bott.")
}

/// The transplantable encoder path of a trained segmenter.
pub struct EncoderHandle {
    arch: SegArch,
    tensors: BTreeMap<String, Tensor>,
    encoder: Encoder,
}

pub fn extract_encoder(model: &ModelArtifact) -> Result<EncoderHandle> {
    model.expect_stage(Stage::Segmenter)?;
    let arch: SegArch = model.arch()?;
    let tensors: BTreeMap<String, Tensor> = model
        .tensors
        .iter()
        .filter(|(n, _)| is_encoder_tensor(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    EncoderHandle::new(arch, tensors)
}

impl EncoderHandle {
    pub(crate) fn new(arch: SegArch, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut ps = ParamStore::from_tensors(tensors.clone());
        let encoder = Encoder::build(&mut ps, "", &arch)?;
        if ps.len() != tensors.len() {
            return Err(Error::Domain("encoder weights contain unexpected tensors".into()));
        }
        Ok(Self { arch, tensors, encoder })
    }

    pub fn arch(&self) -> &SegArch {
        &self.arch
    }

    /// Length of the pooled bottleneck feature vector.
    pub fn width(&self) -> usize {
        self.arch.feature_width()
    }

    pub fn crop_spec(&self) -> CropSpec {
        self.arch.crop
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn features(&self, crop: &Raster) -> Result<Vec<f32>> {
        let s = self.arch.crop.size;
        check_crop(crop, s)?;
        let x = nn::images_to_tensor(&[crop.data()], s, s)?;
        Ok(self.encoder.features(&x)?.flatten_all()?.to_vec1::<f32>()?)
    }
}
