//! Two-stage tooth detector: a strided convolutional backbone, a region
//! proposal network over a small anchor set, and an ROI head that numbers
//! each proposal as one of 32 teeth (or background) and refines its box.
//!
//! Tooth numbering depends on where a tooth sits in the mouth, so the ROI
//! head sees a radial-basis encoding of the proposal's position in the image
//! alongside its pooled appearance features.

use std::collections::BTreeMap;

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Linear, Optimizer};
use dentcascade_core::augment::{augment, AugPolicy, Sample};
use dentcascade_core::corpus::{CorpusKind, Dataset};
use dentcascade_core::seeding::{rng_from, sample_rng};
use dentcascade_core::{BBox, Detection, Raster, NUM_TOOTH_CLASSES};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, Stage};
use crate::error::{Error, Result};
use crate::nn::{self, conv, conv_relu, dense, Init, ParamStore, DEVICE};

const INIT_STREAM: u64 = 0xDE7;
const RPN_STREAM: u64 = 1;
const ROI_STREAM: u64 = 2;

const RPN_BOX_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const ROI_BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
/// Largest log-scale change a predicted delta may apply.
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)
const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
const MIN_PROPOSAL_SIDE: f64 = 2.0;
const PRE_NMS_TOP_N: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Images per optimisation step.
    pub batch_size: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Detections kept per tooth class; `None` keeps all.
    pub max_per_class: Option<usize>,
    pub seed: u64,
    pub augment: AugPolicy,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    /// Anchor (width, height) pairs in pixels.
    pub anchor_sizes: Vec<[f64; 2]>,
    pub pool_size: usize,
    pub head_width: usize,
    pub rpn_batch: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_iou: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 2,
            score_threshold: 0.5,
            nms_iou: 0.5,
            max_per_class: Some(1),
            seed: 0,
            augment: AugPolicy::default(),
            backbone_channels: vec![16, 32, 64],
            anchor_sizes: vec![[20.0, 70.0], [26.0, 80.0], [44.0, 86.0]],
            pool_size: 7,
            head_width: 256,
            rpn_batch: 256,
            rpn_pos_iou: 0.6,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            roi_batch: 128,
            roi_fg_iou: 0.5,
            train_proposals: 300,
            test_proposals: 150,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl DetectorConfig {
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
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("roi_fg_iou", self.roi_fg_iou),
        ] {
            unit(name, v)?;
        }
        if self.rpn_neg_iou > self.rpn_pos_iou {
            return Err(Error::config("rpn_neg_iou must not exceed rpn_pos_iou"));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::config("backbone_channels must be non-empty and positive"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().flatten().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::config("anchor_sizes must be non-empty and positive"));
        }
        if self.pool_size == 0 || self.head_width == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::config(
                "pool_size, head_width and sample counts must be positive",
            ));
        }
        if self.train_proposals == 0 || self.test_proposals == 0 {
            return Err(Error::config("proposal counts must be positive"));
        }
        if self.max_per_class == Some(0) {
            return Err(Error::config("max_per_class must be positive when set"));
        }
        self.augment.validate()?;
        Ok(())
    }

    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            max_per_class: self.max_per_class,
            proposals: self.test_proposals,
        }
    }
}

/// Post-processing knobs applied at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_class: Option<usize>,
    pub proposals: usize,
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        unit("score_threshold", self.score_threshold)?;
        unit("nms_iou", self.nms_iou)?;
        if self.max_per_class == Some(0) || self.proposals == 0 {
            return Err(Error::config("max_per_class and proposals must be positive"));
        }
        Ok(())
    }
}

/// Position encoding resolution of the ROI head.
const POS_X_CENTERS: usize = 32;
const POS_Y_CENTERS: usize = 8;
const POS_WIDTH: usize = POS_X_CENTERS + POS_Y_CENTERS + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub backbone_channels: Vec<usize>,
    pub anchor_sizes: Vec<[f64; 2]>,
    pub pool_size: usize,
    pub head_width: usize,
}

impl DetectorArch {
    fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    fn channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }
}

type Rect = [f64; 4];

fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn encode_box(anchor: &Rect, gt: &Rect, w: &[f64; 4]) -> [f32; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gx, gy) = (gt[0] + 0.5 * gw, gt[1] + 0.5 * gh);
    [
        (w[0] * (gx - ax) / aw) as f32,
        (w[1] * (gy - ay) / ah) as f32,
        (w[2] * (gw / aw).ln()) as f32,
        (w[3] * (gh / ah).ln()) as f32,
    ]
}

fn decode_box(anchor: &Rect, d: &[f32], w: &[f64; 4]) -> Rect {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let cx = ax + d[0] as f64 / w[0] * aw;
    let cy = ay + d[1] as f64 / w[1] * ah;
    let bw = aw * (d[2] as f64 / w[2]).min(MAX_LOG_SCALE).exp();
    let bh = ah * (d[3] as f64 / w[3]).min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh]
}

fn clip(r: &Rect, width: f64, height: f64) -> Rect {
    [
        r[0].clamp(0.0, width),
        r[1].clamp(0.0, height),
        r[2].clamp(0.0, width),
        r[3].clamp(0.0, height),
    ]
}

/// Greedy non-maximum suppression. Returns kept indices by descending score
/// (ties by index); every kept pair overlaps with IoU below `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let rects: Vec<Rect> = boxes.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect();
    nms_rects(&rects, scores, iou_thresh, usize::MAX)
}

fn nms_rects(rects: &[Rect], scores: &[f64], iou_thresh: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= limit {
            break;
        }
        if keep.iter().all(|&k| rect_iou(&rects[k], &rects[i]) < iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Anchors of a `hf x wf` feature map in (row, column, anchor) order.
fn anchors(arch: &DetectorArch, hf: usize, wf: usize) -> Vec<Rect> {
    let s = arch.stride() as f64;
    let mut out = Vec::with_capacity(hf * wf * arch.num_anchors());
    for y in 0..hf {
        for x in 0..wf {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for [w, h] in &arch.anchor_sizes {
                out.push([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]);
            }
        }
    }
    out
}

fn position_encoding(rois: &[Rect], width: f64, height: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(rois.len() * POS_WIDTH);
    for r in rois {
        let cx = 0.5 * (r[0] + r[2]) / width;
        let cy = 0.5 * (r[1] + r[3]) / height;
        for (c, n) in [(cx, POS_X_CENTERS), (cy, POS_Y_CENTERS)] {
            for i in 0..n {
                let z = (c - (i as f64 + 0.5) / n as f64) * n as f64;
                out.push((-0.5 * z * z).exp() as f32);
            }
        }
        out.push((10.0 * (r[2] - r[0]) / width) as f32);
        out.push((3.0 * (r[3] - r[1]) / height) as f32);
    }
    out
}

struct DetectorNet {
    arch: DetectorArch,
    backbone: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
    fc: [Linear; 2],
    cls: Linear,
    reg: Linear,
}

struct FeatureMap {
    /// `[H*W, C]` for row gathers.
    flat: Tensor,
    hf: usize,
    wf: usize,
}

impl DetectorNet {
    fn build(ps: &mut ParamStore, arch: &DetectorArch) -> Result<Self> {
        let mut backbone = Vec::new();
        let mut c_in = 1;
        for (i, &c) in arch.backbone_channels.iter().enumerate() {
            backbone.push(conv(ps, &format!("backbone.{i}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        let c = arch.channels();
        backbone.push(conv(ps, "backbone.top", c, c, 3, 1)?);
        let a = arch.num_anchors();
        let rpn_conv = conv(ps, "rpn.conv", c, c, 3, 1)?;
        let small = |ps: &mut ParamStore, name: &str, out: usize, bias: f64| -> Result<Conv2d> {
            let w = ps.get(&format!("{name}.weight"), &[out, c, 1, 1], Init::Uniform(0.01))?;
            let b = ps.get(&format!("{name}.bias"), &[out], Init::Const(bias))?;
            Ok(Conv2d::new(w, Some(b), Default::default()))
        };
        let rpn_obj = small(ps, "rpn.objectness", a, -2.0)?;
        let rpn_delta = small(ps, "rpn.delta", 4 * a, 0.0)?;
        let d_in = arch.pool_size * arch.pool_size * c + POS_WIDTH;
        let hw = arch.head_width;
        let fc = [
            dense(ps, "roi.fc0", d_in, hw, Init::He(d_in))?,
            dense(ps, "roi.fc1", hw, hw, Init::He(hw))?,
        ];
        let cls = nn::dense_with_bias(ps, "roi.cls", hw, NUM_TOOTH_CLASSES + 1, 0.0)?;
        let w = ps.get("roi.reg.weight", &[4, hw], Init::Uniform(0.001))?;
        let b = ps.get("roi.reg.bias", &[4], Init::Const(0.0))?;
        Ok(Self {
            arch: arch.clone(),
            backbone,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            fc,
            cls,
            reg: Linear::new(w, Some(b)),
        })
    }

    /// Backbone features plus flattened RPN objectness `[N]` and deltas `[N, 4]`.
    fn features(&self, image: &Raster) -> Result<(FeatureMap, Tensor, Tensor)> {
        let mut h = nn::images_to_tensor(&[image.data()], image.height(), image.width())?;
        for c in &self.backbone {
            h = conv_relu(&h, c)?;
        }
        let (_, ch, hf, wf) = h.dims4()?;
        let t = conv_relu(&h, &self.rpn_conv)?;
        let obj = self.rpn_obj.forward(&t)?.permute((0, 2, 3, 1))?.flatten_all()?;
        let delta = self.rpn_delta.forward(&t)?.permute((0, 2, 3, 1))?.reshape(((), 4))?;
        let flat = h.reshape((ch, hf * wf))?.t()?.contiguous()?;
        Ok((FeatureMap { flat, hf, wf }, obj, delta))
    }

    /// Bilinear ROI pooling (one sample at each bin centre) concatenated with
    /// the position encoding: `[R, P*P*C + POS_WIDTH]`.
    fn roi_features(&self, fm: &FeatureMap, rois: &[Rect], width: f64, height: f64) -> Result<Tensor> {
        let p = self.arch.pool_size;
        let s = self.arch.stride() as f64;
        let n = rois.len() * p * p;
        let mut idx: [Vec<u32>; 4] = Default::default();
        let mut wts: [Vec<f32>; 4] = Default::default();
        for i in 0..4 {
            idx[i].reserve(n);
            wts[i].reserve(n);
        }
        let (hf, wf) = (fm.hf, fm.wf);
        for r in rois {
            let (bw, bh) = ((r[2] - r[0]) / p as f64, (r[3] - r[1]) / p as f64);
            for i in 0..p {
                let fy = ((r[1] + (i as f64 + 0.5) * bh) / s - 0.5).clamp(0.0, (hf - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(hf - 1);
                let ly = (fy - y0 as f64) as f32;
                for j in 0..p {
                    let fx = ((r[0] + (j as f64 + 0.5) * bw) / s - 0.5).clamp(0.0, (wf - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(wf - 1);
                    let lx = (fx - x0 as f64) as f32;
                    let corners = [
                        (y0 * wf + x0, (1.0 - ly) * (1.0 - lx)),
                        (y0 * wf + x1, (1.0 - ly) * lx),
                        (y1 * wf + x0, ly * (1.0 - lx)),
                        (y1 * wf + x1, ly * lx),
                    ];
                    for (k, (at, w)) in corners.into_iter().enumerate() {
                        idx[k].push(at as u32);
                        wts[k].push(w);
                    }
                }
            }
        }
        let mut pooled: Option<Tensor> = None;
        for k in 0..4 {
            let ix = Tensor::from_vec(std::mem::take(&mut idx[k]), n, &DEVICE)?;
            let w = Tensor::from_vec(std::mem::take(&mut wts[k]), (n, 1), &DEVICE)?;
            let term = fm.flat.index_select(&ix, 0)?.broadcast_mul(&w)?;
            pooled = Some(match pooled {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let pooled = pooled.expect("four corners").reshape((rois.len(), ()))?;
        let pos = Tensor::from_vec(position_encoding(rois, width, height), (rois.len(), POS_WIDTH), &DEVICE)?;
        Ok(Tensor::cat(&[&pooled, &pos], 1)?)
    }

    /// Class logits `[R, 33]` and class-agnostic box deltas `[R, 4]`.
    fn roi_head(&self, feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.fc[0].forward(feats)?.relu()?;
        let h = self.fc[1].forward(&h)?.relu()?;
        Ok((self.cls.forward(&h)?, self.reg.forward(&h)?))
    }
}

/// Decoded, clipped, NMS-filtered proposals from RPN outputs.
fn proposals(
    anchors: &[Rect],
    obj: &Tensor,
    delta: &Tensor,
    width: f64,
    height: f64,
    nms_iou: f64,
    keep: usize,
) -> Result<Vec<Rect>> {
    let scores: Vec<f32> = obj.to_vec1()?;
    let deltas: Vec<f32> = delta.flatten_all()?.to_vec1()?;
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(PRE_NMS_TOP_N);
    let mut rects = Vec::with_capacity(order.len());
    let mut kept_scores = Vec::with_capacity(order.len());
    for i in order {
        let r = clip(
            &decode_box(&anchors[i], &deltas[4 * i..4 * i + 4], &RPN_BOX_WEIGHTS),
            width,
            height,
        );
        if r[2] - r[0] >= MIN_PROPOSAL_SIDE && r[3] - r[1] >= MIN_PROPOSAL_SIDE {
            rects.push(r);
            kept_scores.push(scores[i] as f64);
        }
    }
    Ok(nms_rects(&rects, &kept_scores, nms_iou, keep)
        .into_iter()
        .map(|i| rects[i])
        .collect())
}

/// For each box: (best IoU, index of that ground truth).
fn best_matches(boxes: &[Rect], gts: &[Rect]) -> Vec<(f64, usize)> {
    boxes
        .iter()
        .map(|b| {
            let mut best = (0.0, usize::MAX);
            for (g, gt) in gts.iter().enumerate() {
                let v = rect_iou(b, gt);
                if v > best.0 {
                    best = (v, g);
                }
            }
            best
        })
        .collect()
}

struct Targets {
    gts: Vec<Rect>,
    classes: Vec<usize>,
}

fn targets_of(sample: &Sample) -> Targets {
    let mut gts = Vec::new();
    let mut classes = Vec::new();
    for a in &sample.annotations {
        if let Some(t) = a.tooth {
            gts.push([a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max]);
            classes.push(t.class_id());
        }
    }
    Targets { gts, classes }
}

fn u32_tensor(v: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = v.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v.clone(), v.len(), &DEVICE)?)
}

fn deltas_tensor(d: Vec<[f32; 4]>) -> Result<Tensor> {
    let n = d.len();
    Ok(Tensor::from_vec(
        d.into_iter().flatten().collect::<Vec<_>>(),
        (n, 4),
        &DEVICE,
    )?)
}

/// Training loss of one (augmented) image.
fn image_loss(
    net: &DetectorNet,
    cfg: &DetectorConfig,
    sample: &Sample,
    anchor_cache: &mut BTreeMap<(usize, usize), Vec<Rect>>,
    rng_rpn: &mut ChaCha8Rng,
    rng_roi: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (width, height) = (sample.image.width() as f64, sample.image.height() as f64);
    let t = targets_of(sample);
    let (fm, obj, delta) = net.features(&sample.image)?;
    let anchors = anchor_cache
        .entry((fm.hf, fm.wf))
        .or_insert_with(|| anchors(&net.arch, fm.hf, fm.wf));

    // Region proposal targets.
    let matches = best_matches(anchors, &t.gts);
    let mut label = vec![-1i8; anchors.len()];
    for (i, &(v, _)) in matches.iter().enumerate() {
        if v >= cfg.rpn_pos_iou {
            label[i] = 1;
        } else if v < cfg.rpn_neg_iou {
            label[i] = 0;
        }
    }
    for gt in &t.gts {
        let best = anchors.iter().map(|a| rect_iou(a, gt)).fold(0.0, f64::max);
        if best > 0.0 {
            for (i, a) in anchors.iter().enumerate() {
                if rect_iou(a, gt) == best {
                    label[i] = 1;
                }
            }
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 0).collect();
    pos.shuffle(rng_rpn);
    neg.shuffle(rng_rpn);
    pos.truncate(cfg.rpn_batch / 2);
    neg.truncate(cfg.rpn_batch - pos.len());
    let sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let obj_targets: Vec<f32> = sampled.iter().map(|&i| (label[i] == 1) as u8 as f32).collect();
    let rpn_cls = nn::bce_with_logits(
        &obj.index_select(&u32_tensor(&sampled)?, 0)?,
        &Tensor::from_vec(obj_targets, sampled.len(), &DEVICE)?,
    )?;
    let mut loss = rpn_cls;
    if !pos.is_empty() {
        let tgt = pos
            .iter()
            .map(|&i| encode_box(&anchors[i], &t.gts[matches[i].1], &RPN_BOX_WEIGHTS))
            .collect();
        let pred = delta.index_select(&u32_tensor(&pos)?, 0)?;
        let reg = (nn::smooth_l1_sum(&pred, &deltas_tensor(tgt)?, SMOOTH_L1_BETA)? / sampled.len() as f64)?;
        loss = (loss + reg)?;
    }

    // ROI head targets on proposals plus the ground-truth boxes.
    let mut rois = proposals(
        anchors,
        &obj.detach(),
        &delta.detach(),
        width,
        height,
        cfg.rpn_nms_iou,
        cfg.train_proposals,
    )?;
    rois.extend(t.gts.iter().copied());
    let matches = best_matches(&rois, &t.gts);
    let mut fg: Vec<usize> = (0..rois.len()).filter(|&i| matches[i].0 >= cfg.roi_fg_iou).collect();
    let mut bg: Vec<usize> = (0..rois.len()).filter(|&i| matches[i].0 < cfg.roi_fg_iou).collect();
    fg.shuffle(rng_roi);
    bg.shuffle(rng_roi);
    fg.truncate(cfg.roi_batch / 2);
    bg.truncate(cfg.roi_batch - fg.len());
    let chosen: Vec<Rect> = fg.iter().chain(&bg).map(|&i| rois[i]).collect();
    let classes: Vec<u32> = fg
        .iter()
        .map(|&i| (t.classes[matches[i].1] + 1) as u32)
        .chain(std::iter::repeat_n(0, bg.len()))
        .collect();
    let feats = net.roi_features(&fm, &chosen, width, height)?;
    let (logits, reg) = net.roi_head(&feats)?;
    let cls_loss = candle_nn::loss::cross_entropy(&logits, &Tensor::from_vec(classes, chosen.len(), &DEVICE)?)?;
    loss = (loss + cls_loss)?;
    if !fg.is_empty() {
        let tgt = fg
            .iter()
            .map(|&i| encode_box(&rois[i], &t.gts[matches[i].1], &ROI_BOX_WEIGHTS))
            .collect();
        let pred = reg.narrow(0, 0, fg.len())?;
        let box_loss = (nn::smooth_l1_sum(&pred, &deltas_tensor(tgt)?, SMOOTH_L1_BETA)? / chosen.len() as f64)?;
        loss = (loss + box_loss)?;
    }
    Ok(loss)
}

/// Sample order of `epoch`; depends only on the seed and the corpus size.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[seed, INIT_STREAM, epoch as u64]));
    order
}

/// Augmented training view of image `index` in `epoch`.
pub fn training_sample(cfg: &DetectorConfig, epoch: usize, index: usize, base: &Sample) -> Sample {
    augment(
        base,
        &cfg.augment,
        &mut sample_rng(cfg.seed, epoch as u64, index as u64),
    )
}

fn arch_of(cfg: &DetectorConfig) -> DetectorArch {
    DetectorArch {
        backbone_channels: cfg.backbone_channels.clone(),
        anchor_sizes: cfg.anchor_sizes.clone(),
        pool_size: cfg.pool_size,
        head_width: cfg.head_width,
    }
}

pub fn train_detector(ds: &Dataset, cfg: &DetectorConfig) -> Result<ModelArtifact> {
    cfg.validate()?;
    if ds.kind != CorpusKind::Enumeration {
        return Err(Error::config(format!(
            "detector training needs an enumeration corpus, got {:?}",
            ds.kind
        )));
    }
    if ds.is_empty() || ds.annotation_count() == 0 {
        return Err(Error::config("detector training corpus is empty"));
    }
    let mut bases = Vec::with_capacity(ds.len());
    for image in &ds.images {
        bases.push(Sample {
            image: ds.load_image(image)?,
            annotations: image.annotations.clone(),
        });
    }
    let arch = arch_of(cfg);
    let mut ps = ParamStore::seeded(rng_from(&[cfg.seed, INIT_STREAM]));
    let net = DetectorNet::build(&mut ps, &arch)?;
    let mut opt = nn::adamw(ps.trainable(), cfg.learning_rate)?;
    let mut anchor_cache = BTreeMap::new();
    log::info!("detector: {} images, {} boxes", ds.len(), ds.annotation_count());

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in epoch_order(cfg.seed, epoch, bases.len()).chunks(cfg.batch_size) {
            let mut sum: Option<Tensor> = None;
            for &i in batch {
                let sample = training_sample(cfg, epoch, i, &bases[i]);
                let key = [cfg.seed, epoch as u64, i as u64];
                let mut rng_rpn = rng_from(&[key[0], key[1], key[2], RPN_STREAM]);
                let mut rng_roi = rng_from(&[key[0], key[1], key[2], ROI_STREAM]);
                let l = image_loss(&net, cfg, &sample, &mut anchor_cache, &mut rng_rpn, &mut rng_roi)?;
                total += nn::scalar(&l)?;
                sum = Some(match sum {
                    Some(s) => (s + l)?,
                    None => l,
                });
            }
            let loss = (sum.expect("non-empty batch") / batch.len() as f64)?;
            opt.backward_step(&loss)?;
        }
        let mean = total / bases.len() as f64;
        log::info!("detector epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        trace.push(mean);
    }
    ModelArtifact::new(Stage::Detector, &arch, cfg, trace, ps.tensors())
}

/// A trained detector ready for inference.
pub struct Detector {
    config: DetectorConfig,
    net: DetectorNet,
}

impl Detector {
    pub fn from_artifact(model: &ModelArtifact) -> Result<Self> {
        model.expect_stage(Stage::Detector)?;
        let arch: DetectorArch = model.arch()?;
        let config: DetectorConfig = model.config()?;
        let mut ps = ParamStore::from_tensors(model.tensors.clone());
        let net = DetectorNet::build(&mut ps, &arch)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Detections with the post-processing stored in the artifact.
    pub fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        self.detect_with(image, &self.config.detect_params())
    }

    pub fn detect_with(&self, image: &Raster, params: &DetectParams) -> Result<Vec<Detection>> {
        params.validate()?;
        let (width, height) = (image.width() as f64, image.height() as f64);
        let (fm, obj, delta) = self.net.features(image)?;
        let anchors = anchors(&self.net.arch, fm.hf, fm.wf);
        let rois = proposals(
            &anchors,
            &obj,
            &delta,
            width,
            height,
            self.config.rpn_nms_iou,
            params.proposals,
        )?;
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let feats = self.net.roi_features(&fm, &rois, width, height)?;
        let (logits, reg) = self.net.roi_head(&feats)?;
        let probs: Vec<Vec<f32>> = candle_nn::ops::softmax(&logits, D::Minus1)?.to_vec2()?;
        let deltas: Vec<Vec<f32>> = reg.to_vec2()?;

        let mut per_class: Vec<(Vec<Rect>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); NUM_TOOTH_CLASSES];
        for (r, roi) in rois.iter().enumerate() {
            let b = clip(&decode_box(roi, &deltas[r], &ROI_BOX_WEIGHTS), width, height);
            if !(b[2] > b[0] && b[3] > b[1]) {
                continue;
            }
            for (c, list) in per_class.iter_mut().enumerate() {
                let p = probs[r][c + 1] as f64;
                if p >= params.score_threshold {
                    list.0.push(b);
                    list.1.push(p);
                }
            }
        }
        let mut out = Vec::new();
        let cap = params.max_per_class.unwrap_or(usize::MAX);
        for (c, (rects, scores)) in per_class.iter().enumerate() {
            for i in nms_rects(rects, scores, params.nms_iou, cap) {
                let r = rects[i];
                out.push(Detection::new(BBox::new(r[0], r[1], r[2], r[3])?, c, scores[i])?);
            }
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.class_id.cmp(&b.class_id)));
        Ok(out)
    }
}
