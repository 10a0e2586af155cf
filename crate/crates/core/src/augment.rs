//! Label-consistent, on-the-fly augmentation of whole panoramic samples.
//!
//! Transforms run in a fixed order (flip, affine, photometric, cutout), each
//! applied independently with its own probability. Geometric transforms move
//! boxes with the pixels; the flip also mirrors tooth numbers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotationRecord;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::types::BBox;

/// Fraction of a transformed box that must remain on-image for it to survive.
pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

/// An image with its tooth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPolicy {
    pub p_hflip: f64,
    pub p_affine: f64,
    pub p_photometric: f64,
    pub p_cutout: f64,
    /// Additive brightness offset drawn from `[-brightness_delta, brightness_delta]`.
    pub brightness_delta: f64,
    /// Multiplicative contrast factor range.
    pub contrast_range: (f64, f64),
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Translation as a fraction of the image extent, per axis.
    pub translate_fraction: f64,
    /// Largest cutout side in pixels.
    pub cutout_max: usize,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_affine: 0.5,
            p_photometric: 0.5,
            p_cutout: 0.5,
            brightness_delta: 0.1,
            contrast_range: (0.8, 1.2),
            rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            translate_fraction: 0.05,
            cutout_max: 80,
        }
    }
}

impl AugPolicy {
    /// A policy that never fires.
    pub fn none() -> Self {
        Self {
            p_hflip: 0.0,
            p_affine: 0.0,
            p_photometric: 0.0,
            p_cutout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_hflip, self.p_affine, self.p_photometric, self.p_cutout];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "augmentation probabilities {probs:?} outside [0,1]"
            )));
        }
        let (c0, c1) = self.contrast_range;
        let (s0, s1) = self.scale_range;
        if !(0.0 < c0 && c0 <= c1) || !(0.0 < s0 && s0 <= s1) {
            return Err(Error::Config(
                "contrast/scale ranges must be positive and ordered".into(),
            ));
        }
        if self.brightness_delta < 0.0 || self.rotation_deg < 0.0 || self.translate_fraction < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        if self.cutout_max == 0 {
            return Err(Error::Config("cutout_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mirrors pixels left-right, maps each box to `(W - x_max, .., W - x_min, ..)`
/// and swaps quadrants 1<->2 and 3<->4.
pub fn hflip(sample: &Sample) -> Sample {
    let w = sample.image.width() as f64;
    let annotations = sample
        .annotations
        .iter()
        .map(|a| AnnotationRecord {
            bbox: BBox {
                x_min: w - a.bbox.x_max,
                y_min: a.bbox.y_min,
                x_max: w - a.bbox.x_min,
                y_max: a.bbox.y_max,
            },
            tooth: a.tooth.map(|t| t.mirrored()),
            ..a.clone()
        })
        .collect();
    Sample {
        image: sample.image.flipped_horizontally(),
        annotations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub contrast: f64,
    pub brightness: f64,
}

impl PhotometricParams {
    pub fn sample<R: Rng>(policy: &AugPolicy, rng: &mut R) -> Self {
        let (c0, c1) = policy.contrast_range;
        Self {
            contrast: uniform(rng, c0, c1),
            brightness: uniform(rng, -policy.brightness_delta, policy.brightness_delta),
        }
    }

    pub fn apply(&self, image: &Raster) -> Raster {
        let (a, b) = (self.contrast as f32, self.brightness as f32);
        let mut out = image.clone();
        for v in out.data_mut() {
            *v = (a * *v + b).clamp(0.0, 1.0);
        }
        out
    }
}

/// Brightness/contrast jitter, `clamp(alpha * x + beta)`.
pub fn photometric<R: Rng>(image: &Raster, policy: &AugPolicy, rng: &mut R) -> Raster {
    PhotometricParams::sample(policy, rng).apply(image)
}

/// Similarity transform about the image center: `A (p - c) + c + t`, `A = s R(theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation in pixels.
    pub translate: (f64, f64),
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        scale: 1.0,
        translate: (0.0, 0.0),
    };

    pub fn sample<R: Rng>(policy: &AugPolicy, width: usize, height: usize, rng: &mut R) -> Self {
        let (s0, s1) = policy.scale_range;
        let rotation_deg = uniform(rng, -policy.rotation_deg, policy.rotation_deg);
        let scale = uniform(rng, s0, s1);
        let tx = policy.translate_fraction * width as f64;
        let ty = policy.translate_fraction * height as f64;
        let translate = (uniform(rng, -tx, tx), uniform(rng, -ty, ty));
        Self {
            rotation_deg,
            scale,
            translate,
        }
    }

    fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        [self.scale * c, -self.scale * s, self.scale * s, self.scale * c]
    }

    /// Maps a point in continuous pixel coordinates.
    pub fn map_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let [a, b, c, d] = self.matrix();
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (dx, dy) = (x - cx, y - cy);
        (
            a * dx + b * dy + cx + self.translate.0,
            c * dx + d * dy + cy + self.translate.1,
        )
    }

    fn unmap_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let inv = 1.0 / self.scale;
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (dx, dy) = (x - cx - self.translate.0, y - cy - self.translate.1);
        (inv * (c * dx + s * dy) + cx, inv * (-s * dx + c * dy) + cy)
    }

    /// Axis-aligned hull of the mapped box corners (unclamped).
    pub fn map_box(&self, b: &BBox, width: usize, height: usize) -> BBox {
        let corners = [
            (b.x_min, b.y_min),
            (b.x_max, b.y_min),
            (b.x_min, b.y_max),
            (b.x_max, b.y_max),
        ]
        .map(|(x, y)| self.map_point(x, y, width, height));
        let xs = corners.map(|p| p.0);
        let ys = corners.map(|p| p.1);
        BBox {
            x_min: xs.into_iter().fold(f64::INFINITY, f64::min),
            y_min: ys.into_iter().fold(f64::INFINITY, f64::min),
            x_max: xs.into_iter().fold(f64::NEG_INFINITY, f64::max),
            y_max: ys.into_iter().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Warps pixels (bilinear, zero outside) and boxes; boxes keeping less than
    /// [`MIN_VISIBLE_FRACTION`] of their hull on-image are dropped with their labels.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let (w, h) = (sample.image.width(), sample.image.height());
        let src = &sample.image;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.unmap_point(x as f64 + 0.5, y as f64 + 0.5, w, h);
                if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                    data.push(0.0);
                } else {
                    data.push(src.sample_bilinear(sx - 0.5, sy - 0.5));
                }
            }
        }
        let annotations = sample
            .annotations
            .iter()
            .filter_map(|a| {
                let hull = self.map_box(&a.bbox, w, h);
                let clamped = hull.clamp_to(w as f64, h as f64)?;
                (clamped.area() >= MIN_VISIBLE_FRACTION * hull.area()).then(|| AnnotationRecord {
                    bbox: clamped,
                    ..a.clone()
                })
            })
            .collect();
        Sample {
            image: Raster::new(w, h, data).expect("same extent"),
            annotations,
        }
    }
}

pub fn affine<R: Rng>(sample: &Sample, policy: &AugPolicy, rng: &mut R) -> Sample {
    let params = AffineParams::sample(policy, sample.image.width(), sample.image.height(), rng);
    params.apply(sample)
}

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutoutRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CutoutRect {
    /// Side lengths uniform in `[1, max_side]`, clipped to the image; position uniform inside it.
    pub fn sample<R: Rng>(max_side: usize, width: usize, height: usize, rng: &mut R) -> Self {
        let w = rng.random_range(1..=max_side.max(1)).min(width);
        let h = rng.random_range(1..=max_side.max(1)).min(height);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        Self { x, y, w, h }
    }

    /// Fills the rectangle with the mean of the whole image.
    pub fn apply(&self, image: &Raster) -> Raster {
        let fill = image.mean();
        let mut out = image.clone();
        for y in self.y..self.y + self.h {
            for x in self.x..self.x + self.w {
                out.set(x, y, fill);
            }
        }
        out
    }
}

pub fn cutout<R: Rng>(image: &Raster, policy: &AugPolicy, rng: &mut R) -> Raster {
    CutoutRect::sample(policy.cutout_max, image.width(), image.height(), rng).apply(image)
}

/// Applies the policy's transforms in fixed order, each with its own probability.
pub fn augment<R: Rng>(sample: &Sample, policy: &AugPolicy, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if rng.random_bool(policy.p_hflip) {
        out = hflip(&out);
    }
    if rng.random_bool(policy.p_affine) {
        out = affine(&out, policy, rng);
    }
    if rng.random_bool(policy.p_photometric) {
        out.image = photometric(&out.image, policy, rng);
    }
    if rng.random_bool(policy.p_cutout) {
        out.image = cutout(&out.image, policy, rng);
    }
    out
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
