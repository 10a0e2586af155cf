//! Deterministic toy panoramic radiographs with full annotations.
//!
//! Each image shows up to 32 tooth blobs along an upper and a lower arc.
//! Abnormal teeth get a visible corruption per condition: a small dark
//! crown spot (caries), a large dark spot reaching the pulp (deep caries), a
//! dark ring at the apex (periapical lesion), or a tilted, displaced tooth
//! (embedded). Lesion pixels are tracked so every abnormal tooth also gets a
//! crop-aligned binary mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, AnnotationRecord, CorpusKind, CropSpec, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::raster::{save_mask_png, Raster};
use crate::types::{BBox, Diagnosis, DiagnosisSet, ToothLabel};

pub const ENUMERATION_FILE: &str = "enum.json";
pub const DIAGNOSIS_FILE: &str = "diag.json";
pub const MASK_FILE: &str = "masks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Probability that a present tooth is abnormal.
    pub abnormal_rate: f64,
    /// Probability that a tooth is absent.
    pub missing_rate: f64,
    pub seed: u64,
    /// Crop geometry the lesion masks are aligned to.
    pub crop: CropSpec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_images: 8,
            width: 512,
            height: 256,
            abnormal_rate: 0.3,
            missing_rate: 0.05,
            seed: 0,
            crop: CropSpec::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.abnormal_rate) || !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::Config("rates must lie in [0,1]".into()));
        }
        if self.width < 128 || self.height < 64 {
            return Err(Error::Config("toy images must be at least 128x64".into()));
        }
        if self.crop.size < 8 || self.crop.pad_fraction.is_nan() || self.crop.pad_fraction < 0.0 {
            return Err(Error::Config("crop size must be >= 8 and padding non-negative".into()));
        }
        Ok(())
    }
}

/// One rendered tooth with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTooth {
    pub tooth: ToothLabel,
    pub bbox: BBox,
    pub diagnoses: DiagnosisSet,
    /// Full-resolution lesion pixels as `(x, y)`.
    pub lesion_pixels: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub id: String,
    pub raster: Raster,
    pub teeth: Vec<ToyTooth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub enumeration: Dataset,
    pub diagnosis: Dataset,
    pub masks: Dataset,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

struct ToothGeometry {
    center: (f64, f64),
    width: f64,
    height: f64,
    /// Rotation of the tooth axis in radians.
    tilt: f64,
    /// Crown faces down (upper jaw) when true.
    upper: bool,
}

impl ToothGeometry {
    /// Maps a pixel center into tooth coordinates: `u` across the tooth in
    /// widths (0 at the axis), `v` along it from the crown edge (0) to the apex (1).
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.tilt.sin_cos();
        let rx = c * dx + s * dy;
        let ry = -s * dx + c * dy;
        let u = rx / self.width;
        let v = if self.upper {
            0.5 - ry / self.height
        } else {
            0.5 + ry / self.height
        };
        (u, v)
    }

    /// Pixel position of local coordinates `(u, v)`.
    fn global(&self, u: f64, v: f64) -> (f64, f64) {
        let rx = u * self.width;
        let ry = if self.upper {
            (0.5 - v) * self.height
        } else {
            (v - 0.5) * self.height
        };
        let (s, c) = self.tilt.sin_cos();
        (self.center.0 + c * rx - s * ry, self.center.1 + s * rx + c * ry)
    }

    /// Tooth intensity at local coordinates, `None` outside the silhouette.
    fn shade(u: f64, v: f64) -> Option<f32> {
        if !(0.0..=1.0).contains(&v) {
            return None;
        }
        let half_width = if v < 0.05 {
            0.5 - (0.05 - v) * 3.0
        } else if v <= 0.4 {
            0.5
        } else {
            0.38 - (v - 0.4) / 0.6 * 0.30
        };
        if u.abs() > half_width {
            return None;
        }
        let pulp = (v > 0.2 && v < 0.45 && u.abs() < 0.15) || ((0.45..0.95).contains(&v) && u.abs() < 0.08);
        Some(if pulp {
            0.42
        } else if v <= 0.4 {
            0.88
        } else {
            0.68
        })
    }

    fn reach(&self) -> f64 {
        0.5 * self.width.hypot(self.height) + 2.0
    }
}

fn pixel_window(
    center: (f64, f64),
    radius: f64,
    width: usize,
    height: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let lo = |c: f64| (c - radius).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil().max(0.0) as usize).min(n);
    (lo(center.0)..hi(center.0, width), lo(center.1)..hi(center.1, height))
}

fn sample_diagnoses(rng: &mut ChaCha8Rng) -> DiagnosisSet {
    let primary = Diagnosis::ALL[rng.random_range(0..4)];
    let mut set = DiagnosisSet::empty().with(primary);
    if rng.random_bool(0.25) {
        let secondary = match primary {
            Diagnosis::Caries | Diagnosis::DeepCaries => Diagnosis::PeriapicalLesion,
            Diagnosis::PeriapicalLesion => {
                if rng.random_bool(0.5) {
                    Diagnosis::Caries
                } else {
                    Diagnosis::DeepCaries
                }
            }
            Diagnosis::Embedded => Diagnosis::ALL[rng.random_range(1..4)],
        };
        set.insert(secondary);
    }
    set
}

/// Renders image `index` of the corpus; depends only on `(cfg, index)`.
pub fn render_toy_image(cfg: &ToyConfig, index: usize) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f64, h as f64);
    let noise = Normal::new(0.0f64, 0.015).expect("valid sigma");

    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let yn = (y as f64 + 0.5) / hf;
        let jaw = |a: f64, b: f64| {
            let t = ((yn - a) / (b - a)).clamp(0.0, 1.0);
            (std::f64::consts::PI * t).sin()
        };
        let bone = jaw(0.06, 0.49).max(jaw(0.51, 0.94));
        for x in 0..w {
            let xn = (x as f64 + 0.5) / wf;
            let v = 0.10 + 0.12 * bone + 0.03 * (std::f64::consts::TAU * 1.5 * xn + phase).sin();
            data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    let mut raster = Raster::new(w, h, data).expect("valid extent");

    let margin = 0.04 * wf;
    let slot = (wf - 2.0 * margin) / 16.0;
    let mut teeth = Vec::new();
    for upper in [true, false] {
        for s in 0..16usize {
            let left = s < 8;
            let index_in_quadrant = if left { 8 - s } else { s - 7 } as u8;
            let quadrant = match (upper, left) {
                (true, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
                (false, true) => 4,
            };
            let tooth = ToothLabel::new(quadrant, index_in_quadrant).expect("valid tooth");

            // Draw every random quantity before deciding presence so one
            // tooth's fate never shifts the stream of its neighbours.
            let missing = rng.random_bool(cfg.missing_rate);
            let abnormal = rng.random_bool(cfg.abnormal_rate);
            let diagnoses_draw = sample_diagnoses(&mut rng);
            let jitter_x = rng.random_range(-1.5..1.5);
            let size_w = rng.random_range(0.96..1.04);
            let size_h = rng.random_range(0.96..1.04);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let tilt_mag = rng.random_range(20f64..35.0).to_radians();
            if missing {
                continue;
            }
            let diagnoses = if abnormal {
                diagnoses_draw
            } else {
                DiagnosisSet::empty()
            };

            let idx = index_in_quadrant as f64;
            let xc = margin + (s as f64 + 0.5) * slot + jitter_x;
            let u = (xc - wf / 2.0) / (wf / 2.0);
            let lift = 0.06 * hf * u * u;
            let th = 0.30 * hf * (0.9 + 0.02 * idx) * size_h;
            let tw = slot * (0.62 + 0.03 * idx) * size_w;
            let occlusal = if upper {
                0.5 * hf - 0.02 * hf - lift
            } else {
                0.5 * hf + 0.02 * hf - lift
            };
            let mut yc = if upper {
                occlusal - th / 2.0
            } else {
                occlusal + th / 2.0
            };
            let mut tilt = 0.0;
            if diagnoses.contains(Diagnosis::Embedded) {
                tilt = side * tilt_mag;
                yc += if upper { -0.2 * th } else { 0.2 * th };
            }
            let geom = ToothGeometry {
                center: (xc, yc),
                width: tw,
                height: th,
                tilt,
                upper,
            };
            if let Some(t) = paint_tooth(&mut raster, &geom, tooth, diagnoses, side) {
                teeth.push(t);
            }
        }
    }
    ToyImage {
        id: image_id(index),
        raster,
        teeth,
    }
}

fn paint_tooth(
    raster: &mut Raster,
    geom: &ToothGeometry,
    tooth: ToothLabel,
    diagnoses: DiagnosisSet,
    side: f64,
) -> Option<ToyTooth> {
    let (w, h) = (raster.width(), raster.height());
    let (xs, ys) = pixel_window(geom.center, geom.reach(), w, h);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in ys.clone() {
        for x in xs.clone() {
            let (u, v) = geom.local(x as f64 + 0.5, y as f64 + 0.5);
            if let Some(shade) = ToothGeometry::shade(u, v) {
                raster.set(x, y, shade);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).ok()?;

    let mut lesion = Vec::new();
    let mut spot = |raster: &mut Raster, u: f64, v: f64, r_in: f64, r_out: f64, value: f32, in_tooth: bool| {
        let center = geom.global(u, v);
        let (xs, ys) = pixel_window(center, r_out + 1.0, w, h);
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = (px - center.0).hypot(py - center.1);
                if d < r_in || d > r_out {
                    continue;
                }
                if in_tooth {
                    let (lu, lv) = geom.local(px, py);
                    if ToothGeometry::shade(lu, lv).is_none() {
                        continue;
                    }
                }
                raster.set(x, y, value);
                lesion.push((x, y));
            }
        }
    };
    let tw = geom.width;
    if diagnoses.contains(Diagnosis::Caries) {
        spot(raster, 0.22 * side, 0.08, 0.0, 0.16 * tw, 0.28, true);
    }
    if diagnoses.contains(Diagnosis::DeepCaries) {
        spot(raster, 0.12 * side, 0.17, 0.0, 0.26 * tw, 0.15, true);
    }
    if diagnoses.contains(Diagnosis::PeriapicalLesion) {
        spot(raster, 0.0, 1.0, 0.22 * tw, 0.42 * tw, 0.03, false);
    }
    lesion.sort_unstable_by_key(|&(x, y)| (y, x));
    lesion.dedup();
    Some(ToyTooth {
        tooth,
        bbox,
        diagnoses,
        lesion_pixels: lesion,
    })
}

/// Crop-aligned binary lesion mask for one tooth.
///
/// The full-resolution mask is resampled with the same geometry as the
/// image crop and thresholded at 0.5. Lesions too small to survive the
/// threshold fall back to any coverage, then to the single crop pixel
/// nearest the lesion centroid, so a tooth with a lesion never gets an
/// empty mask.
pub fn lesion_crop_mask(width: usize, height: usize, tooth: &ToyTooth, crop: &CropSpec) -> Result<Vec<bool>> {
    let n = crop.size * crop.size;
    if tooth.lesion_pixels.is_empty() {
        return Ok(vec![false; n]);
    }
    let mut full = Raster::filled(width, height, 0.0);
    for &(x, y) in &tooth.lesion_pixels {
        full.set(x, y, 1.0);
    }
    let resampled = crop.crop(&full, &tooth.bbox)?;
    let mut mask: Vec<bool> = resampled.data().iter().map(|&v| v >= 0.5).collect();
    if !mask.iter().any(|&m| m) {
        mask = resampled.data().iter().map(|&v| v > 0.0).collect();
    }
    if !mask.iter().any(|&m| m) {
        let region = crate::corpus::crop_region(&tooth.bbox, crop.pad_for(&tooth.bbox), width, height)?;
        let count = tooth.lesion_pixels.len() as f64;
        let cx = tooth.lesion_pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / count;
        let cy = tooth.lesion_pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / count;
        let to_cell = |c: f64, lo: f64, extent: f64| {
            (((c - lo) / extent * crop.size as f64).floor().max(0.0) as usize).min(crop.size - 1)
        };
        let j = to_cell(cx, region.x_min, region.width());
        let i = to_cell(cy, region.y_min, region.height());
        mask[i * crop.size + j] = true;
    }
    Ok(mask)
}

/// Renders the corpus and writes images, masks and the three annotation files into `out_dir`.
pub fn generate_toy_corpus(cfg: &ToyConfig, out_dir: &Path) -> Result<ToyCorpus> {
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let rendered: Vec<Result<(ImageRecord, ImageRecord, ImageRecord)>> = (0..cfg.n_images)
        .into_par_iter()
        .map(|index| {
            let img = render_toy_image(cfg, index);
            let file = format!("images/{}.png", img.id);
            img.raster.save_png(&out_dir.join(&file))?;
            let record = |annotations| ImageRecord {
                id: img.id.clone(),
                file: file.clone(),
                width: cfg.width,
                height: cfg.height,
                annotations,
            };
            let enum_anns = img
                .teeth
                .iter()
                .map(|t| AnnotationRecord::tooth(t.bbox, t.tooth))
                .collect();
            let mut diag_anns = Vec::new();
            let mut mask_anns = Vec::new();
            for t in img.teeth.iter().filter(|t| !t.diagnoses.is_empty()) {
                diag_anns.push(AnnotationRecord {
                    diagnoses: Some(t.diagnoses),
                    ..AnnotationRecord::tooth(t.bbox, t.tooth)
                });
                let mask = lesion_crop_mask(cfg.width, cfg.height, t, &cfg.crop)?;
                let mask_file = format!("masks/{}_{}.png", img.id, t.tooth.fdi_code());
                save_mask_png(&out_dir.join(&mask_file), cfg.crop.size, cfg.crop.size, &mask)?;
                mask_anns.push(AnnotationRecord {
                    diagnoses: Some(t.diagnoses),
                    mask: Some(mask_file),
                    ..AnnotationRecord::tooth(t.bbox, t.tooth)
                });
            }
            Ok((record(enum_anns), record(diag_anns), record(mask_anns)))
        })
        .collect();

    let mut corpus = ToyCorpus {
        enumeration: Dataset::new(CorpusKind::Enumeration, out_dir),
        diagnosis: Dataset::new(CorpusKind::Diagnosis, out_dir),
        masks: Dataset::new(CorpusKind::Mask, out_dir),
    };
    corpus.masks.crop = Some(cfg.crop);
    for r in rendered {
        let (e, d, m) = r?;
        corpus.enumeration.images.push(e);
        corpus.diagnosis.images.push(d);
        corpus.masks.images.push(m);
    }
    write_corpus(&corpus.enumeration, &out_dir.join(ENUMERATION_FILE))?;
    write_corpus(&corpus.diagnosis, &out_dir.join(DIAGNOSIS_FILE))?;
    write_corpus(&corpus.masks, &out_dir.join(MASK_FILE))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;

    fn small(seed: u64) -> ToyConfig {
        ToyConfig {
            n_images: 2,
            seed,
            crop: CropSpec {
                pad_fraction: 0.1,
                size: 32,
            },
            ..ToyConfig::default()
        }
    }

    #[test]
    fn healthy_full_mouth_has_32_teeth() {
        let cfg = ToyConfig {
            abnormal_rate: 0.0,
            missing_rate: 0.0,
            ..small(3)
        };
        for i in 0..2 {
            let img = render_toy_image(&cfg, i);
            assert_eq!(img.teeth.len(), 32);
            assert!(img.teeth.iter().all(|t| t.diagnoses.is_empty()));
            let mut ids: Vec<_> = img.teeth.iter().map(|t| t.tooth.class_id()).collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..32).collect::<Vec<_>>());
            assert!(img.teeth.iter().all(|t| t.bbox.within(512.0, 256.0)));
        }
    }

    #[test]
    fn quadrants_follow_radiographic_layout() {
        let cfg = ToyConfig {
            abnormal_rate: 0.0,
            missing_rate: 0.0,
            ..small(1)
        };
        let img = render_toy_image(&cfg, 0);
        for t in &img.teeth {
            let (cx, cy) = t.bbox.center();
            let left = cx < 256.0;
            let upper = cy < 128.0;
            let expected = match (upper, left) {
                (true, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
                (false, true) => 4,
            };
            assert_eq!(t.tooth.quadrant(), expected, "{}", t.tooth);
        }
    }

    #[test]
    fn lesions_and_masks_agree() {
        let cfg = ToyConfig {
            abnormal_rate: 1.0,
            missing_rate: 0.0,
            ..small(11)
        };
        let img = render_toy_image(&cfg, 1);
        for t in &img.teeth {
            assert!(!t.diagnoses.is_empty());
            let mask = lesion_crop_mask(512, 256, t, &cfg.crop).unwrap();
            assert_eq!(mask.iter().any(|&m| m), t.diagnoses.has_lesion(), "{}", t.tooth);
        }
    }

    #[test]
    fn images_are_independent_of_generation_order() {
        let cfg = small(5);
        let a = render_toy_image(&cfg, 1);
        let _ = render_toy_image(&cfg, 0);
        assert_eq!(render_toy_image(&cfg, 1), a);
        assert_ne!(render_toy_image(&cfg, 0).raster, a.raster);
    }

    #[test]
    fn written_corpora_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(2);
        let corpus = generate_toy_corpus(&cfg, dir.path()).unwrap();
        let e = load_corpus(&dir.path().join(ENUMERATION_FILE), CorpusKind::Enumeration).unwrap();
        let d = load_corpus(&dir.path().join(DIAGNOSIS_FILE), CorpusKind::Diagnosis).unwrap();
        let m = load_corpus(&dir.path().join(MASK_FILE), CorpusKind::Mask).unwrap();
        assert_eq!(e, corpus.enumeration);
        assert_eq!(d, corpus.diagnosis);
        assert_eq!(m, corpus.masks);
        let first = &m.images[0];
        if let Some(ann) = first.annotations.first() {
            assert_eq!(m.load_mask(first, ann).unwrap().len(), 32 * 32);
        }
        assert!(e.load_image(&e.images[1]).is_ok());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            n_images: 0,
            ..ToyConfig::default()
        };
        assert!(generate_toy_corpus(&cfg, dir.path()).is_err());
        let cfg = ToyConfig {
            abnormal_rate: 1.5,
            ..ToyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
