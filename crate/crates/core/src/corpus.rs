//! Annotation corpora, tooth crops and prediction files.
//!
//! A corpus is one JSON document with a COCO-like flat layout:
//!
//! ```json
//! {
//!   "images": [{"id": "img_0000", "file": "images/img_0000.png", "width": 512, "height": 256}],
//!   "annotations": [{"image_id": "img_0000", "bbox": [10, 20, 30, 90], "fdi": 36,
//!                    "diagnoses": ["caries"]}]
//! }
//! ```
//!
//! Image paths are relative to the directory holding the JSON file. Mask
//! corpora additionally carry a top-level `crop` block and a per-annotation
//! `mask` path pointing to a binary PNG aligned with the tooth crop.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_mask_png, Raster};
use crate::types::{BBox, Diagnosis, DiagnosisSet, ToothLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Every tooth boxed and numbered; no diagnoses.
    Enumeration,
    /// Only abnormal teeth boxed, each with at least one diagnosis.
    Diagnosis,
    /// Tooth crops paired with binary lesion masks.
    Mask,
}

/// How a tooth box becomes a square classifier/segmenter input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Padding on each side as a fraction of the box diagonal.
    pub pad_fraction: f64,
    /// Output side length in pixels.
    pub size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            pad_fraction: 0.1,
            size: 128,
        }
    }
}

impl CropSpec {
    pub fn pad_for(&self, bbox: &BBox) -> f64 {
        self.pad_fraction * bbox.diagonal()
    }

    pub fn crop(&self, image: &Raster, bbox: &BBox) -> Result<Raster> {
        crop_tooth(image, bbox, self.pad_for(bbox), self.size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub bbox: BBox,
    pub tooth: Option<ToothLabel>,
    pub diagnoses: Option<DiagnosisSet>,
    /// Mask PNG path relative to the corpus root (mask corpora only).
    pub mask: Option<String>,
}

impl AnnotationRecord {
    pub fn tooth(bbox: BBox, tooth: ToothLabel) -> Self {
        Self {
            bbox,
            tooth: Some(tooth),
            diagnoses: None,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Image path relative to the corpus root.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: CorpusKind,
    /// Directory that relative image and mask paths resolve against.
    pub root: PathBuf,
    pub images: Vec<ImageRecord>,
    /// Crop geometry the masks were cut with (mask corpora only).
    pub crop: Option<CropSpec>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop: Option<CropSpec>,
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    image_id: String,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fdi: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnoses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

impl Dataset {
    pub fn new(kind: CorpusKind, root: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            root: root.into(),
            images: Vec::new(),
            crop: None,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn image_path(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.file)
    }

    /// Loads the pixels of `image`, checking they match the recorded extent.
    pub fn load_image(&self, image: &ImageRecord) -> Result<Raster> {
        let raster = Raster::load(&self.image_path(image))?;
        if raster.width() != image.width || raster.height() != image.height {
            return Err(Error::record(
                &image.id,
                format!(
                    "image file is {}x{} but the corpus says {}x{}",
                    raster.width(),
                    raster.height(),
                    image.width,
                    image.height
                ),
            ));
        }
        Ok(raster)
    }

    /// Loads the lesion mask of a mask-corpus annotation as a flat crop-sized vector.
    pub fn load_mask(&self, image: &ImageRecord, ann: &AnnotationRecord) -> Result<Vec<bool>> {
        let crop = self
            .crop
            .ok_or_else(|| Error::Config("corpus has no crop specification".into()))?;
        let rel = ann
            .mask
            .as_ref()
            .ok_or_else(|| Error::record(&image.id, "annotation has no mask"))?;
        let (w, h, mask) = load_mask_png(&self.root.join(rel))?;
        if w != crop.size || h != crop.size {
            return Err(Error::record(
                format!("{}:{rel}", image.id),
                format!("mask is {w}x{h}, expected {0}x{0}", crop.size),
            ));
        }
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for image in &self.images {
            if !ids.insert(image.id.as_str()) {
                return Err(Error::record(&image.id, "duplicate image id"));
            }
            if image.width == 0 || image.height == 0 {
                return Err(Error::record(&image.id, "image extent must be positive"));
            }
            let mut seen = HashSet::new();
            for (k, ann) in image.annotations.iter().enumerate() {
                let name = format!("{}#{k}", image.id);
                ann.bbox.validate().map_err(|e| Error::record(&name, e.to_string()))?;
                if !ann.bbox.within(image.width as f64, image.height as f64) {
                    return Err(Error::record(
                        &name,
                        format!(
                            "box {:?} outside image {}x{}",
                            <[f64; 4]>::from(ann.bbox),
                            image.width,
                            image.height
                        ),
                    ));
                }
                let tooth = ann.tooth.ok_or_else(|| Error::record(&name, "missing tooth number"))?;
                if !seen.insert(tooth) {
                    return Err(Error::record(&name, format!("tooth {tooth} annotated twice")));
                }
                let diagnoses = ann.diagnoses.unwrap_or_default();
                match self.kind {
                    CorpusKind::Enumeration if !diagnoses.is_empty() => {
                        return Err(Error::record(
                            &name,
                            "enumeration corpus records must not carry diagnoses",
                        ));
                    }
                    CorpusKind::Diagnosis if diagnoses.is_empty() => {
                        return Err(Error::record(&name, "diagnosis record without disease labels"));
                    }
                    CorpusKind::Mask if ann.mask.is_none() => {
                        return Err(Error::record(&name, "mask record without a mask path"));
                    }
                    _ => {}
                }
            }
        }
        if self.kind == CorpusKind::Mask && self.crop.is_none() {
            return Err(Error::Config("mask corpus lacks its crop block".into()));
        }
        Ok(())
    }
}

/// Reads and validates a corpus file. Relative paths resolve against its directory.
pub fn load_corpus(path: &Path, kind: CorpusKind) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CorpusFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut images: Vec<ImageRecord> = file
        .images
        .into_iter()
        .map(|e| ImageRecord {
            id: e.id,
            file: e.file,
            width: e.width,
            height: e.height,
            annotations: Vec::new(),
        })
        .collect();
    let index: HashMap<String, usize> = images.iter().enumerate().map(|(i, im)| (im.id.clone(), i)).collect();

    for (k, ann) in file.annotations.into_iter().enumerate() {
        let name = format!("annotation #{k} (image {})", ann.image_id);
        let &slot = index
            .get(&ann.image_id)
            .ok_or_else(|| Error::record(&name, "refers to an unknown image id"))?;
        let tooth = ann
            .fdi
            .map(ToothLabel::from_fdi)
            .transpose()
            .map_err(|e| Error::record(&name, e.to_string()))?;
        let diagnoses = match ann.diagnoses {
            None => None,
            Some(names) => {
                let mut set = DiagnosisSet::empty();
                for n in names {
                    let d: Diagnosis = n.parse().map_err(|e: Error| Error::record(&name, e.to_string()))?;
                    if set.contains(d) {
                        return Err(Error::record(&name, format!("diagnosis {n:?} listed twice")));
                    }
                    set.insert(d);
                }
                Some(set)
            }
        };
        images[slot].annotations.push(AnnotationRecord {
            bbox: BBox::from(ann.bbox),
            tooth,
            diagnoses,
            mask: ann.mask,
        });
    }

    let ds = Dataset {
        kind,
        root,
        images,
        crop: file.crop,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` in the corpus JSON layout. The file lands at `path`; image and
/// mask paths are written verbatim, so they must already be relative to it.
pub fn write_corpus(ds: &Dataset, path: &Path) -> Result<()> {
    let file = CorpusFile {
        crop: ds.crop,
        images: ds
            .images
            .iter()
            .map(|im| ImageEntry {
                id: im.id.clone(),
                file: im.file.clone(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: ds
            .images
            .iter()
            .flat_map(|im| {
                im.annotations.iter().map(move |a| AnnotationEntry {
                    image_id: im.id.clone(),
                    bbox: a.bbox.into(),
                    fdi: a.tooth.map(|t| t.fdi_code()),
                    diagnoses: a.diagnoses.map(|s| s.iter().map(|d| d.as_str().to_string()).collect()),
                    mask: a.mask.clone(),
                })
            })
            .collect(),
    };
    write_json(path, &file)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// The image region a crop covers: `bbox` grown by `pad` on every side, clamped to the image.
pub fn crop_region(bbox: &BBox, pad: f64, width: usize, height: usize) -> Result<BBox> {
    bbox.validate()?;
    if pad.is_nan() || pad < 0.0 {
        return Err(Error::domain(format!("crop padding {pad} must be non-negative")));
    }
    BBox {
        x_min: bbox.x_min - pad,
        y_min: bbox.y_min - pad,
        x_max: bbox.x_max + pad,
        y_max: bbox.y_max + pad,
    }
    .clamp_to(width as f64, height as f64)
    .ok_or_else(|| Error::domain(format!("box {bbox:?} does not overlap the image")))
}

/// Cuts the padded tooth region out of `image` and resamples it bilinearly to
/// `out_size x out_size`, with intensities clamped to `[0, 1]`.
pub fn crop_tooth(image: &Raster, bbox: &BBox, pad: f64, out_size: usize) -> Result<Raster> {
    if out_size == 0 {
        return Err(Error::domain("crop size must be positive"));
    }
    let region = crop_region(bbox, pad, image.width(), image.height())?;
    let sx = region.width() / out_size as f64;
    let sy = region.height() / out_size as f64;
    let mut data = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let y = region.y_min + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..out_size {
            let x = region.x_min + (j as f64 + 0.5) * sx - 0.5;
            data.push(image.sample_bilinear(x, y).clamp(0.0, 1.0));
        }
    }
    Raster::new(out_size, out_size, data)
}

/// One abnormal tooth reported by the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothPrediction {
    pub bbox: BBox,
    #[serde(rename = "fdi")]
    pub tooth: ToothLabel,
    pub confidence: f64,
    pub diagnosis_probs: [f64; 4],
    pub diagnoses: DiagnosisSet,
}

/// Per-image output of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image_id: String,
    pub teeth: Vec<ToothPrediction>,
}

fn canonical_order(results: &[PipelineResult]) -> Vec<PipelineResult> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for r in &mut sorted {
        r.teeth
            .sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.tooth.cmp(&b.tooth)));
    }
    sorted
}

/// Writes predictions sorted by image id, then by confidence descending.
pub fn write_predictions(results: &[PipelineResult], path: &Path) -> Result<()> {
    for r in results {
        for t in &r.teeth {
            t.bbox
                .validate()
                .map_err(|e| Error::record(&r.image_id, e.to_string()))?;
            let probs_ok = t.diagnosis_probs.iter().all(|p| (0.0..=1.0).contains(p));
            if !(0.0..=1.0).contains(&t.confidence) || !probs_ok {
                return Err(Error::record(&r.image_id, "probability outside [0,1]"));
            }
        }
    }
    write_json(path, &canonical_order(results))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PipelineResult>> {
    read_json(path)
}

/// A tooth box with its abnormality ground truth; an empty set means healthy.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTooth {
    pub image_id: String,
    pub image_path: PathBuf,
    pub bbox: BBox,
    pub tooth: ToothLabel,
    pub diagnoses: DiagnosisSet,
}

/// Derives healthy/abnormal tooth labels from the two annotation corpora.
///
/// Every diagnosis-corpus tooth is abnormal. A tooth numbered in the
/// enumeration corpus is healthy when its image is also listed in the
/// diagnosis corpus and carries no diagnosis there; enumeration-only images
/// say nothing about health and contribute no samples.
pub fn mine_tooth_labels(enumeration: &Dataset, diagnosis: &Dataset) -> Result<Vec<LabeledTooth>> {
    if enumeration.kind != CorpusKind::Enumeration || diagnosis.kind != CorpusKind::Diagnosis {
        return Err(Error::Config(
            "label mining needs an enumeration and a diagnosis corpus".into(),
        ));
    }
    let mut abnormal: BTreeMap<(&str, ToothLabel), &AnnotationRecord> = BTreeMap::new();
    for image in &diagnosis.images {
        for ann in &image.annotations {
            let tooth = ann.tooth.expect("validated");
            abnormal.insert((image.id.as_str(), tooth), ann);
        }
    }
    let enum_images: HashMap<&str, &ImageRecord> = enumeration.images.iter().map(|im| (im.id.as_str(), im)).collect();

    let mut out = Vec::new();
    for image in &diagnosis.images {
        match enum_images.get(image.id.as_str()) {
            Some(enum_image) => {
                // Enumeration boxes are authoritative for teeth numbered in both.
                for ann in &enum_image.annotations {
                    let tooth = ann.tooth.expect("validated");
                    let diagnoses = abnormal
                        .get(&(image.id.as_str(), tooth))
                        .and_then(|a| a.diagnoses)
                        .unwrap_or_default();
                    out.push(LabeledTooth {
                        image_id: image.id.clone(),
                        image_path: enumeration.image_path(enum_image),
                        bbox: ann.bbox,
                        tooth,
                        diagnoses,
                    });
                }
                let numbered: HashSet<ToothLabel> = enum_image.annotations.iter().filter_map(|a| a.tooth).collect();
                for ann in &image.annotations {
                    let tooth = ann.tooth.expect("validated");
                    if !numbered.contains(&tooth) {
                        out.push(labeled_from(diagnosis, image, ann));
                    }
                }
            }
            None => {
                out.extend(image.annotations.iter().map(|a| labeled_from(diagnosis, image, a)));
            }
        }
    }
    Ok(out)
}

fn labeled_from(ds: &Dataset, image: &ImageRecord, ann: &AnnotationRecord) -> LabeledTooth {
    LabeledTooth {
        image_id: image.id.clone(),
        image_path: ds.image_path(image),
        bbox: ann.bbox,
        tooth: ann.tooth.expect("validated"),
        diagnoses: ann.diagnoses.unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn write(dir: &Path, name: &str, json: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn loads_enumeration_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<String> = (0..8)
            .map(|i| format!(r#"{{"id":"im{i}","file":"im{i}.png","width":100,"height":50}}"#))
            .collect();
        let anns: Vec<String> = (0..8)
            .map(|i| format!(r#"{{"image_id":"im{i}","bbox":[1,2,11,40],"fdi":{}}}"#, 11 + i))
            .collect();
        let json = format!(
            r#"{{"images":[{}],"annotations":[{}]}}"#,
            images.join(","),
            anns.join(",")
        );
        let p = write(dir.path(), "enum.json", &json);
        let ds = load_corpus(&p, CorpusKind::Enumeration).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.annotation_count(), 8);
        assert!(ds
            .images
            .iter()
            .all(|im| im.annotations.iter().all(|a| a.tooth.is_some())));
        assert_eq!(ds.image_path(&ds.images[3]), dir.path().join("im3.png"));
    }

    #[test]
    fn empty_image_list_is_a_valid_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.json", r#"{"images":[],"annotations":[]}"#);
        assert!(load_corpus(&p, CorpusKind::Diagnosis).unwrap().is_empty());
    }

    #[test]
    fn rejects_invalid_records() {
        let dir = tempfile::tempdir().unwrap();
        let head = r#"{"images":[{"id":"a","file":"a.png","width":100,"height":50}],"annotations":["#;
        let cases = [
            (
                CorpusKind::Diagnosis,
                r#"{"image_id":"a","bbox":[1,2,11,40],"fdi":11}"#,
                "disease",
            ),
            (
                CorpusKind::Diagnosis,
                r#"{"image_id":"a","bbox":[1,2,11,40],"fdi":11,"diagnoses":["pulpitis"]}"#,
                "pulpitis",
            ),
            (
                CorpusKind::Enumeration,
                r#"{"image_id":"a","bbox":[1,2,111,40],"fdi":11}"#,
                "outside",
            ),
            (
                CorpusKind::Enumeration,
                r#"{"image_id":"b","bbox":[1,2,11,40],"fdi":11}"#,
                "unknown image",
            ),
            (
                CorpusKind::Enumeration,
                r#"{"image_id":"a","bbox":[1,2,11,40],"fdi":19}"#,
                "FDI",
            ),
            (
                CorpusKind::Enumeration,
                r#"{"image_id":"a","bbox":[1,2,11,40]}"#,
                "tooth number",
            ),
            (
                CorpusKind::Enumeration,
                r#"{"image_id":"a","bbox":[1,2,11,40],"fdi":11,"diagnoses":["caries"]}"#,
                "must not",
            ),
        ];
        for (kind, ann, needle) in cases {
            let p = write(dir.path(), "c.json", &format!("{head}{ann}]}}"));
            let err = load_corpus(&p, kind).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} lacks {needle}");
            assert!(err.contains("a"), "error should name the record: {err}");
        }
        assert!(matches!(
            load_corpus(&dir.path().join("missing.json"), CorpusKind::Enumeration),
            Err(Error::Io { .. })
        ));
        let p = write(dir.path(), "bad.json", "{not json");
        assert!(matches!(
            load_corpus(&p, CorpusKind::Enumeration),
            Err(Error::Json { .. })
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            kind: CorpusKind::Diagnosis,
            root: dir.path().to_path_buf(),
            images: vec![ImageRecord {
                id: "x".into(),
                file: "x.png".into(),
                width: 64,
                height: 32,
                annotations: vec![AnnotationRecord {
                    bbox: bbox(0.5, 1.25, 10.0, 30.0),
                    tooth: Some(ToothLabel::from_fdi(47).unwrap()),
                    diagnoses: Some(DiagnosisSet::empty().with(Diagnosis::DeepCaries)),
                    mask: None,
                }],
            }],
            crop: None,
        };
        let p = dir.path().join("d.json");
        write_corpus(&ds, &p).unwrap();
        assert_eq!(load_corpus(&p, CorpusKind::Diagnosis).unwrap(), ds);
    }

    #[test]
    fn crop_region_examples() {
        let interior = bbox(20.0, 10.0, 40.0, 30.0);
        assert_eq!(crop_region(&interior, 0.0, 100, 50).unwrap(), interior);
        let left = bbox(0.0, 10.0, 12.0, 30.0);
        let r = crop_region(&left, 8.0, 100, 50).unwrap();
        assert_eq!(r, bbox(0.0, 2.0, 20.0, 38.0));
        assert!(crop_region(&left, -1.0, 100, 50).is_err());
    }

    #[test]
    fn crop_has_requested_shape_and_range() {
        let img = Raster::new(50, 40, (0..2000).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
        let c = crop_tooth(&img, &bbox(3.0, 4.0, 20.0, 39.0), 5.0, 128).unwrap();
        assert_eq!((c.width(), c.height()), (128, 128));
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let degenerate = BBox {
            x_min: 3.0,
            y_min: 4.0,
            x_max: 3.0,
            y_max: 9.0,
        };
        assert!(crop_tooth(&img, &degenerate, 0.0, 16).is_err());
    }

    #[test]
    fn crop_at_native_scale_copies_pixels() {
        let img = Raster::new(8, 8, (0..64).map(|i| i as f32 / 63.0).collect()).unwrap();
        let c = crop_tooth(&img, &bbox(2.0, 3.0, 6.0, 7.0), 0.0, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.get(j, i), img.get(j + 2, i + 3));
            }
        }
    }

    fn prediction(fdi: u8, conf: f64) -> ToothPrediction {
        ToothPrediction {
            bbox: bbox(1.0, 2.0, 3.0 + conf, 4.0),
            tooth: ToothLabel::from_fdi(fdi).unwrap(),
            confidence: conf,
            diagnosis_probs: [0.1, 0.25, 1.0 / 3.0, 0.9],
            diagnoses: DiagnosisSet::empty().with(Diagnosis::DeepCaries),
        }
    }

    #[test]
    fn predictions_are_sorted_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            PipelineResult {
                image_id: "b".into(),
                teeth: vec![prediction(11, 0.7), prediction(36, 0.912345678901)],
            },
            PipelineResult {
                image_id: "a".into(),
                teeth: vec![],
            },
        ];
        let p = dir.path().join("p.json");
        write_predictions(&results, &p).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back[0].image_id, "a");
        assert_eq!(back[1].teeth[0].tooth.fdi_code(), 36);
        assert_eq!(back, canonical_order(&results));

        let q = dir.path().join("q.json");
        write_predictions(&results, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());

        let e = dir.path().join("e.json");
        write_predictions(&[], &e).unwrap();
        assert!(read_predictions(&e).unwrap().is_empty());

        assert!(matches!(
            write_predictions(&results, &dir.path().join("no/such/dir.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mining_labels_healthy_and_abnormal_teeth() {
        let t = |c| ToothLabel::from_fdi(c).unwrap();
        let img = |id: &str, anns: Vec<AnnotationRecord>| ImageRecord {
            id: id.into(),
            file: format!("{id}.png"),
            width: 100,
            height: 100,
            annotations: anns,
        };
        let mut enumeration = Dataset::new(CorpusKind::Enumeration, "/e");
        enumeration.images = vec![
            img(
                "a",
                vec![
                    AnnotationRecord::tooth(bbox(0.0, 0.0, 5.0, 5.0), t(11)),
                    AnnotationRecord::tooth(bbox(5.0, 0.0, 9.0, 5.0), t(12)),
                ],
            ),
            img(
                "only_enum",
                vec![AnnotationRecord::tooth(bbox(0.0, 0.0, 5.0, 5.0), t(11))],
            ),
        ];
        let mut diagnosis = Dataset::new(CorpusKind::Diagnosis, "/d");
        let mut sick = AnnotationRecord::tooth(bbox(5.5, 0.0, 9.0, 5.0), t(12));
        sick.diagnoses = Some(DiagnosisSet::empty().with(Diagnosis::Caries));
        diagnosis.images = vec![img("a", vec![sick.clone()]), img("only_diag", vec![sick])];

        let labels = mine_tooth_labels(&enumeration, &diagnosis).unwrap();
        assert_eq!(labels.len(), 3);
        assert!(labels[0].diagnoses.is_empty());
        assert_eq!(labels[1].tooth, t(12));
        assert!(labels[1].diagnoses.contains(Diagnosis::Caries));
        assert_eq!(labels[1].bbox, bbox(5.0, 0.0, 9.0, 5.0));
        assert_eq!(labels[2].image_id, "only_diag");
        assert_eq!(labels[2].image_path, PathBuf::from("/d/only_diag.png"));
        assert!(mine_tooth_labels(&diagnosis, &enumeration).is_err());
    }
}
