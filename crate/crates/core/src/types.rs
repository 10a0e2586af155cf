//! Shared vocabulary: FDI tooth labels, pixel boxes, detections and diagnoses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tooth classes the detector distinguishes (4 quadrants x 8 positions).
pub const NUM_TOOTH_CLASSES: usize = 32;

/// A permanent tooth in FDI notation: quadrant 1..=4, position 1..=8.
///
/// Quadrants follow radiographic convention: 1 upper right, 2 upper left,
/// 3 lower left, 4 lower right (patient's side). On a panoramic image the
/// patient's right appears on the left of the picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ToothLabel {
    quadrant: u8,
    index: u8,
}

impl ToothLabel {
    pub fn new(quadrant: u8, index: u8) -> Result<Self> {
        if !(1..=4).contains(&quadrant) {
            return Err(Error::domain(format!("quadrant {quadrant} not in 1..=4")));
        }
        if !(1..=8).contains(&index) {
            return Err(Error::domain(format!("tooth index {index} not in 1..=8")));
        }
        Ok(Self { quadrant, index })
    }

    pub fn quadrant(self) -> u8 {
        self.quadrant
    }

    pub fn index(self) -> u8 {
        self.index
    }

    /// Two-digit FDI code, e.g. 36 for quadrant 3 position 6.
    pub fn fdi_code(self) -> u8 {
        10 * self.quadrant + self.index
    }

    pub fn from_fdi(code: u8) -> Result<Self> {
        Self::new(code / 10, code % 10)
            .map_err(|_| Error::domain(format!("{code} is not a permanent-dentition FDI code")))
    }

    /// Flat detector class id, `8 * (quadrant - 1) + (index - 1)`.
    pub fn class_id(self) -> usize {
        8 * (self.quadrant as usize - 1) + (self.index as usize - 1)
    }

    pub fn from_class_id(class_id: usize) -> Result<Self> {
        if class_id >= NUM_TOOTH_CLASSES {
            return Err(Error::domain(format!(
                "class id {class_id} outside 0..{NUM_TOOTH_CLASSES}"
            )));
        }
        Ok(Self {
            quadrant: (class_id / 8) as u8 + 1,
            index: (class_id % 8) as u8 + 1,
        })
    }

    /// The anatomically mirrored tooth: quadrants 1<->2 and 3<->4.
    pub fn mirrored(self) -> Self {
        let quadrant = match self.quadrant {
            1 => 2,
            2 => 1,
            3 => 4,
            _ => 3,
        };
        Self {
            quadrant,
            index: self.index,
        }
    }

    /// All 32 labels in class-id order.
    pub fn all() -> impl Iterator<Item = ToothLabel> {
        (0..NUM_TOOTH_CLASSES).map(|c| Self::from_class_id(c).expect("in range"))
    }
}

impl fmt::Display for ToothLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.fdi_code())
    }
}

impl TryFrom<u8> for ToothLabel {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        Self::from_fdi(code)
    }
}

impl From<ToothLabel> for u8 {
    fn from(label: ToothLabel) -> u8 {
        label.fdi_code()
    }
}

pub fn encode_class(label: ToothLabel) -> usize {
    label.class_id()
}

pub fn decode_class(class_id: usize) -> Result<ToothLabel> {
    ToothLabel::from_class_id(class_id)
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    /// Builds a box, rejecting non-finite or degenerate extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::domain(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// IoU without validity checks; callers guarantee both boxes are valid.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Whether the box lies within `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Intersects with the image rectangle; `None` when nothing of positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// One detector output: a box, its tooth class and a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Result<Self> {
        bbox.validate()?;
        if class_id >= NUM_TOOTH_CLASSES {
            return Err(Error::domain(format!("class id {class_id} out of range")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::domain(format!("confidence {confidence} outside [0,1]")));
        }
        Ok(Self {
            bbox,
            class_id,
            confidence,
        })
    }

    pub fn tooth(&self) -> ToothLabel {
        ToothLabel::from_class_id(self.class_id).expect("validated class id")
    }
}

/// Tooth conditions, in the fixed order used for probability vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Embedded = 0,
    PeriapicalLesion = 1,
    Caries = 2,
    DeepCaries = 3,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 4] = [
        Diagnosis::Embedded,
        Diagnosis::PeriapicalLesion,
        Diagnosis::Caries,
        Diagnosis::DeepCaries,
    ];
    pub const COUNT: usize = 4;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::domain(format!("diagnosis code {code} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Embedded => "embedded",
            Diagnosis::PeriapicalLesion => "periapical_lesion",
            Diagnosis::Caries => "caries",
            Diagnosis::DeepCaries => "deep_caries",
        }
    }

    /// Whether the condition shows up as a radiolucent lesion (segmentable).
    pub fn is_lesion(self) -> bool {
        !matches!(self, Diagnosis::Embedded)
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown diagnosis {s:?}")))
    }
}

/// A set of diagnoses stored as a 4-bit vector aligned with [`Diagnosis`] codes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiagnosisSet(u8);

impl DiagnosisSet {
    pub const fn empty() -> Self {
        Self(0)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits > 0b1111 {
            return Err(Error::domain(format!("diagnosis bits {bits:#b} exceed 4 labels")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, d: Diagnosis) {
        self.0 |= 1 << d.code();
    }

    pub fn with(mut self, d: Diagnosis) -> Self {
        self.insert(d);
        self
    }

    pub fn contains(self, d: Diagnosis) -> bool {
        self.0 & (1 << d.code()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Diagnosis> {
        Diagnosis::ALL.into_iter().filter(move |d| self.contains(*d))
    }

    /// Whether any member is a lesion class (caries, deep caries, periapical lesion).
    pub fn has_lesion(self) -> bool {
        self.iter().any(Diagnosis::is_lesion)
    }

    /// Indicator vector in code order.
    pub fn to_indicator(self) -> [f32; 4] {
        let mut v = [0.0; 4];
        for d in self.iter() {
            v[d.code()] = 1.0;
        }
        v
    }
}

impl FromIterator<Diagnosis> for DiagnosisSet {
    fn from_iter<I: IntoIterator<Item = Diagnosis>>(iter: I) -> Self {
        let mut set = Self::empty();
        for d in iter {
            set.insert(d);
        }
        set
    }
}

impl fmt::Display for DiagnosisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Diagnosis::as_str).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

impl Serialize for DiagnosisSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for DiagnosisSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut set = DiagnosisSet::empty();
        for name in names {
            let diag = name.parse::<Diagnosis>().map_err(serde::de::Error::custom)?;
            if set.contains(diag) {
                return Err(serde::de::Error::custom(format!("duplicate diagnosis {name:?}")));
            }
            set.insert(diag);
        }
        Ok(set)
    }
}
