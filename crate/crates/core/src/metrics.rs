//! Detection AP at multiple IoU thresholds and F1 for the two classifiers.
//!
//! AP follows the COCO convention: greedy confidence-ordered matching per
//! image and class, a precision envelope, and 101 recall points. The
//! unsuffixed AP averages thresholds 0.50, 0.55, ..., 0.95.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{mine_tooth_labels, Dataset, PipelineResult};
use crate::error::{Error, Result};
use crate::types::{BBox, Detection, Diagnosis, DiagnosisSet, ToothLabel, NUM_TOOTH_CLASSES};

/// Predictions must reach this IoU with a ground-truth tooth to count as it
/// when scoring the filter and the diagnoser.
pub const CLASSIFICATION_MATCH_IOU: f64 = 0.5;

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index, iou)` in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

/// Greedy matching within one image: predictions in descending confidence
/// (ties by index) each take the unmatched same-class ground truth of highest
/// IoU, provided it reaches `iou_thresh`.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != preds[p].class_id {
                continue;
            }
            let iou = preds[p].bbox.iou(&gt.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                result.pairs.push((p, g, iou));
            }
            None => result.unmatched_predictions.push(p),
        }
    }
    result.unmatched_ground_truths = (0..gts.len()).filter(|&g| !taken[g]).collect();
    result
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub predictions: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// AP per class id, for classes with at least one ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// 101-point interpolated area under the precision/recall curve for a
/// confidence-ranked list of true/false positive flags.
fn interpolated_ap(tp_flags: &[bool], positives: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let first = recall.partition_point(|&x| x < level);
        if first < precision.len() {
            sum += precision[first];
        }
    }
    sum / 101.0
}

/// Per-class AP at one IoU threshold, averaged over classes with ground truth.
pub fn average_precision(images: &[ImageEval], iou_thresh: f64) -> Result<ApResult> {
    let mut positives = [0usize; NUM_TOOTH_CLASSES];
    for im in images {
        for g in &im.ground_truths {
            if g.class_id >= NUM_TOOTH_CLASSES {
                return Err(Error::domain(format!("ground-truth class {} out of range", g.class_id)));
            }
            positives[g.class_id] += 1;
        }
    }
    if positives.iter().all(|&n| n == 0) {
        return Err(Error::domain("average precision is undefined without ground truth"));
    }

    // (confidence, image, prediction, matched) bucketed by class.
    let mut ranked: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); NUM_TOOTH_CLASSES];
    for (i, im) in images.iter().enumerate() {
        let m = match_detections(&im.predictions, &im.ground_truths, iou_thresh);
        let mut matched = vec![false; im.predictions.len()];
        for &(p, _, _) in &m.pairs {
            matched[p] = true;
        }
        for (p, det) in im.predictions.iter().enumerate() {
            ranked[det.class_id].push((det.confidence, i, p, matched[p]));
        }
    }

    let mut per_class = BTreeMap::new();
    for (class, list) in ranked.iter_mut().enumerate() {
        if positives[class] == 0 {
            continue;
        }
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = list.iter().map(|e| e.3).collect();
        per_class.insert(class, interpolated_ap(&flags, positives[class]));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApResult { per_class, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Threshold-averaged AP per FDI code.
    pub per_class: BTreeMap<String, f64>,
}

pub fn ap_summary(images: &[ImageEval]) -> Result<DetectionSummary> {
    let thresholds = coco_iou_thresholds();
    let results = thresholds
        .iter()
        .map(|&t| average_precision(images, t))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let ap = results.iter().map(|r| r.mean).sum::<f64>() / n;
    let mut per_class = BTreeMap::new();
    for class in results[0].per_class.keys() {
        let mean = results.iter().map(|r| r.per_class[class]).sum::<f64>() / n;
        let fdi = ToothLabel::from_class_id(*class)?.fdi_code();
        per_class.insert(fdi.to_string(), mean);
    }
    Ok(DetectionSummary {
        ap,
        ap50: results[0].mean,
        ap75: results[5].mean,
        per_class,
    })
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is positive.
pub fn f1_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::domain(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = [0usize; 3];
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => counts[0] += 1,
            (true, false) => counts[1] += 1,
            (false, true) => counts[2] += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(counts[0], counts[1], counts[2]))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-label F1 over labels with at least one true instance.
    #[default]
    Macro,
    /// F1 of the pooled label decisions.
    Micro,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            other => Err(Error::Config(format!("unknown averaging {other:?}"))),
        }
    }
}

pub fn f1_multilabel(pred: &[DiagnosisSet], truth: &[DiagnosisSet], averaging: Averaging) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::domain(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = [[0usize; 3]; Diagnosis::COUNT];
    for (p, t) in pred.iter().zip(truth) {
        for d in Diagnosis::ALL {
            let c = &mut counts[d.code()];
            match (p.contains(d), t.contains(d)) {
                (true, true) => c[0] += 1,
                (true, false) => c[1] += 1,
                (false, true) => c[2] += 1,
                _ => {}
            }
        }
    }
    Ok(match averaging {
        Averaging::Micro => {
            let total = counts
                .iter()
                .fold([0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]]);
            f1_from_counts(total[0], total[1], total[2])
        }
        Averaging::Macro => {
            let supported: Vec<f64> = counts
                .iter()
                .filter(|c| c[0] + c[2] > 0)
                .map(|c| f1_from_counts(c[0], c[1], c[2]))
                .collect();
            if supported.is_empty() {
                0.0
            } else {
                supported.iter().sum::<f64>() / supported.len() as f64
            }
        }
    })
}

/// Pairs cascade predictions with a ground-truth corpus for AP computation.
/// Images absent from the ground truth are ignored.
pub fn detection_instances(preds: &[PipelineResult], gt: &Dataset) -> Vec<ImageEval> {
    let by_id: HashMap<&str, &PipelineResult> = preds.iter().map(|r| (r.image_id.as_str(), r)).collect();
    gt.images
        .iter()
        .map(|im| ImageEval {
            ground_truths: im
                .annotations
                .iter()
                .filter_map(|a| {
                    a.tooth.map(|t| GroundTruth {
                        bbox: a.bbox,
                        class_id: t.class_id(),
                    })
                })
                .collect(),
            predictions: by_id
                .get(im.id.as_str())
                .map(|r| {
                    r.teeth
                        .iter()
                        .map(|t| Detection {
                            bbox: t.bbox,
                            class_id: t.tooth.class_id(),
                            confidence: t.confidence,
                        })
                        .collect()
                })
                .unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeScores {
    /// F1 of abnormal-vs-healthy over labeled teeth plus unmatched predictions.
    pub filter_f1: f64,
    pub filter_samples: usize,
    /// Multi-label F1 over abnormal teeth the cascade reported.
    pub diagnosis_f1: f64,
    pub diagnosis_samples: usize,
}

/// Scores the filter and diagnoser stages from cascade output.
///
/// Ground truth comes from [`mine_tooth_labels`]. A labeled tooth counts as
/// flagged when the cascade reports the same FDI code with a box of IoU at
/// least [`CLASSIFICATION_MATCH_IOU`]. Reported teeth that match no labeled
/// tooth in a labeled image are false positives of the filter. The
/// diagnoser is scored on truly abnormal teeth that were flagged.
pub fn cascade_scores(
    preds: &[PipelineResult],
    enumeration: &Dataset,
    diagnosis: &Dataset,
    averaging: Averaging,
) -> Result<CascadeScores> {
    let labels = mine_tooth_labels(enumeration, diagnosis)?;
    let by_id: HashMap<&str, &PipelineResult> = preds.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut used: HashMap<&str, Vec<bool>> = by_id.iter().map(|(k, r)| (*k, vec![false; r.teeth.len()])).collect();

    let (mut flag_pred, mut flag_true) = (Vec::new(), Vec::new());
    let (mut diag_pred, mut diag_true) = (Vec::new(), Vec::new());
    for label in &labels {
        let hit = by_id.get(label.image_id.as_str()).and_then(|r| {
            let used = used.get_mut(label.image_id.as_str()).expect("same keys");
            let k = r.teeth.iter().enumerate().position(|(k, t)| {
                !used[k] && t.tooth == label.tooth && t.bbox.iou(&label.bbox) >= CLASSIFICATION_MATCH_IOU
            })?;
            used[k] = true;
            Some(&r.teeth[k])
        });
        flag_pred.push(hit.is_some());
        flag_true.push(!label.diagnoses.is_empty());
        if let (Some(t), false) = (hit, label.diagnoses.is_empty()) {
            diag_pred.push(t.diagnoses);
            diag_true.push(label.diagnoses);
        }
    }
    let labeled_images: std::collections::HashSet<&str> = labels.iter().map(|l| l.image_id.as_str()).collect();
    for (id, flags) in &used {
        if labeled_images.contains(id) {
            for _ in flags.iter().filter(|u| !**u) {
                flag_pred.push(true);
                flag_true.push(false);
            }
        }
    }

    Ok(CascadeScores {
        filter_f1: f1_binary(&flag_pred, &flag_true)?,
        filter_samples: flag_pred.len(),
        diagnosis_f1: f1_multilabel(&diag_pred, &diag_true, averaging)?,
        diagnosis_samples: diag_pred.len(),
    })
}

/// Everything `evaluate` reports, mirroring the AP / AP75 / AP50 / F1 table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Option<DetectionSummary>,
    pub cascade: Option<CascadeScores>,
    pub averaging: Averaging,
}

const ROWS: [&str; 3] = [
    "Teeth detection and numbering",
    "Healthy teeth filtering",
    "Abnormal teeth classification",
];

impl EvalReport {
    /// Plain-text table with columns Model, AP, AP75, AP50, F1; `-` marks
    /// cells a row does not report.
    pub fn render_table(&self, decimals: usize) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.decimals$}"));
        let det = self.detection.as_ref();
        let cas = self.cascade.as_ref();
        let rows = [
            [
                ROWS[0].to_string(),
                fmt(det.map(|d| d.ap)),
                fmt(det.map(|d| d.ap75)),
                fmt(det.map(|d| d.ap50)),
                "-".to_string(),
            ],
            [
                ROWS[1].to_string(),
                "-".into(),
                "-".into(),
                "-".into(),
                fmt(cas.map(|c| c.filter_f1)),
            ],
            [
                ROWS[2].to_string(),
                "-".into(),
                "-".into(),
                "-".into(),
                fmt(cas.map(|c| c.diagnosis_f1)),
            ],
        ];
        let header = ["Model", "AP", "AP75", "AP50", "F1"].map(String::from);
        let mut widths = header.clone().map(|h| h.len());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String; 5]| {
            let mut s = String::from("|");
            for (cell, w) in cells.iter().zip(widths) {
                let _ = write!(s, " {cell:<w$} |");
            }
            s
        };
        let mut out = line(&header);
        out.push('\n');
        out.push('|');
        for w in widths {
            out.push_str(&"-".repeat(w + 2));
            out.push('|');
        }
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: BBox::from(b),
            class_id,
            confidence,
        }
    }

    fn gt(b: [f64; 4], class_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::from(b),
            class_id,
        }
    }

    #[test]
    fn greedy_prefers_confident_prediction() {
        let gts = [gt([0.0, 0.0, 10.0, 10.0], 3)];
        let preds = [det([0.0, 0.0, 10.0, 9.0], 3, 0.8), det([0.0, 0.0, 10.0, 9.5], 3, 0.9)];
        let m = match_detections(&preds, &gts, 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].0, 1);
        assert_eq!(m.unmatched_predictions, vec![0]);
        assert!(m.unmatched_ground_truths.is_empty());
    }

    #[test]
    fn low_iou_and_wrong_class_do_not_match() {
        let gts = [gt([0.0, 0.0, 10.0, 10.0], 3)];
        // IoU 0.4: intersection 40, union 100.
        let m = match_detections(&[det([0.0, 0.0, 10.0, 4.0], 3, 0.9)], &gts, 0.5);
        assert!(m.pairs.is_empty());
        let m = match_detections(&[det([0.0, 0.0, 10.0, 10.0], 4, 0.9)], &gts, 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_ground_truths, vec![0]);
    }

    #[test]
    fn single_pair_ap_at_two_thresholds() {
        // IoU 0.6: prediction covers 6/10 of the ground truth width.
        let images = [ImageEval {
            predictions: vec![det([0.0, 0.0, 6.0, 10.0], 0, 0.9)],
            ground_truths: vec![gt([0.0, 0.0, 10.0, 10.0], 0)],
        }];
        assert_eq!(average_precision(&images, 0.5).unwrap().mean, 1.0);
        assert_eq!(average_precision(&images, 0.75).unwrap().mean, 0.0);
    }

    #[test]
    fn zero_predictions_give_zero_ap_and_no_gt_is_an_error() {
        let images = [ImageEval {
            predictions: vec![],
            ground_truths: vec![gt([0.0, 0.0, 1.0, 1.0], 2), gt([0.0, 0.0, 1.0, 1.0], 5)],
        }];
        let r = average_precision(&images, 0.5).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.mean, 0.0);
        let empty = [ImageEval {
            predictions: vec![det([0.0, 0.0, 1.0, 1.0], 0, 0.5)],
            ground_truths: vec![],
        }];
        assert!(average_precision(&empty, 0.5).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let images: Vec<ImageEval> = (0..3)
            .map(|i| {
                let boxes: Vec<_> = (0..4)
                    .map(|c| [c as f64 * 20.0, i as f64, c as f64 * 20.0 + 15.0, 30.0])
                    .collect();
                ImageEval {
                    predictions: boxes.iter().enumerate().map(|(c, b)| det(*b, c, 0.9)).collect(),
                    ground_truths: boxes.iter().enumerate().map(|(c, b)| gt(*b, c)).collect(),
                }
            })
            .collect();
        let s = ap_summary(&images).unwrap();
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
        assert_eq!(s.per_class.len(), 4);
    }

    #[test]
    fn half_recall_curve() {
        // Two ground truths, one true positive ranked first: precision 1 up to recall 0.5.
        let images = [ImageEval {
            predictions: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([50.0, 0.0, 60.0, 10.0], 0, 0.8),
            ],
            ground_truths: vec![gt([0.0, 0.0, 10.0, 10.0], 0), gt([20.0, 0.0, 30.0, 10.0], 0)],
        }];
        let ap = average_precision(&images, 0.5).unwrap().mean;
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(f1_binary(&[false, false], &[false, false]).unwrap(), 0.0);
        assert!(f1_binary(&[true], &[]).is_err());
        let mut pred = vec![true; 7];
        pred.extend([false; 3]);
        let mut truth = vec![true; 5];
        truth.extend([false; 2]);
        truth.extend([true; 3]);
        assert!((f1_binary(&pred, &truth).unwrap() - 10.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_excludes_unsupported_labels() {
        let c = DiagnosisSet::empty().with(Diagnosis::Caries);
        let sets = vec![c, c, DiagnosisSet::empty()];
        assert_eq!(f1_multilabel(&sets, &sets, Averaging::Macro).unwrap(), 1.0);
        assert_eq!(f1_multilabel(&sets, &sets, Averaging::Micro).unwrap(), 1.0);
        let e = DiagnosisSet::empty().with(Diagnosis::Embedded);
        // Embedded predicted once without support: excluded from macro, hurts micro.
        let pred = vec![c.with(Diagnosis::Embedded), c, DiagnosisSet::empty()];
        assert_eq!(f1_multilabel(&pred, &sets, Averaging::Macro).unwrap(), 1.0);
        assert!((f1_multilabel(&pred, &sets, Averaging::Micro).unwrap() - 0.8).abs() < 1e-15);
        assert!(f1_multilabel(&[e], &[], Averaging::Macro).is_err());
    }

    #[test]
    fn micro_f1_equals_flattened_binary_f1() {
        let sets: Vec<DiagnosisSet> = (0..16u8).map(|b| DiagnosisSet::from_bits(b).unwrap()).collect();
        let pred: Vec<DiagnosisSet> = (0..16u8)
            .map(|b| DiagnosisSet::from_bits((b * 7 + 3) % 16).unwrap())
            .collect();
        let flat = |v: &[DiagnosisSet]| -> Vec<bool> {
            v.iter().flat_map(|s| Diagnosis::ALL.map(|d| s.contains(d))).collect()
        };
        let micro = f1_multilabel(&pred, &sets, Averaging::Micro).unwrap();
        assert_eq!(micro, f1_binary(&flat(&pred), &flat(&sets)).unwrap());
    }

    #[test]
    fn table_has_the_four_metric_columns() {
        let report = EvalReport {
            detection: Some(DetectionSummary {
                ap: 0.49,
                ap50: 0.91,
                ap75: 0.46,
                per_class: BTreeMap::new(),
            }),
            cascade: Some(CascadeScores {
                filter_f1: 0.71,
                filter_samples: 10,
                diagnosis_f1: 0.76,
                diagnosis_samples: 5,
            }),
            averaging: Averaging::Macro,
        };
        let table = report.render_table(2);
        let lines: Vec<_> = table.lines().collect();
        let header: Vec<_> = lines[0].split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(header, ["Model", "AP", "AP75", "AP50", "F1"]);
        assert!(lines[2].contains("0.49") && lines[2].contains("0.46") && lines[2].contains("0.91"));
        assert!(lines[3].contains("0.71"));
        assert!(lines[4].contains("0.76"));
    }
}
