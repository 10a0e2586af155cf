//! Slow, obviously-correct reference implementations used to check the
//! production metrics. Shared with the acceptance suite.

#![allow(dead_code)]

use dentcascade_core::metrics::{GroundTruth, ImageEval};
use dentcascade_core::{BBox, Detection};
use rand::Rng;

/// Pixel-count IoU of two integer-cornered boxes: unit cells are enumerated
/// over the bounding extent and tested for membership in each box.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let x1 = a[2].max(b[2]);
    let y1 = a[3].max(b[3]);
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut both, mut either) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Number of true positives among the given ranked predictions of one image,
/// matched greedily from scratch against that image's ground truth.
fn naive_true_positives(ranked: &[&Detection], gts: &[&GroundTruth], thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for p in ranked {
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = p.bbox.iou(&gt.bbox);
            if v >= thr && v > best_iou {
                best_iou = v;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// AP of one class at one threshold. Every prefix of the confidence ranking
/// is re-matched from scratch; the interpolated precision at recall level r
/// is the best precision over all prefixes whose recall reaches r.
fn brute_force_class_ap(images: &[ImageEval], class: usize, thr: f64) -> Option<f64> {
    let npos: usize = images
        .iter()
        .map(|im| im.ground_truths.iter().filter(|g| g.class_id == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (p, d) in im.predictions.iter().enumerate() {
            if d.class_id == class {
                ranked.push((i, p));
            }
        }
    }
    ranked.sort_by(|a, b| {
        let ca = images[a.0].predictions[a.1].confidence;
        let cb = images[b.0].predictions[b.1].confidence;
        cb.partial_cmp(&ca).unwrap().then(a.cmp(b))
    });
    let mut points = Vec::new(); // (tp, k)
    for k in 1..=ranked.len() {
        let prefix = &ranked[..k];
        let mut tp = 0;
        for (i, im) in images.iter().enumerate() {
            let preds: Vec<&Detection> = prefix
                .iter()
                .filter(|(pi, _)| *pi == i)
                .map(|&(_, p)| &im.predictions[p])
                .collect();
            let gts: Vec<&GroundTruth> = im.ground_truths.iter().filter(|g| g.class_id == class).collect();
            tp += naive_true_positives(&preds, &gts, thr);
        }
        points.push((tp, k));
    }
    let mut sum = 0.0;
    for r in 0..=100usize {
        let best = points
            .iter()
            .filter(|&&(tp, _)| tp * 100 >= r * npos)
            .map(|&(tp, k)| tp as f64 / k as f64)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

pub fn brute_force_map(images: &[ImageEval], thr: f64) -> f64 {
    let max_class = images
        .iter()
        .flat_map(|im| im.ground_truths.iter().map(|g| g.class_id))
        .max()
        .unwrap_or(0);
    let aps: Vec<f64> = (0..=max_class)
        .filter_map(|c| brute_force_class_ap(images, c, thr))
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// (AP averaged over 0.50..0.95, AP50, AP75).
pub fn brute_force_summary(images: &[ImageEval]) -> (f64, f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let maps: Vec<f64> = thresholds.iter().map(|&t| brute_force_map(images, t)).collect();
    (maps.iter().sum::<f64>() / 10.0, maps[0], maps[5])
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x = rng.random_range(0.0..80.0);
    let y = rng.random_range(0.0..80.0);
    let w = rng.random_range(4.0..30.0);
    let h = rng.random_range(4.0..30.0);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter<R: Rng>(b: &BBox, rng: &mut R) -> BBox {
    let s = 0.25 * b.width().min(b.height());
    let mut d = || rng.random_range(-s..s);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    let (x1, y1) = (b.x_max + d(), b.y_max + d());
    BBox::new(x0.min(x1 - 1.0), y0.min(y1 - 1.0), x1, y1).unwrap()
}

/// Random detection problem: at most 5 images, 10 boxes per side per image
/// and 4 classes. Confidences sit on a coarse grid so ties occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> Vec<ImageEval> {
    loop {
        let n_images = rng.random_range(1..=5);
        let mut images = Vec::new();
        for _ in 0..n_images {
            let n_gt = rng.random_range(0..=10);
            let ground_truths: Vec<GroundTruth> = (0..n_gt)
                .map(|_| GroundTruth {
                    bbox: random_box(rng),
                    class_id: rng.random_range(0..4),
                })
                .collect();
            let n_pred = rng.random_range(0..=10);
            let predictions = (0..n_pred)
                .map(|_| {
                    let (bbox, class_id) = if !ground_truths.is_empty() && rng.random_bool(0.7) {
                        let g = &ground_truths[rng.random_range(0..ground_truths.len())];
                        let class = if rng.random_bool(0.85) {
                            g.class_id
                        } else {
                            rng.random_range(0..4)
                        };
                        (jitter(&g.bbox, rng), class)
                    } else {
                        (random_box(rng), rng.random_range(0..4))
                    };
                    let confidence = rng.random_range(1..=10) as f64 / 10.0;
                    Detection::new(bbox, class_id, confidence).unwrap()
                })
                .collect();
            images.push(ImageEval {
                predictions,
                ground_truths,
            });
        }
        if images.iter().any(|im| !im.ground_truths.is_empty()) {
            return images;
        }
    }
}
