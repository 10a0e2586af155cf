use dentcascade_core::corpus::{load_corpus, write_corpus, CorpusKind, CropSpec};
use dentcascade_core::raster::save_mask_png;
use dentcascade_core::synthetic::{generate_toy_corpus, ToyConfig};
use dentcascade_models::hybrid::{diagnoser_samples, filter_samples, CropLabel};
use dentcascade_models::segmenter::SegConfig;
use dentcascade_models::*;

fn toy(dir: &std::path::Path) {
    let cfg = ToyConfig {
        n_images: 2,
        seed: 9,
        abnormal_rate: 0.4,
        crop: CropSpec {
            pad_fraction: 0.1,
            size: 16,
        },
        ..ToyConfig::default()
    };
    generate_toy_corpus(&cfg, dir).unwrap();
}

fn seg_cfg() -> SegConfig {
    SegConfig {
        epochs: 3,
        crop_size: 16,
        encoder_depth: 2,
        base_channels: 2,
        seed: 3,
        ..SegConfig::default()
    }
}

#[test]
fn segmenter_trace_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let masks = load_corpus(&dir.path().join("masks.json"), CorpusKind::Mask).unwrap();
    let a = train_segmenter(&masks, &seg_cfg()).unwrap();
    let b = train_segmenter(&masks, &seg_cfg()).unwrap();
    assert_eq!(a.loss_trace().len(), 3);
    for (x, y) in a.loss_trace().iter().zip(b.loss_trace()) {
        assert!((x - y).abs() <= 1e-5);
    }
    let enc = extract_encoder(&a).unwrap();
    assert_eq!(enc.width(), 8);
    let seg = Segmenter::from_artifact(&a).unwrap();
    let probs = seg.segment(&dentcascade_core::Raster::filled(16, 16, 0.5)).unwrap();
    assert_eq!((probs.width(), probs.height()), (16, 16));
    assert!(matches!(Detector::from_artifact(&a), Err(Error::Stage { .. })));

    let wrong_size = SegConfig {
        crop_size: 32,
        ..seg_cfg()
    };
    assert!(matches!(train_segmenter(&masks, &wrong_size), Err(Error::Config(_))));
}

#[test]
fn segmenter_rejects_empty_and_misaligned_masks() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let mut masks = load_corpus(&dir.path().join("masks.json"), CorpusKind::Mask).unwrap();
    let mut empty = masks.clone();
    for im in &mut empty.images {
        im.annotations.clear();
    }
    assert!(matches!(train_segmenter(&empty, &seg_cfg()), Err(Error::Config(_))));

    let (image, ann) = masks
        .images
        .iter()
        .find_map(|im| im.annotations.first().map(|a| (im.id.clone(), a.clone())))
        .unwrap();
    save_mask_png(&dir.path().join(ann.mask.as_ref().unwrap()), 8, 8, &[true; 64]).unwrap();
    write_corpus(&masks, &dir.path().join("masks.json")).unwrap();
    masks = load_corpus(&dir.path().join("masks.json"), CorpusKind::Mask).unwrap();
    let err = train_segmenter(&masks, &seg_cfg()).unwrap_err().to_string();
    assert!(err.contains(&image), "{err}");

    let enumeration = load_corpus(&dir.path().join("enum.json"), CorpusKind::Enumeration).unwrap();
    assert!(matches!(
        train_segmenter(&enumeration, &seg_cfg()),
        Err(Error::Config(_))
    ));
}

#[test]
fn crop_samples_follow_the_corpora() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let enumeration = load_corpus(&dir.path().join("enum.json"), CorpusKind::Enumeration).unwrap();
    let diagnosis = load_corpus(&dir.path().join("diag.json"), CorpusKind::Diagnosis).unwrap();
    let crop = CropSpec {
        pad_fraction: 0.1,
        size: 16,
    };
    let f = filter_samples(&enumeration, &diagnosis, &crop).unwrap();
    assert_eq!(f.len(), enumeration.annotation_count());
    let abnormal = f.iter().filter(|s| s.label == CropLabel::Abnormal(true)).count();
    assert_eq!(abnormal, diagnosis.annotation_count());
    let d = diagnoser_samples(&diagnosis, &crop).unwrap();
    assert_eq!(d.len(), diagnosis.annotation_count());
    assert!(d
        .iter()
        .all(|s| matches!(s.label, CropLabel::Diagnoses(x) if !x.is_empty())));
    assert!(d.iter().all(|s| s.crop.width() == 16 && s.crop.height() == 16));
}
