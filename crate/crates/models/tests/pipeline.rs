use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use dentcascade_core::augment::AugPolicy;
use dentcascade_core::corpus::{load_corpus, read_predictions, CorpusKind, CropSpec};
use dentcascade_core::synthetic::{generate_toy_corpus, ToyConfig};
use dentcascade_models::hybrid::build_hybrid;
use dentcascade_models::segmenter::SegConfig;
use dentcascade_models::*;

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    detector: ModelArtifact,
    filter: ModelArtifact,
    diagnoser: ModelArtifact,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let toy = ToyConfig {
        n_images: 2,
        seed: 5,
        abnormal_rate: 0.5,
        crop: CropSpec {
            pad_fraction: 0.1,
            size: 16,
        },
        ..ToyConfig::default()
    };
    generate_toy_corpus(&toy, &root).unwrap();
    let masks = load_corpus(&root.join("masks.json"), CorpusKind::Mask).unwrap();
    let seg = train_segmenter(
        &masks,
        &SegConfig {
            epochs: 1,
            crop_size: 16,
            encoder_depth: 2,
            base_channels: 2,
            ..SegConfig::default()
        },
    )
    .unwrap();
    let enc = extract_encoder(&seg).unwrap();
    let enumeration = load_corpus(&root.join("enum.json"), CorpusKind::Enumeration).unwrap();
    let detector = train_detector(
        &enumeration,
        &DetectorConfig {
            epochs: 1,
            backbone_channels: vec![4, 4, 8],
            head_width: 16,
            pool_size: 3,
            augment: AugPolicy::none(),
            score_threshold: 0.0,
            train_proposals: 40,
            test_proposals: 40,
            ..DetectorConfig::default()
        },
    )
    .unwrap();
    let small = |n| HybridConfig {
        num_outputs: n,
        head_widths: [8, 8],
        deep_channels: [2, 2, 2, 2, 2],
        ..HybridConfig::default()
    };
    Fixture {
        _dir: dir,
        root,
        detector,
        filter: build_hybrid(&enc, &small(1)).unwrap(),
        diagnoser: build_hybrid(&enc, &small(4)).unwrap(),
    }
}

fn models(f: &Fixture) -> PipelineModels {
    PipelineModels::new(&f.detector, &f.filter, &f.diagnoser).unwrap()
}

#[test]
fn pipeline_contracts() {
    let f = fixture();
    let image = dentcascade_core::Raster::load(&f.root.join("images/img_0000.png")).unwrap();

    assert!(matches!(
        PipelineModels::new(&f.detector, &f.diagnoser, &f.filter),
        Err(Error::Stage { .. })
    ));

    let base = models(&f);
    let outcome = pipeline::run_pipeline_traced(&image, "img_0000", &base).unwrap();
    assert!(!outcome.detections.is_empty());
    let mut previous: Option<BTreeSet<u8>> = None;
    for threshold in [0.7, 0.5, 0.3] {
        let mut t = base.thresholds;
        t.filter = threshold;
        let m = models(&f).with_thresholds(t);
        let r = run_pipeline(&image, "img_0000", &m).unwrap();
        assert!(r.teeth.iter().all(|t| !t.diagnoses.is_empty()));
        assert!(r
            .teeth
            .iter()
            .all(|t| t.diagnosis_probs.iter().all(|p| (0.0..=1.0).contains(p))));
        assert!(r.teeth.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        let set: BTreeSet<u8> = r.teeth.iter().map(|t| t.tooth.fdi_code()).collect();
        if let Some(prev) = &previous {
            assert!(prev.is_subset(&set), "lowering the threshold removed teeth");
        }
        previous = Some(set);
    }
    assert_eq!(
        run_pipeline(&image, "img_0000", &base).unwrap(),
        run_pipeline(&image, "img_0000", &base).unwrap()
    );
}

#[test]
fn batch_isolates_failures() {
    let f = fixture();
    let m = models(&f);
    let images = f.root.join("images");
    fs::write(images.join("broken.png"), b"not an image").unwrap();
    let out_path = f.root.join("preds.json");
    let out = run_batch(&BatchSource::Directory(images.clone()), &m, &out_path).unwrap();
    assert_eq!(out.results.len(), 2);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].image_id, "broken");
    assert_eq!(read_predictions(&out_path).unwrap().len(), 2);
    let first = fs::read(&out_path).unwrap();
    run_batch(&BatchSource::Directory(images), &m, &out_path).unwrap();
    assert_eq!(first, fs::read(&out_path).unwrap());

    let enumeration = load_corpus(&f.root.join("enum.json"), CorpusKind::Enumeration).unwrap();
    let out = run_batch(&BatchSource::Dataset(&enumeration), &m, &out_path).unwrap();
    assert_eq!(out.results.len(), 2);

    let empty = f.root.join("empty");
    fs::create_dir(&empty).unwrap();
    assert!(run_batch(&BatchSource::Directory(empty), &m, &out_path).is_err());
    let only_bad = vec![Path::new(&f.root).join("images/broken.png")];
    assert!(run_batch(&BatchSource::Files(only_bad), &m, &out_path).is_err());
}
