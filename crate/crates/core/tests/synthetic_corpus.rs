use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dentcascade_core::corpus::{load_corpus, CorpusKind};
use dentcascade_core::raster::load_mask_png;
use dentcascade_core::synthetic::{generate_toy_corpus, ToyConfig, DIAGNOSIS_FILE, ENUMERATION_FILE, MASK_FILE};

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let cfg = ToyConfig {
        n_images: 8,
        seed: 7,
        ..ToyConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_toy_corpus(&cfg, a.path()).unwrap();
    generate_toy_corpus(&cfg, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 8 + 3);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(bytes == &tb[name], "{name} differs");
    }
}

#[test]
fn fully_abnormal_corpus_diagnoses_every_tooth() {
    let cfg = ToyConfig {
        n_images: 3,
        abnormal_rate: 1.0,
        seed: 11,
        ..ToyConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate_toy_corpus(&cfg, dir.path()).unwrap();
    let enumeration = load_corpus(&dir.path().join(ENUMERATION_FILE), CorpusKind::Enumeration).unwrap();
    let diagnosis = load_corpus(&dir.path().join(DIAGNOSIS_FILE), CorpusKind::Diagnosis).unwrap();
    assert_eq!(enumeration.annotation_count(), diagnosis.annotation_count());
    for (e, d) in enumeration.images.iter().zip(&diagnosis.images) {
        for ann in &e.annotations {
            let hit = d.annotations.iter().find(|x| x.tooth == ann.tooth).unwrap();
            assert!(!hit.diagnoses.unwrap().is_empty());
        }
    }
}

#[test]
fn diagnosis_boxes_and_masks_agree_with_enumeration() {
    let cfg = ToyConfig {
        n_images: 4,
        abnormal_rate: 0.5,
        seed: 3,
        ..ToyConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate_toy_corpus(&cfg, dir.path()).unwrap();
    let enumeration = load_corpus(&dir.path().join(ENUMERATION_FILE), CorpusKind::Enumeration).unwrap();
    let diagnosis = load_corpus(&dir.path().join(DIAGNOSIS_FILE), CorpusKind::Diagnosis).unwrap();
    let masks = load_corpus(&dir.path().join(MASK_FILE), CorpusKind::Mask).unwrap();
    let mut checked = 0;
    for ((e, d), m) in enumeration.images.iter().zip(&diagnosis.images).zip(&masks.images) {
        assert_eq!(e.id, d.id);
        for ann in &d.annotations {
            let twin = e.annotations.iter().find(|x| x.tooth == ann.tooth).unwrap();
            assert_eq!(twin.bbox, ann.bbox);
            checked += 1;
        }
        assert_eq!(d.annotations.len(), m.annotations.len());
        for ann in &m.annotations {
            let (w, h, mask) = load_mask_png(&dir.path().join(ann.mask.as_ref().unwrap())).unwrap();
            assert_eq!((w, h), (cfg.crop.size, cfg.crop.size));
            assert_eq!(mask.iter().any(|&v| v), ann.diagnoses.unwrap().has_lesion());
        }
    }
    assert!(checked > 0);
}
