use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::annotation::Origin;
use crate::synth::{self, SynthSpec};

fn tax() -> &'static Taxonomy {
    Taxonomy::builtin()
}

fn small(images: usize, seed: u64) -> DatasetManifest {
    let spec = SynthSpec {
        name: "small".into(),
        subsets: vec![(SourceSubset::Kitti, images / 2), (SourceSubset::Web, images - images / 2)],
        origin: Origin::Hand,
        seed,
        first_image_id: 1,
    };
    synth::manifest(tax(), &spec)
}

#[test]
fn validate_catches_dangling_and_duplicate_records() {
    let mut m = small(4, 1);
    assert!(m.validate().is_ok());
    assert!(m.is_complete());

    let mut dup = m.records[0].clone();
    dup.question_id = 999_999;
    m.records.push(dup);
    assert!(matches!(m.validate(), Err(DatasetError::DuplicatePair { .. })));
    m.records.pop();

    let mut orphan = m.records[0].clone();
    orphan.image_id = "404".into();
    orphan.question_id = 999_999;
    m.records.push(orphan);
    assert!(matches!(m.validate(), Err(DatasetError::Invalid(_))));
    m.records.pop();

    m.records.pop();
    assert!(m.validate().is_ok());
    assert!(!m.is_complete());
}

#[test]
fn stats_conserve_counts() {
    let m = small(10, 2);
    let s = stats(&m);
    assert_eq!(s.images, 10);
    assert_eq!(s.records, 240);
    for c in s.per_kind.values() {
        assert_eq!(c.positives + c.negatives, 10);
        assert_eq!(c.total, 10);
    }
    assert_eq!(s.per_subset[&SourceSubset::Kitti], SubsetCounts { images: 5, records: 120 });
    assert_eq!(s.per_subset.values().map(|c| c.records).sum::<usize>(), 240);
    assert!(s.table().contains("urban_canyon"));
}

#[test]
fn stats_match_scripted_counts() {
    let mut m = small(3, 3);
    for r in &mut m.records {
        r.answer = Label::from_bool(r.kind == ContextId::Tunnel && r.image_id != "3");
    }
    let s = stats(&m);
    assert_eq!(s.per_kind[&ContextId::Tunnel], KindCounts { positives: 2, negatives: 1, total: 3 });
    assert_eq!(s.per_kind[&ContextId::Bridge], KindCounts { positives: 0, negatives: 3, total: 3 });
}

#[test]
fn split_is_deterministic_partition() {
    let m = small(1000, 4);
    let spec = SplitSpec { train_fraction: 0.7, seed: 11 };
    let (train, test) = split(&m, &spec).unwrap();
    assert_eq!((train.images.len(), test.images.len()), (700, 300));
    assert_eq!(split(&m, &spec).unwrap(), (train.clone(), test.clone()));

    let a: HashSet<_> = train.images.iter().map(|i| &i.image_id).collect();
    let b: HashSet<_> = test.images.iter().map(|i| &i.image_id).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(train.records.len() + test.records.len(), m.records.len());

    assert!(matches!(split(&small(1, 0), &spec), Err(DatasetError::TooFewImages(1))));
    assert!(matches!(split(&m, &SplitSpec { train_fraction: 1.0, seed: 0 }), Err(DatasetError::InvalidFraction(_))));
    let (t, _) = split(&small(2, 0), &SplitSpec { train_fraction: 0.99, seed: 0 }).unwrap();
    assert_eq!(t.images.len(), 1);
}

#[test]
fn shots_nest_and_stratify() {
    let m = small(40, 5);
    let mut previous: Option<HashSet<u64>> = None;
    for k in [4, 16, 64, 256] {
        let shots = sample_shots(&m, k, 9, ShotUnit::Pair).unwrap();
        assert_eq!(shots.records.len(), k);
        assert!(shots.validate().is_ok());
        let ids: HashSet<u64> = shots.records.iter().map(|r| r.question_id).collect();
        if let Some(prev) = &previous {
            assert!(prev.is_subset(&ids), "k={k}");
        }
        previous = Some(ids);
    }
    let k24 = sample_shots(&m, 24, 9, ShotUnit::Pair).unwrap();
    let kinds: HashSet<_> = k24.records.iter().map(|r| r.kind).collect();
    assert_eq!(kinds.len(), 24);

    // Balanced: with both answers plentiful, 48 shots give each kind one yes and one no.
    let k48 = sample_shots(&m, 48, 9, ShotUnit::Pair).unwrap();
    for kind in ContextId::ALL {
        let answers: HashSet<_> = k48.records.iter().filter(|r| r.kind == kind).map(|r| r.answer).collect();
        let s = stats(&m).per_kind[&kind];
        if s.positives > 0 && s.negatives > 0 {
            assert_eq!(answers.len(), 2, "{kind}");
        }
    }

    assert!(matches!(
        sample_shots(&m, 961, 9, ShotUnit::Pair),
        Err(DatasetError::NotEnoughShots { requested: 961, available: 960 })
    ));
    let images = sample_shots(&m, 5, 9, ShotUnit::Image).unwrap();
    assert_eq!((images.images.len(), images.records.len()), (5, 120));
}

#[test]
fn ground_truth_follows_records() {
    let m = small(2, 6);
    let truth = m.ground_truth();
    let image = &m.images[0];
    let t = truth.get(&image.image_ref).unwrap();
    for r in m.records.iter().filter(|r| r.image_id == image.image_id) {
        assert_eq!(t.contexts[&r.kind], r.answer.as_bool());
    }
}

#[test]
fn vqa_round_trip_is_identity_and_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small(100, 7);
    m.name = "rt".into();
    m.records[3].origin = Origin::Verified;
    m.records[3].reviewed_at_ms = Some(1_700_000_000_000);
    let paths = export_vqa(&m, dir.path()).unwrap();
    let back = import_vqa(tax(), &VqaPaths::in_dir(dir.path(), "rt")).unwrap();
    assert_eq!(back, m);
    assert_eq!(render_vqa(&back).unwrap(), render_vqa(&m).unwrap());

    let questions: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths.questions).unwrap()).unwrap();
    let first = &questions["questions"][0];
    assert_eq!(first["image_id"], serde_json::json!(1));
    assert!(first["question"].is_string() && first["question_id"].is_u64());
    let annotations: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths.annotations).unwrap()).unwrap();
    let a = &annotations["annotations"][0];
    for key in ["question_type", "multiple_choice_answer", "answers", "image_id", "answer_type", "question_id"] {
        assert!(a.get(key).is_some(), "{key}");
    }
    assert_eq!(a["answer_type"], "yes/no");
}

#[test]
fn empty_manifest_exports_valid_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new("empty");
    export_vqa(&m, dir.path()).unwrap();
    assert_eq!(import_vqa(tax(), &VqaPaths::in_dir(dir.path(), "empty")).unwrap(), m);
}

#[test]
fn import_without_side_file_defaults_to_hand_origin() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small(2, 8);
    m.name = "bare".into();
    let mut paths = export_vqa(&m, dir.path()).unwrap();
    paths.extensions = None;
    let back = import_vqa(tax(), &paths).unwrap();
    assert_eq!(back.records.len(), 48);
    assert!(back.records.iter().all(|r| r.origin == Origin::Hand));
    assert_eq!(back.records.iter().map(|r| r.answer).collect::<Vec<_>>(), m.records.iter().map(|r| r.answer).collect::<Vec<_>>());
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::write(path, serde_json::to_vec(&value).unwrap()).unwrap();
}

#[test]
fn import_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small(1, 9);
    m.name = "bad".into();
    let paths = export_vqa(&m, dir.path()).unwrap();
    let q = |qid: u64, text: &str| serde_json::json!({"image_id": 1, "question": text, "question_id": qid});
    let a = |qid: u64| {
        serde_json::json!({"question_type": "is this", "multiple_choice_answer": "yes",
            "answers": [{"answer": "yes", "answer_confidence": "yes", "answer_id": 1}],
            "image_id": 1, "answer_type": "yes/no", "question_id": qid})
    };
    let bare = VqaPaths { extensions: None, ..paths.clone() };

    write_json(&paths.questions, serde_json::json!([q(100, "Is this during daytime?")]));
    write_json(&paths.annotations, serde_json::json!([a(100), a(101)]));
    assert!(matches!(import_vqa(tax(), &bare), Err(DatasetError::IdMismatch(_))));

    write_json(&paths.questions, serde_json::json!([q(100, "Is this during daytime?"), q(101, "Is the sky purple?")]));
    match import_vqa(tax(), &bare) {
        Err(DatasetError::UnknownQuestions(report)) => {
            assert_eq!(report.len(), 1);
            assert_eq!(report[0].question_id, 101);
        }
        other => panic!("expected unknown-question report, got {other:?}"),
    }

    write_json(&paths.questions, serde_json::json!([q(100, "Is this during daytime?"), q(101, "is this  during DAYTIME?")]));
    assert!(matches!(import_vqa(tax(), &bare), Err(DatasetError::DuplicatePair { .. })));

    std::fs::write(&paths.questions, b"{not json").unwrap();
    assert!(matches!(import_vqa(tax(), &bare), Err(DatasetError::Malformed { .. })));
}

#[test]
fn save_and_load_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = small(3, 10);
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_partitions_images(n in 2usize..60, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let m = small(n, 1);
        let (train, test) = split(&m, &SplitSpec { train_fraction: fraction, seed }).unwrap();
        let expected = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        prop_assert_eq!(train.images.len(), expected);
        prop_assert_eq!(train.images.len() + test.images.len(), n);
        let a: HashSet<_> = train.records.iter().map(|r| r.question_id).collect();
        let b: HashSet<_> = test.records.iter().map(|r| r.question_id).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), m.records.len());
    }

    #[test]
    fn shots_nest_for_any_seed(seed in any::<u64>(), k1 in 1usize..100, extra in 0usize..100) {
        let m = small(6, 2);
        let small_set: HashSet<u64> =
            sample_shots(&m, k1, seed, ShotUnit::Pair).unwrap().records.iter().map(|r| r.question_id).collect();
        let large_set: HashSet<u64> = sample_shots(&m, (k1 + extra).min(144), seed, ShotUnit::Pair)
            .unwrap()
            .records
            .iter()
            .map(|r| r.question_id)
            .collect();
        prop_assert!(small_set.is_subset(&large_set));
    }
}

#[test]
fn load_images_accepts_manifest_catalog_and_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small(3, 11);
    m.name = "imgs".into();
    let manifest = dir.path().join("m.json");
    m.save(&manifest).unwrap();
    assert_eq!(load_images(&manifest).unwrap(), m.images);
    let paths = export_vqa(&m, dir.path()).unwrap();
    assert_eq!(load_images(&paths.images).unwrap(), m.images);
    let list = dir.path().join("list.json");
    write_json(&list, serde_json::to_value(&m.images).unwrap());
    assert_eq!(load_images(&list).unwrap(), m.images);
    let mut dup = m.images.clone();
    dup.push(dup[0].clone());
    write_json(&list, serde_json::to_value(&dup).unwrap());
    assert!(matches!(load_images(&list), Err(DatasetError::Invalid(_))));
}
