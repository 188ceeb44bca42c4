//! Synthetic fixtures: labeled manifests shaped like the real datasets, and
//! frame traces for the realtime loop.
//!
//! Labels are drawn per image with mutually exclusive groups (one lighting
//! condition, one weather, indoors xor outdoors, paved xor off-road) and
//! independent priors for the rest, so every kind gets both answers at
//! fixture scale.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{AnnotationRecord, BackendVote, Label, Origin, SourceSubset};
use crate::dataset::{DatasetManifest, ImageMeta};
use crate::query::Verdict;
use crate::realtime::SimTrace;
use crate::taxonomy::{ContextId, Taxonomy};

/// Images per subset of the hand-annotated set.
pub const HA_SUBSETS: [(SourceSubset, usize); 4] = [
    (SourceSubset::Kitti, 500),
    (SourceSubset::Nuscenes, 300),
    (SourceSubset::Pittsburgh, 321),
    (SourceSubset::Web, 346),
];

/// Images in the machine-annotated set.
pub const MA_IMAGES: usize = 66_647;

/// Question ids are `image_id * QUESTION_STRIDE + kind index`.
pub const QUESTION_STRIDE: u64 = 100;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub subsets: Vec<(SourceSubset, usize)>,
    pub origin: Origin,
    pub seed: u64,
    pub first_image_id: u64,
}

impl SynthSpec {
    /// The hand-annotated layout: 1467 images over four sources.
    pub fn hand_annotated(seed: u64) -> Self {
        SynthSpec {
            name: "ha".into(),
            subsets: HA_SUBSETS.to_vec(),
            origin: Origin::Hand,
            seed,
            first_image_id: 1,
        }
    }

    /// The machine-annotated layout at `1/divisor` scale (rounded up).
    pub fn machine_annotated(divisor: usize, seed: u64) -> Self {
        SynthSpec {
            name: "ma".into(),
            subsets: vec![(SourceSubset::MaCorpus, MA_IMAGES.div_ceil(divisor.max(1)))],
            origin: Origin::Machine,
            seed,
            first_image_id: 1_000_000,
        }
    }

    pub fn image_count(&self) -> usize {
        self.subsets.iter().map(|(_, n)| n).sum()
    }
}

fn resolution(subset: SourceSubset) -> (u32, u32) {
    match subset {
        SourceSubset::Kitti => (1242, 375),
        SourceSubset::Nuscenes => (1600, 900),
        SourceSubset::Pittsburgh | SourceSubset::MaCorpus => (2048, 1536),
        SourceSubset::Web => (1280, 720),
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, weighted: &'a [(T, f64)]) -> &'a T {
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in weighted {
        if x < *w {
            return item;
        }
        x -= w;
    }
    &weighted[weighted.len() - 1].0
}

/// One image's 24 labels.
pub fn random_labels(rng: &mut ChaCha8Rng) -> [bool; 24] {
    use ContextId::*;
    let mut labels = [false; 24];
    let lighting = *pick(rng, &[(Daytime, 0.6), (Nighttime, 0.3), (Twilight, 0.1)]);
    let weather = *pick(rng, &[(Sunny, 0.45), (Rainy, 0.2), (Snowy, 0.12), (Foggy, 0.13), (DustSandstorm, 0.1)]);
    labels[lighting.index()] = true;
    labels[weather.index()] = true;
    let indoors = rng.random_bool(0.05);
    labels[Indoors.index()] = indoors;
    labels[Outdoors.index()] = !indoors;
    let paved = rng.random_bool(0.85);
    labels[PavedRoad.index()] = paved;
    labels[OffRoad.index()] = !paved;
    for (kind, p) in [
        (TreesOverhead, 0.2),
        (LaneMarkersVisible, 0.65),
        (ParkingLot, 0.08),
        (Tunnel, 0.05),
        (UrbanCanyon, 0.15),
        (RuralArea, 0.3),
        (City, 0.45),
        (Highway, 0.25),
        (ConstructionZone, 0.08),
        (HeavyTraffic, 0.15),
        (Bridge, 0.06),
        (Underpass, 0.06),
    ] {
        labels[kind.index()] = rng.random_bool(p);
    }
    labels
}

/// One seeded scene as a per-kind truth map.
pub fn random_truth(seed: u64) -> BTreeMap<ContextId, bool> {
    let labels = random_labels(&mut ChaCha8Rng::seed_from_u64(seed));
    ContextId::ALL.iter().map(|&k| (k, labels[k.index()])).collect()
}

/// A drive of `duration` at one frame per `frame_period` through a seeded
/// scene in which `kind` flips at `flip_at`.
pub fn flip_trace(seed: u64, duration: Duration, frame_period: Duration, kind: ContextId, flip_at: Duration) -> SimTrace {
    let initial = random_truth(seed);
    let flipped = !initial[&kind];
    SimTrace::new(duration, frame_period, initial).with_toggle(flip_at, kind, flipped)
}

/// A complete manifest: every image carries all 24 records.
pub fn manifest(taxonomy: &Taxonomy, spec: &SynthSpec) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut m = DatasetManifest::new(&spec.name);
    m.taxonomy_version = taxonomy.taxonomy_version().to_string();
    m.images.reserve(spec.image_count());
    m.records.reserve(spec.image_count() * 24);
    let mut image_id = spec.first_image_id;
    for &(subset, count) in &spec.subsets {
        let (width, height) = resolution(subset);
        for _ in 0..count {
            let id = image_id.to_string();
            m.images.push(ImageMeta {
                image_id: id.clone(),
                image_ref: format!("{}/{image_id:07}.jpg", subset.as_str()),
                width,
                height,
                source_subset: subset,
            });
            let labels = random_labels(&mut rng);
            for kind in ContextId::ALL {
                let answer = Label::from_bool(labels[kind.index()]);
                let backend_votes = match spec.origin {
                    Origin::Machine => ["vilt", "llava"]
                        .iter()
                        .map(|b| {
                            BackendVote::new(b, Verdict::from_bool(answer.as_bool()), 0.901 + 0.099 * rng.random::<f64>())
                        })
                        .collect(),
                    _ => Vec::new(),
                };
                m.records.push(AnnotationRecord {
                    question_id: image_id * QUESTION_STRIDE + kind.index() as u64,
                    image_id: id.clone(),
                    kind,
                    question: taxonomy.question_for(kind).to_string(),
                    answer,
                    origin: spec.origin,
                    source_subset: subset,
                    backend_votes,
                    taxonomy_version: taxonomy.taxonomy_version().to_string(),
                    template_version: taxonomy.template_version().to_string(),
                    reviewed_at_ms: None,
                });
            }
            image_id += 1;
        }
    }
    m
}
