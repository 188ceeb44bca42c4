//! Context datasets: manifests, VQA-v2 files, statistics, train/test splits
//! and few-shot samples.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationRecord, Label, SourceSubset};
use crate::protocol::GroundTruth;
use crate::taxonomy::{ContextId, Taxonomy, CONTEXT_COUNT};

mod vqa;

pub use vqa::{export_vqa, import_vqa, render_vqa, VqaDocuments, VqaPaths};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownQuestion {
    pub question_id: u64,
    pub image_id: String,
    pub question: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: {detail}")]
    Malformed { file: String, detail: String },
    #[error("question id mismatch: {0}")]
    IdMismatch(String),
    #[error("duplicate pair (image {image_id}, {kind})")]
    DuplicatePair { image_id: String, kind: ContextId },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("{} question(s) match no taxonomy template", .0.len())]
    UnknownQuestions(Vec<UnknownQuestion>),
    #[error("split needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("train fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("requested {requested} shots but only {available} are available")]
    NotEnoughShots { requested: usize, available: usize },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    /// Locator handed to backends.
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub source_subset: SourceSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub taxonomy_version: String,
    pub images: Vec<ImageMeta>,
    pub records: Vec<AnnotationRecord>,
}

/// Numeric ids sort numerically, everything else lexically after them.
pub(crate) fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

impl DatasetManifest {
    pub fn new(name: &str) -> Self {
        DatasetManifest {
            name: name.to_string(),
            taxonomy_version: Taxonomy::builtin().taxonomy_version().to_string(),
            images: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Checks referential integrity and uniqueness.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut images = HashSet::new();
        for image in &self.images {
            if image.image_id.is_empty() {
                return Err(DatasetError::Invalid("empty image id".into()));
            }
            if !images.insert(image.image_id.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate image id {}", image.image_id)));
            }
        }
        let mut questions = HashSet::new();
        let mut pairs = HashSet::new();
        for r in &self.records {
            if !images.contains(r.image_id.as_str()) {
                return Err(DatasetError::Invalid(format!(
                    "record {} refers to unknown image {}",
                    r.question_id, r.image_id
                )));
            }
            if !questions.insert(r.question_id) {
                return Err(DatasetError::Invalid(format!("duplicate question id {}", r.question_id)));
            }
            if !pairs.insert((r.image_id.as_str(), r.kind)) {
                return Err(DatasetError::DuplicatePair { image_id: r.image_id.clone(), kind: r.kind });
            }
        }
        Ok(())
    }

    /// Valid, and every image carries exactly one record per context.
    pub fn is_complete(&self) -> bool {
        self.validate().is_ok() && self.records.len() == CONTEXT_COUNT * self.images.len()
    }

    /// Images by id, records by question id.
    pub fn canonicalize(&mut self) {
        self.images.sort_by(|a, b| id_order(&a.image_id, &b.image_id));
        self.records.sort_by_key(|r| r.question_id);
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageMeta> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Ground truth keyed by image locator, for the mock backend.
    pub fn ground_truth(&self) -> GroundTruth {
        let refs: HashMap<&str, &str> =
            self.images.iter().map(|i| (i.image_id.as_str(), i.image_ref.as_str())).collect();
        let mut truth = GroundTruth::new();
        for r in &self.records {
            if let Some(image_ref) = refs.get(r.image_id.as_str()) {
                truth.insert(image_ref, r.kind, r.answer.as_bool());
            }
        }
        truth
    }

    /// The images in `keep` and their records.
    pub fn restrict(&self, name: &str, keep: &HashSet<&str>) -> DatasetManifest {
        DatasetManifest {
            name: name.to_string(),
            taxonomy_version: self.taxonomy_version.clone(),
            images: self.images.iter().filter(|i| keep.contains(i.image_id.as_str())).cloned().collect(),
            records: self.records.iter().filter(|r| keep.contains(r.image_id.as_str())).cloned().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<DatasetManifest, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Malformed { file: path.display().to_string(), detail: e.to_string() })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

/// Writes through a sibling temp file and renames it into place, so a
/// failed write never leaves a truncated output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let file_name = path.file_name().ok_or_else(|| DatasetError::Invalid(format!("{} is not a file", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| DatasetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DatasetError::io(path, e)
    })
}

/// Reads a list of images from a JSON file holding either a bare array of
/// images or any object with an `images` array (a manifest or a catalog).
pub fn load_images(path: &Path) -> Result<Vec<ImageMeta>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let malformed = |detail: String| DatasetError::Malformed { file: path.display().to_string(), detail };
    let mut value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
    if let Some(images) = value.get_mut("images") {
        value = images.take();
    }
    let images: Vec<ImageMeta> = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    let mut seen = HashSet::new();
    if let Some(dup) = images.iter().find(|i| !seen.insert(i.image_id.as_str())) {
        return Err(DatasetError::Invalid(format!("image {} listed twice", dup.image_id)));
    }
    Ok(images)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub positives: usize,
    pub negatives: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub images: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub records: usize,
    pub per_kind: BTreeMap<ContextId, KindCounts>,
    pub per_subset: BTreeMap<SourceSubset, SubsetCounts>,
}

pub fn stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut per_kind: BTreeMap<ContextId, KindCounts> =
        ContextId::ALL.iter().map(|&k| (k, KindCounts::default())).collect();
    let mut per_subset: BTreeMap<SourceSubset, SubsetCounts> = BTreeMap::new();
    let subset_of: HashMap<&str, SourceSubset> =
        manifest.images.iter().map(|i| (i.image_id.as_str(), i.source_subset)).collect();
    for image in &manifest.images {
        per_subset.entry(image.source_subset).or_default().images += 1;
    }
    for r in &manifest.records {
        let counts = per_kind.get_mut(&r.kind).expect("all kinds present");
        match r.answer {
            Label::Yes => counts.positives += 1,
            Label::No => counts.negatives += 1,
        }
        counts.total += 1;
        if let Some(subset) = subset_of.get(r.image_id.as_str()) {
            per_subset.entry(*subset).or_default().records += 1;
        }
    }
    DatasetStats { images: manifest.images.len(), records: manifest.records.len(), per_kind, per_subset }
}

impl DatasetStats {
    /// Plain-text table: one row per kind, then one per subset.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>9} {:>9} {:>9}\n", "kind", "positive", "negative", "total");
        for (kind, c) in &self.per_kind {
            out.push_str(&format!("{:<22} {:>9} {:>9} {:>9}\n", kind.as_str(), c.positives, c.negatives, c.total));
        }
        out.push_str(&format!("\n{:<22} {:>9} {:>9}\n", "subset", "images", "pairs"));
        for (subset, c) in &self.per_subset {
            out.push_str(&format!("{:<22} {:>9} {:>9}\n", subset.as_str(), c.images, c.records));
        }
        out.push_str(&format!("{:<22} {:>9} {:>9}\n", "total", self.images, self.records));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.7, seed: 0 }
    }
}

/// Image-level partition into `(train, test)`.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(spec.train_fraction));
    }
    let n = manifest.images.len();
    if n < 2 {
        return Err(DatasetError::TooFewImages(n));
    }
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<&str> = manifest.images.iter().map(|i| i.image_id.as_str()).collect();
    ids.sort_by(|a, b| id_order(a, b));
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train: HashSet<&str> = ids[..n_train].iter().copied().collect();
    let test: HashSet<&str> = ids[n_train..].iter().copied().collect();
    Ok((
        manifest.restrict(&format!("{}_train", manifest.name), &train),
        manifest.restrict(&format!("{}_test", manifest.name), &test),
    ))
}

/// What one "shot" is.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotUnit {
    /// One image/question pair.
    #[default]
    Pair,
    /// One image with all of its questions.
    Image,
}

impl std::str::FromStr for ShotUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pair" => Ok(ShotUnit::Pair),
            "image" => Ok(ShotUnit::Image),
            _ => Err(format!("unknown shot unit `{s}` (expected pair or image)")),
        }
    }
}

/// The seeded order shots are drawn in. Taking a prefix of this order is
/// what makes samples for the same seed nest.
///
/// For pairs: kinds are visited round-robin in a seeded permutation, and
/// each kind alternates yes/no answers while both are available.
fn pair_order(records: &[AnnotationRecord], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_kind: BTreeMap<ContextId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut sorted: Vec<usize> = (0..records.len()).collect();
    sorted.sort_by_key(|&i| records[i].question_id);
    for i in sorted {
        let entry = by_kind.entry(records[i].kind).or_default();
        match records[i].answer {
            Label::Yes => entry.0.push(i),
            Label::No => entry.1.push(i),
        }
    }
    let mut kinds: Vec<ContextId> = by_kind.keys().copied().collect();
    kinds.shuffle(&mut rng);

    let mut queues: Vec<Vec<usize>> = Vec::with_capacity(kinds.len());
    for (position, kind) in kinds.iter().enumerate() {
        let (mut yes, mut no) = by_kind.remove(kind).expect("kind present");
        yes.shuffle(&mut rng);
        no.shuffle(&mut rng);
        let (first, second) = if position % 2 == 0 { (yes, no) } else { (no, yes) };
        let mut queue = Vec::with_capacity(first.len() + second.len());
        let (mut a, mut b) = (first.into_iter(), second.into_iter());
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (x, y) => queue.extend(x.into_iter().chain(y)),
            }
        }
        queues.push(queue);
    }

    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest).flat_map(|round| queues.iter().filter_map(move |q| q.get(round).copied())).collect()
}

fn image_order(manifest: &DatasetManifest, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..manifest.images.len()).collect();
    order.sort_by(|&a, &b| id_order(&manifest.images[a].image_id, &manifest.images[b].image_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Draws `k` shots from `train`. The result is a manifest holding the drawn
/// records and the images they belong to, in canonical order.
pub fn sample_shots(
    train: &DatasetManifest,
    k: usize,
    seed: u64,
    unit: ShotUnit,
) -> Result<DatasetManifest, DatasetError> {
    let name = format!("{}_{k}shot", train.name);
    let mut sample = match unit {
        ShotUnit::Pair => {
            let available = train.records.len();
            if k == 0 || k > available {
                return Err(DatasetError::NotEnoughShots { requested: k, available });
            }
            let picked: BTreeSet<usize> = pair_order(&train.records, seed).into_iter().take(k).collect();
            let records: Vec<AnnotationRecord> = picked.iter().map(|&i| train.records[i].clone()).collect();
            let images: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
            DatasetManifest {
                name,
                taxonomy_version: train.taxonomy_version.clone(),
                images: train.images.iter().filter(|i| images.contains(i.image_id.as_str())).cloned().collect(),
                records,
            }
        }
        ShotUnit::Image => {
            let available = train.images.len();
            if k == 0 || k > available {
                return Err(DatasetError::NotEnoughShots { requested: k, available });
            }
            let keep: HashSet<&str> =
                image_order(train, seed).into_iter().take(k).map(|i| train.images[i].image_id.as_str()).collect();
            train.restrict(&name, &keep)
        }
    };
    sample.canonicalize();
    Ok(sample)
}

#[cfg(test)]
mod tests;
