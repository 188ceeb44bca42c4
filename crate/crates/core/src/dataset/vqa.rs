//! VQA-v2 shaped files.
//!
//! Four files per dataset, all keyed by question id:
//!
//! * `<name>_questions.json` and `<name>_annotations.json` follow the stock
//!   VQA-v2 schema, so existing tooling reads them unchanged.
//! * `<name>_extensions.jsonl` carries what VQA-v2 has no field for: kind,
//!   origin, backend votes, versions and review time.
//! * `<name>_images.json` is the image catalog.
//!
//! Output is canonical (images by id, records by question id) and compact,
//! so exporting an imported dataset reproduces the same bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{write_atomic, DatasetError, DatasetManifest, ImageMeta, UnknownQuestion};
use crate::annotation::{AnnotationRecord, BackendVote, Label, Origin, SourceSubset};
use crate::taxonomy::{ContextId, Taxonomy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaPaths {
    pub questions: PathBuf,
    pub annotations: PathBuf,
    pub images: PathBuf,
    pub extensions: Option<PathBuf>,
}

impl VqaPaths {
    /// The conventional file names under `dir`. The side file is included
    /// only when it exists.
    pub fn in_dir(dir: &Path, name: &str) -> VqaPaths {
        let extensions = dir.join(format!("{name}_extensions.jsonl"));
        VqaPaths {
            questions: dir.join(format!("{name}_questions.json")),
            annotations: dir.join(format!("{name}_annotations.json")),
            images: dir.join(format!("{name}_images.json")),
            extensions: extensions.exists().then_some(extensions),
        }
    }
}

/// VQA-v2 image ids are integers; non-numeric ids are kept as strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum VqaImageId {
    Int(u64),
    Str(String),
}

impl VqaImageId {
    fn from_id(id: &str) -> VqaImageId {
        match id.parse::<u64>() {
            Ok(n) if n.to_string() == id => VqaImageId::Int(n),
            _ => VqaImageId::Str(id.to_string()),
        }
    }

    fn into_id(self) -> String {
        match self {
            VqaImageId::Int(n) => n.to_string(),
            VqaImageId::Str(s) => s,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VqaInfo {
    description: String,
    version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VqaLicense {
    name: String,
    url: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VqaQuestion {
    image_id: VqaImageId,
    question: String,
    question_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VqaAnswer {
    answer: String,
    answer_confidence: String,
    answer_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VqaAnnotation {
    question_type: String,
    multiple_choice_answer: String,
    answers: Vec<VqaAnswer>,
    image_id: VqaImageId,
    answer_type: String,
    question_id: u64,
}

#[derive(Serialize)]
struct QuestionsFile<'a> {
    info: &'a VqaInfo,
    task_type: &'static str,
    data_type: &'static str,
    data_subtype: &'a str,
    license: &'a VqaLicense,
    questions: Vec<VqaQuestion>,
}

#[derive(Serialize)]
struct AnnotationsFile<'a> {
    info: &'a VqaInfo,
    data_type: &'static str,
    data_subtype: &'a str,
    license: &'a VqaLicense,
    annotations: Vec<VqaAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Catalog {
    name: String,
    taxonomy_version: String,
    images: Vec<ImageMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Extension {
    question_id: u64,
    kind: ContextId,
    origin: Origin,
    source_subset: SourceSubset,
    #[serde(default)]
    backend_votes: Vec<BackendVote>,
    taxonomy_version: String,
    template_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reviewed_at_ms: Option<u64>,
}

/// The serialized contents of the four files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaDocuments {
    pub questions: Vec<u8>,
    pub annotations: Vec<u8>,
    pub extensions: Vec<u8>,
    pub images: Vec<u8>,
}

fn question_type(question: &str) -> String {
    question.split_whitespace().take(2).collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Renders `manifest` in canonical order without touching the filesystem.
pub fn render_vqa(manifest: &DatasetManifest) -> Result<VqaDocuments, DatasetError> {
    manifest.validate()?;
    let mut m = manifest.clone();
    m.canonicalize();

    let info = VqaInfo { description: format!("{} driving-context queries", m.name), version: m.taxonomy_version.clone() };
    let license = VqaLicense { name: String::new(), url: String::new() };
    let questions = QuestionsFile {
        info: &info,
        task_type: "Open-Ended",
        data_type: "driving_contexts",
        data_subtype: &m.name,
        license: &license,
        questions: m
            .records
            .iter()
            .map(|r| VqaQuestion {
                image_id: VqaImageId::from_id(&r.image_id),
                question: r.question.clone(),
                question_id: r.question_id,
            })
            .collect(),
    };
    let annotations = AnnotationsFile {
        info: &info,
        data_type: "driving_contexts",
        data_subtype: &m.name,
        license: &license,
        annotations: m
            .records
            .iter()
            .map(|r| VqaAnnotation {
                question_type: question_type(&r.question),
                multiple_choice_answer: r.answer.as_str().to_string(),
                answers: vec![VqaAnswer {
                    answer: r.answer.as_str().to_string(),
                    answer_confidence: "yes".into(),
                    answer_id: 1,
                }],
                image_id: VqaImageId::from_id(&r.image_id),
                answer_type: "yes/no".into(),
                question_id: r.question_id,
            })
            .collect(),
    };
    let mut extensions = Vec::new();
    for r in &m.records {
        let ext = Extension {
            question_id: r.question_id,
            kind: r.kind,
            origin: r.origin,
            source_subset: r.source_subset,
            backend_votes: r.backend_votes.clone(),
            taxonomy_version: r.taxonomy_version.clone(),
            template_version: r.template_version.clone(),
            reviewed_at_ms: r.reviewed_at_ms,
        };
        serde_json::to_writer(&mut extensions, &ext).expect("extension serializes");
        extensions.push(b'\n');
    }
    let catalog = Catalog { name: m.name.clone(), taxonomy_version: m.taxonomy_version.clone(), images: m.images };

    Ok(VqaDocuments {
        questions: json_line(&questions),
        annotations: json_line(&annotations),
        extensions,
        images: json_line(&catalog),
    })
}

fn json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("vqa document serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes the four files for `manifest` into `dir`.
pub fn export_vqa(manifest: &DatasetManifest, dir: &Path) -> Result<VqaPaths, DatasetError> {
    let docs = render_vqa(manifest)?;
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let name = &manifest.name;
    let paths = VqaPaths {
        questions: dir.join(format!("{name}_questions.json")),
        annotations: dir.join(format!("{name}_annotations.json")),
        images: dir.join(format!("{name}_images.json")),
        extensions: Some(dir.join(format!("{name}_extensions.jsonl"))),
    };
    write_atomic(&paths.questions, &docs.questions)?;
    write_atomic(&paths.annotations, &docs.annotations)?;
    write_atomic(&paths.images, &docs.images)?;
    write_atomic(paths.extensions.as_ref().expect("set above"), &docs.extensions)?;
    Ok(paths)
}

fn malformed(path: &Path, detail: impl std::fmt::Display) -> DatasetError {
    DatasetError::Malformed { file: path.display().to_string(), detail: detail.to_string() }
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}

/// Accepts either the stock wrapper object or a bare list.
fn entries<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<Vec<T>, DatasetError> {
    let list = match read_json(path)? {
        Value::Array(items) => Value::Array(items),
        Value::Object(mut obj) => obj.remove(key).ok_or_else(|| malformed(path, format!("missing `{key}`")))?,
        _ => return Err(malformed(path, format!("expected a list or an object with `{key}`"))),
    };
    serde_json::from_value(list).map_err(|e| malformed(path, e))
}

fn mismatch_detail(what: &str, ids: &[u64]) -> String {
    let shown: Vec<String> = ids.iter().take(5).map(u64::to_string).collect();
    let more = if ids.len() > 5 { format!(" and {} more", ids.len() - 5) } else { String::new() };
    format!("{} question id(s) {what}: {}{more}", ids.len(), shown.join(", "))
}

/// Reads a dataset back. Questions must match a template of `taxonomy`;
/// any that do not are reported together.
pub fn import_vqa(taxonomy: &Taxonomy, paths: &VqaPaths) -> Result<DatasetManifest, DatasetError> {
    let catalog: Catalog = serde_json::from_value(read_json(&paths.images)?).map_err(|e| malformed(&paths.images, e))?;
    let questions: Vec<VqaQuestion> = entries(&paths.questions, "questions")?;
    let annotations: Vec<VqaAnnotation> = entries(&paths.annotations, "annotations")?;

    let mut by_qid: BTreeMap<u64, VqaQuestion> = BTreeMap::new();
    for q in questions {
        let qid = q.question_id;
        if by_qid.insert(qid, q).is_some() {
            return Err(malformed(&paths.questions, format!("duplicate question id {qid}")));
        }
    }
    let mut answers: HashMap<u64, VqaAnnotation> = HashMap::new();
    for a in annotations {
        let qid = a.question_id;
        if answers.insert(qid, a).is_some() {
            return Err(malformed(&paths.annotations, format!("duplicate question id {qid}")));
        }
    }
    let mut orphan: Vec<u64> = answers.keys().filter(|q| !by_qid.contains_key(q)).copied().collect();
    if !orphan.is_empty() {
        orphan.sort_unstable();
        return Err(DatasetError::IdMismatch(mismatch_detail("annotated but never asked", &orphan)));
    }
    let unanswered: Vec<u64> = by_qid.keys().filter(|q| !answers.contains_key(q)).copied().collect();
    if !unanswered.is_empty() {
        return Err(DatasetError::IdMismatch(mismatch_detail("asked but not annotated", &unanswered)));
    }

    let mut extensions: HashMap<u64, Extension> = HashMap::new();
    if let Some(path) = &paths.extensions {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let ext: Extension = serde_json::from_str(line).map_err(|e| malformed(path, format!("line {}: {e}", n + 1)))?;
            if !by_qid.contains_key(&ext.question_id) {
                return Err(DatasetError::IdMismatch(mismatch_detail("in the side file only", &[ext.question_id])));
            }
            if extensions.insert(ext.question_id, ext).is_some() {
                return Err(malformed(path, format!("line {}: duplicate question id", n + 1)));
            }
        }
    }

    let subsets: HashMap<&str, SourceSubset> =
        catalog.images.iter().map(|i| (i.image_id.as_str(), i.source_subset)).collect();
    let mut unknown = Vec::new();
    let mut records = Vec::with_capacity(by_qid.len());
    let mut seen_pairs = HashSet::new();
    for (qid, q) in by_qid {
        let a = answers.remove(&qid).expect("checked above");
        let image_id = q.image_id.into_id();
        if a.image_id.clone().into_id() != image_id {
            return Err(DatasetError::IdMismatch(format!("question {qid} refers to different images in the two files")));
        }
        let Some(kind) = taxonomy.kind_for_question(&q.question) else {
            unknown.push(UnknownQuestion { question_id: qid, image_id, question: q.question });
            continue;
        };
        let answer = match a.multiple_choice_answer.trim().to_ascii_lowercase().as_str() {
            "yes" => Label::Yes,
            "no" => Label::No,
            other => return Err(malformed(&paths.annotations, format!("question {qid}: answer `{other}` is not yes/no"))),
        };
        if !seen_pairs.insert((image_id.clone(), kind)) {
            return Err(DatasetError::DuplicatePair { image_id, kind });
        }
        let subset = subsets.get(image_id.as_str()).copied();
        let record = match extensions.remove(&qid) {
            Some(ext) => {
                if ext.kind != kind {
                    return Err(DatasetError::Malformed {
                        file: "side file".into(),
                        detail: format!("question {qid} is tagged {} but asks about {kind}", ext.kind),
                    });
                }
                AnnotationRecord {
                    question_id: qid,
                    image_id,
                    kind,
                    question: q.question,
                    answer,
                    origin: ext.origin,
                    source_subset: ext.source_subset,
                    backend_votes: ext.backend_votes,
                    taxonomy_version: ext.taxonomy_version,
                    template_version: ext.template_version,
                    reviewed_at_ms: ext.reviewed_at_ms,
                }
            }
            None => AnnotationRecord {
                question_id: qid,
                image_id,
                kind,
                question: q.question,
                answer,
                origin: Origin::Hand,
                source_subset: subset.unwrap_or(SourceSubset::Web),
                backend_votes: Vec::new(),
                taxonomy_version: catalog.taxonomy_version.clone(),
                template_version: taxonomy.template_version().to_string(),
                reviewed_at_ms: None,
            },
        };
        records.push(record);
    }
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownQuestions(unknown));
    }

    let mut manifest =
        DatasetManifest { name: catalog.name, taxonomy_version: catalog.taxonomy_version, images: catalog.images, records };
    manifest.validate()?;
    manifest.canonicalize();
    Ok(manifest)
}
