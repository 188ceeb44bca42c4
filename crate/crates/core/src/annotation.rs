//! Machine annotation by multi-backend agreement, review sampling and the
//! human review flow.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Backend, ImagePayload};
use crate::query::{recognize_lenient, ConfidenceSource, RecognizeOptions, Verdict};
use crate::taxonomy::{ContextId, Taxonomy};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotateError {
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("sample rate {0} is outside (0, 1]")]
    InvalidRate(f64),
    #[error("at least one backend is required")]
    NoBackends,
    #[error("no backend answered for image {0}")]
    AllBackendsFailed(String),
    #[error("nothing to sample: record list is empty")]
    EmptyRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn from_bool(value: bool) -> Label {
        if value {
            Label::Yes
        } else {
            Label::No
        }
    }

    pub fn as_bool(self) -> bool {
        self == Label::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Hand,
    Machine,
    Verified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSubset {
    Kitti,
    Nuscenes,
    Pittsburgh,
    Web,
    MaCorpus,
}

impl SourceSubset {
    pub const ALL: [SourceSubset; 5] =
        [SourceSubset::Kitti, SourceSubset::Nuscenes, SourceSubset::Pittsburgh, SourceSubset::Web, SourceSubset::MaCorpus];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceSubset::Kitti => "kitti",
            SourceSubset::Nuscenes => "nuscenes",
            SourceSubset::Pittsburgh => "pittsburgh",
            SourceSubset::Web => "web",
            SourceSubset::MaCorpus => "ma_corpus",
        }
    }
}

impl std::str::FromStr for SourceSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceSubset::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown source subset `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendVote {
    pub backend: String,
    pub verdict: Verdict,
    pub confidence: f64,
    #[serde(default = "reported")]
    pub confidence_source: ConfidenceSource,
}

fn reported() -> ConfidenceSource {
    ConfidenceSource::Reported
}

impl BackendVote {
    pub fn new(backend: &str, verdict: Verdict, confidence: f64) -> Self {
        BackendVote { backend: backend.to_string(), verdict, confidence, confidence_source: ConfidenceSource::Reported }
    }
}

/// One image/question/answer triple plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question_id: u64,
    pub image_id: String,
    pub kind: ContextId,
    pub question: String,
    pub answer: Label,
    pub origin: Origin,
    pub source_subset: SourceSubset,
    #[serde(default)]
    pub backend_votes: Vec<BackendVote>,
    pub taxonomy_version: String,
    pub template_version: String,
    /// Unix milliseconds of the accepting review decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewed_at_ms: Option<u64>,
}

impl AnnotationRecord {
    /// Checks the provenance invariants.
    pub fn check(&self, threshold: f64) -> Result<(), String> {
        match self.origin {
            Origin::Machine => {
                if self.backend_votes.is_empty() {
                    return Err(format!("machine record {} has no votes", self.question_id));
                }
                if agreement(&self.backend_votes, threshold) != Ok(self.answer) {
                    return Err(format!("machine record {} votes do not support its answer", self.question_id));
                }
            }
            Origin::Verified if self.reviewed_at_ms.is_none() => {
                return Err(format!("verified record {} has no review timestamp", self.question_id));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertainReason {
    LowConfidence,
    Conflict,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainItem {
    pub image_id: String,
    pub kind: ContextId,
    pub backend_votes: Vec<BackendVote>,
    pub reason: UncertainReason,
}

/// The agreement rule: a label exists only when every vote is the same
/// definitive verdict with confidence strictly above `threshold`.
///
/// Mixed yes/no votes are a conflict even if some other vote is
/// unparseable; otherwise any unparseable vote makes the pair unparseable.
pub fn agreement(votes: &[BackendVote], threshold: f64) -> Result<Label, UncertainReason> {
    let yes = votes.iter().any(|v| v.verdict == Verdict::Yes);
    let no = votes.iter().any(|v| v.verdict == Verdict::No);
    if yes && no {
        return Err(UncertainReason::Conflict);
    }
    if votes.is_empty() || votes.iter().any(|v| v.verdict == Verdict::Unparseable) {
        return Err(UncertainReason::Unparseable);
    }
    // Written so that a NaN confidence never counts as confident.
    if !votes.iter().all(|v| v.confidence > threshold) {
        return Err(UncertainReason::LowConfidence);
    }
    Ok(Label::from_bool(yes))
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub threshold: f64,
    /// Emit unanimous confident "no" answers as negative records.
    pub emit_negatives: bool,
    pub recognize: RecognizeOptions,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions { threshold: DEFAULT_THRESHOLD, emit_negatives: true, recognize: RecognizeOptions::individual() }
    }
}

/// The image being annotated.
#[derive(Debug, Clone)]
pub struct AnnotationTarget {
    pub image_id: String,
    pub image: ImagePayload,
    pub subset: SourceSubset,
    /// Question ids are `base_question_id + kind index`.
    pub base_question_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationPass {
    pub records: Vec<AnnotationRecord>,
    pub uncertain: Vec<UncertainItem>,
    /// Agreed negatives dropped because `emit_negatives` is off.
    pub suppressed_negatives: Vec<ContextId>,
}

/// Asks every backend about every kind and keeps only agreed labels.
pub fn machine_annotate(
    taxonomy: &Taxonomy,
    target: &AnnotationTarget,
    kinds: &[ContextId],
    backends: &[&dyn Backend],
    options: &AnnotateOptions,
) -> Result<AnnotationPass, AnnotateError> {
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        return Err(AnnotateError::InvalidThreshold(options.threshold));
    }
    if backends.is_empty() {
        return Err(AnnotateError::NoBackends);
    }

    let recognitions: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = backends
            .iter()
            .map(|backend| {
                scope.spawn(move || recognize_lenient(taxonomy, &target.image, kinds, *backend, &options.recognize))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("annotation worker panicked")).collect()
    });

    let all_failed = recognitions.iter().all(|r| match r {
        Ok(rec) => rec.failed_kinds().len() == kinds.len(),
        Err(_) => true,
    });
    if all_failed {
        return Err(AnnotateError::AllBackendsFailed(target.image_id.clone()));
    }

    let mut pass = AnnotationPass::default();
    for &kind in kinds {
        let votes: Vec<BackendVote> = backends
            .iter()
            .zip(&recognitions)
            .map(|(backend, rec)| {
                let name = backend.descriptor().name.as_str();
                match rec.as_ref().ok().and_then(|r| r.answers.get(&kind)) {
                    Some(a) => BackendVote {
                        backend: name.to_string(),
                        verdict: a.verdict,
                        confidence: a.confidence,
                        confidence_source: a.confidence_source,
                    },
                    None => BackendVote {
                        backend: name.to_string(),
                        verdict: Verdict::Unparseable,
                        confidence: 0.0,
                        confidence_source: ConfidenceSource::Absent,
                    },
                }
            })
            .collect();
        match agreement(&votes, options.threshold) {
            Ok(Label::No) if !options.emit_negatives => pass.suppressed_negatives.push(kind),
            Ok(answer) => pass.records.push(AnnotationRecord {
                question_id: target.base_question_id + kind.index() as u64,
                image_id: target.image_id.clone(),
                kind,
                question: taxonomy.question_for(kind).to_string(),
                answer,
                origin: Origin::Machine,
                source_subset: target.subset,
                backend_votes: votes,
                taxonomy_version: taxonomy.taxonomy_version().to_string(),
                template_version: taxonomy.template_version().to_string(),
                reviewed_at_ms: None,
            }),
            Err(reason) => pass.uncertain.push(UncertainItem {
                image_id: target.image_id.clone(),
                kind,
                backend_votes: votes,
                reason,
            }),
        }
    }
    Ok(pass)
}

/// Seeded review sample of `ceil(rate * n)` records, stratified by kind so
/// that every kind present is represented when the sample is large enough.
/// The result is ordered by question id.
pub fn sample_for_review(
    records: &[AnnotationRecord],
    rate: f64,
    seed: u64,
) -> Result<Vec<AnnotationRecord>, AnnotateError> {
    if records.is_empty() {
        return Err(AnnotateError::EmptyRecords);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(AnnotateError::InvalidRate(rate));
    }
    let target = ((rate * records.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let target = target.min(records.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<ContextId, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.kind).or_default().push(i);
    }
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
    }

    let mut kinds: Vec<ContextId> = strata.keys().copied().collect();
    kinds.shuffle(&mut rng);
    let mut take: BTreeMap<ContextId, usize> = BTreeMap::new();
    if target < kinds.len() {
        for &k in &kinds[..target] {
            take.insert(k, 1);
        }
    } else {
        // One per kind, then the rest proportional to what is left in each
        // stratum (largest remainder).
        let spare_total: usize = strata.values().map(|m| m.len() - 1).sum();
        let remaining = target - kinds.len();
        let mut remainders = Vec::new();
        let mut assigned = 0;
        for &k in &kinds {
            let spare = strata[&k].len() - 1;
            let exact = if spare_total == 0 { 0.0 } else { remaining as f64 * spare as f64 / spare_total as f64 };
            let whole = (exact.floor() as usize).min(spare);
            assigned += whole;
            take.insert(k, 1 + whole);
            remainders.push((exact - whole as f64, k));
        }
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut left = remaining - assigned;
        while left > 0 {
            let mut progressed = false;
            for &(_, k) in &remainders {
                if left == 0 {
                    break;
                }
                if take[&k] < strata[&k].len() {
                    *take.get_mut(&k).unwrap() += 1;
                    left -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    let mut picked: Vec<&AnnotationRecord> = take
        .iter()
        .flat_map(|(k, &n)| strata[k][..n].iter().map(|&i| &records[i]))
        .collect();
    picked.sort_by_key(|r| r.question_id);
    Ok(picked.into_iter().cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Skip,
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "a" | "accept" => Ok(Decision::Accept),
            "r" | "reject" => Ok(Decision::Reject),
            "s" | "skip" => Ok(Decision::Skip),
            other => Err(format!("unknown decision `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub record_id: u64,
    pub decision: Decision,
}

impl ReviewDecision {
    /// Parses one line of a decisions file: a JSON object, or `id,decision`.
    pub fn parse_line(line: &str) -> Result<ReviewDecision, String> {
        let line = line.trim();
        if line.starts_with('{') {
            return serde_json::from_str(line).map_err(|e| e.to_string());
        }
        let (id, decision) = line
            .split_once([',', ' ', '\t'])
            .ok_or_else(|| format!("expected `id,decision`, got {line:?}"))?;
        Ok(ReviewDecision {
            record_id: id.trim().parse().map_err(|e| format!("bad record id {id:?}: {e}"))?,
            decision: decision.parse()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Verified,
    Removed,
    Unchanged,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp_ms: u64,
    pub record_id: u64,
    pub decision: Decision,
    pub outcome: AuditOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Applies review decisions to a dataset's records, writing one audit line
/// per decision to an append-only sink.
pub struct ReviewSession<W: Write> {
    records: BTreeMap<u64, AnnotationRecord>,
    sampled: BTreeSet<u64>,
    audit: W,
    now_ms: Box<dyn Fn() -> u64>,
}

impl<W: Write> ReviewSession<W> {
    pub fn new(records: Vec<AnnotationRecord>, sample: &[AnnotationRecord], audit: W) -> Self {
        ReviewSession {
            records: records.into_iter().map(|r| (r.question_id, r)).collect(),
            sampled: sample.iter().map(|r| r.question_id).collect(),
            audit,
            now_ms: Box::new(unix_millis),
        }
    }

    pub fn with_time_source(mut self, now_ms: impl Fn() -> u64 + 'static) -> Self {
        self.now_ms = Box::new(now_ms);
        self
    }

    pub fn record(&self, id: u64) -> Option<&AnnotationRecord> {
        self.records.get(&id)
    }

    pub fn apply(&mut self, decision: ReviewDecision) -> io::Result<AuditEntry> {
        let timestamp_ms = (self.now_ms)();
        let id = decision.record_id;
        let (outcome, detail) = if !self.sampled.contains(&id) || !self.records.contains_key(&id) {
            let detail = if self.records.contains_key(&id) { "record not in review sample" } else { "unknown record id" };
            (AuditOutcome::Unknown, Some(detail.to_string()))
        } else {
            match decision.decision {
                Decision::Accept => {
                    let r = self.records.get_mut(&id).unwrap();
                    r.origin = Origin::Verified;
                    r.reviewed_at_ms = Some(timestamp_ms);
                    (AuditOutcome::Verified, None)
                }
                Decision::Reject => {
                    let r = self.records.remove(&id).unwrap();
                    self.sampled.remove(&id);
                    (AuditOutcome::Removed, Some(format!("{} {} = {}", r.image_id, r.kind, r.answer.as_str())))
                }
                Decision::Skip => (AuditOutcome::Unchanged, None),
            }
        };
        let entry = AuditEntry { timestamp_ms, record_id: id, decision: decision.decision, outcome, detail };
        serde_json::to_writer(&mut self.audit, &entry)?;
        self.audit.write_all(b"\n")?;
        self.audit.flush()?;
        Ok(entry)
    }

    /// The reviewed dataset, ordered by question id.
    pub fn finish(self) -> Vec<AnnotationRecord> {
        self.records.into_values().collect()
    }
}

/// Terminal review loop: shows each sampled record and reads one decision
/// key (`a`ccept, `r`eject, `s`kip, `q`uit) per line of `input`.
pub fn review_interactive<W: Write, R: BufRead, O: Write>(
    session: &mut ReviewSession<W>,
    sample: &[AnnotationRecord],
    locate: impl Fn(&str) -> String,
    mut input: R,
    mut output: O,
) -> io::Result<Vec<AuditEntry>> {
    let mut entries = Vec::new();
    'records: for (n, record) in sample.iter().enumerate() {
        writeln!(output, "[{}/{}] record {}", n + 1, sample.len(), record.question_id)?;
        writeln!(output, "  image:    {}", locate(&record.image_id))?;
        writeln!(output, "  question: {}", record.question)?;
        writeln!(output, "  answer:   {}", record.answer.as_str())?;
        for v in &record.backend_votes {
            writeln!(output, "  vote:     {} -> {:?} ({:.3})", v.backend, v.verdict, v.confidence)?;
        }
        loop {
            write!(output, "  [a]ccept / [r]eject / [s]kip / [q]uit > ")?;
            output.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                break 'records;
            }
            let key = line.trim();
            if key.eq_ignore_ascii_case("q") {
                break 'records;
            }
            match key.parse::<Decision>() {
                Ok(decision) => {
                    entries.push(session.apply(ReviewDecision { record_id: record.question_id, decision })?);
                    break;
                }
                Err(e) => writeln!(output, "  {e}")?,
            }
        }
    }
    Ok(entries)
}
