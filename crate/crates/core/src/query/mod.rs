//! Context queries: building prompts for a frame, dispatching them to a
//! backend and turning free-text replies into yes/no verdicts.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::as_millis;
use crate::protocol::{
    AskRequest, Backend, BackendError, ImagePayload, QueryMode, Question, DEFAULT_ASK_TIMEOUT,
};
use crate::taxonomy::{ContextId, Taxonomy};

mod parse;

pub use parse::{parse_individual_answer, parse_joint_answer, split_joint_prompt, AnswerCues};

/// Instruction placed before the numbered sub-questions of a joint prompt.
pub const JOINT_INSTRUCTION: &str = "Answer each of the following questions about the image with \
yes or no. Reply with a numbered list using the same numbers, for example \"1. yes 2. no\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    pub fn from_bool(value: bool) -> Verdict {
        if value {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Verdict::Yes => Some(true),
            Verdict::No => Some(false),
            Verdict::Unparseable => None,
        }
    }
}

/// Where an answer's confidence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Reported by the backend.
    Reported,
    /// No score was reported; a definitive reply is taken as certain.
    Assumed,
    /// Unparseable answers carry no confidence.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub verdict: Verdict,
    pub confidence: f64,
    pub confidence_source: ConfidenceSource,
    pub raw_text: String,
    pub latency_ms: f64,
}

impl Answer {
    pub fn unparseable(raw_text: impl Into<String>) -> Answer {
        Answer {
            verdict: Verdict::Unparseable,
            confidence: 0.0,
            confidence_source: ConfidenceSource::Absent,
            raw_text: raw_text.into(),
            latency_ms: 0.0,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Answer {
        self.latency_ms = as_millis(latency);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextQuery {
    pub query_id: String,
    pub image: ImagePayload,
    pub kinds: Vec<ContextId>,
    pub mode: QueryMode,
    pub prompt_text: String,
}

impl ContextQuery {
    pub fn to_request(&self) -> AskRequest {
        AskRequest {
            id: self.query_id.clone(),
            image: self.image.clone(),
            mode: self.mode,
            questions: vec![Question { qid: self.query_id.clone(), text: self.prompt_text.clone() }],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("no context kinds given")]
    EmptyKinds,
    #[error("context kind `{0}` requested twice")]
    DuplicateKind(ContextId),
    #[error("backend `{0}` does not support joint queries")]
    JointUnsupported(String),
    #[error("joint query with {requested} questions exceeds backend limit of {limit}")]
    TooManyQuestions { requested: usize, limit: usize },
}

static NEXT_QUERY: AtomicU64 = AtomicU64::new(1);

fn next_query_id(tag: &str) -> String {
    format!("q{:06}.{tag}", NEXT_QUERY.fetch_add(1, Ordering::Relaxed))
}

fn check_kinds(kinds: &[ContextId]) -> Result<(), QueryError> {
    if kinds.is_empty() {
        return Err(QueryError::EmptyKinds);
    }
    let mut seen = HashSet::new();
    for &k in kinds {
        if !seen.insert(k) {
            return Err(QueryError::DuplicateKind(k));
        }
    }
    Ok(())
}

/// One query per kind, each carrying the kind's canonical question.
pub fn build_individual_queries(
    taxonomy: &Taxonomy,
    image: &ImagePayload,
    kinds: &[ContextId],
) -> Result<Vec<ContextQuery>, QueryError> {
    check_kinds(kinds)?;
    Ok(kinds
        .iter()
        .map(|&kind| ContextQuery {
            query_id: next_query_id(kind.as_str()),
            image: image.clone(),
            kinds: vec![kind],
            mode: QueryMode::Individual,
            prompt_text: taxonomy.question_for(kind).to_string(),
        })
        .collect())
}

/// A single query whose prompt enumerates every kind's question as
/// `1. <q1> 2. <q2> ...` after a reply-format instruction.
pub fn build_joint_query(
    taxonomy: &Taxonomy,
    image: &ImagePayload,
    kinds: &[ContextId],
) -> Result<ContextQuery, QueryError> {
    check_kinds(kinds)?;
    let numbered: Vec<String> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| format!("{}. {}", i + 1, taxonomy.question_for(k)))
        .collect();
    Ok(ContextQuery {
        query_id: next_query_id("joint"),
        image: image.clone(),
        kinds: kinds.to_vec(),
        mode: QueryMode::Joint,
        prompt_text: format!("{JOINT_INSTRUCTION} Questions: {}", numbered.join(" ")),
    })
}

#[derive(Debug, Clone)]
pub struct RecognizeOptions {
    pub mode: QueryMode,
    /// Retry kinds left unparseable by a joint reply with individual queries.
    pub fallback: bool,
    pub timeout: Duration,
    /// Upper bound on concurrently outstanding individual queries.
    pub in_flight: usize,
}

impl Default for RecognizeOptions {
    fn default() -> Self {
        RecognizeOptions {
            mode: QueryMode::Individual,
            fallback: true,
            timeout: DEFAULT_ASK_TIMEOUT,
            in_flight: 1,
        }
    }
}

impl RecognizeOptions {
    pub fn individual() -> Self {
        Self::default()
    }

    pub fn joint(fallback: bool) -> Self {
        RecognizeOptions { mode: QueryMode::Joint, fallback, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFailure {
    pub query_id: String,
    pub kinds: Vec<ContextId>,
    pub error: BackendError,
}

/// Per-kind answers for one frame. Every requested kind has an entry; kinds
/// whose query failed are unparseable and listed in `failures`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recognition {
    pub answers: BTreeMap<ContextId, Answer>,
    pub failures: Vec<QueryFailure>,
    /// Backend calls made, including fallback retries.
    pub calls: usize,
}

impl Recognition {
    pub fn failed_query_ids(&self) -> Vec<String> {
        self.failures.iter().map(|f| f.query_id.clone()).collect()
    }

    pub fn failed_kinds(&self) -> HashSet<ContextId> {
        self.failures.iter().flat_map(|f| f.kinds.iter().copied()).collect()
    }

    pub fn connection_lost(&self) -> bool {
        self.failures.iter().any(|f| f.error.is_connection_loss())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecognizeError {
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{} backend queries failed: {}", failed_query_ids.len(), failed_query_ids.join(", "))]
    Backend { failed_query_ids: Vec<String>, partial: Box<Recognition> },
}

impl RecognizeError {
    /// The partial result for backend failures.
    pub fn partial(&self) -> Option<&Recognition> {
        match self {
            RecognizeError::Backend { partial, .. } => Some(partial),
            RecognizeError::Query(_) => None,
        }
    }
}

fn dispatch_individual(
    backend: &dyn Backend,
    queries: &[ContextQuery],
    timeout: Duration,
    in_flight: usize,
) -> Vec<Result<Answer, BackendError>> {
    let run = |q: &ContextQuery| {
        backend.ask(&q.to_request(), timeout).map(|reply| {
            let item = reply.response.answer_for(&q.query_id);
            match item {
                Some(item) => parse_individual_answer(&item.answer_text, item.confidence),
                None => Answer::unparseable(""),
            }
            .with_latency(reply.elapsed)
        })
    };
    let workers = in_flight.max(1).min(queries.len());
    if workers <= 1 {
        return queries.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Answer, BackendError>>>> = Mutex::new(vec![None; queries.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= queries.len() {
                    break;
                }
                let outcome = run(&queries[i]);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every query dispatched"))
        .collect()
}

fn recognize_individual(
    taxonomy: &Taxonomy,
    image: &ImagePayload,
    kinds: &[ContextId],
    backend: &dyn Backend,
    options: &RecognizeOptions,
    out: &mut Recognition,
) -> Result<(), QueryError> {
    let queries = build_individual_queries(taxonomy, image, kinds)?;
    let results = dispatch_individual(backend, &queries, options.timeout, options.in_flight);
    out.calls += queries.len();
    for (query, result) in queries.into_iter().zip(results) {
        let kind = query.kinds[0];
        match result {
            Ok(answer) => {
                out.answers.insert(kind, answer);
            }
            Err(error) => {
                out.answers.insert(kind, Answer::unparseable(""));
                out.failures.push(QueryFailure { query_id: query.query_id, kinds: query.kinds, error });
            }
        }
    }
    Ok(())
}

/// Asks `backend` about every kind for one image and returns a complete
/// per-kind map of answers.
///
/// Backend failures do not abort the remaining queries: the error carries
/// the failed query ids together with everything that was answered.
pub fn recognize(
    taxonomy: &Taxonomy,
    image: &ImagePayload,
    kinds: &[ContextId],
    backend: &dyn Backend,
    options: &RecognizeOptions,
) -> Result<Recognition, RecognizeError> {
    check_kinds(kinds)?;
    let mut out = Recognition::default();
    match options.mode {
        QueryMode::Individual => recognize_individual(taxonomy, image, kinds, backend, options, &mut out)?,
        QueryMode::Joint => {
            let descriptor = backend.descriptor();
            if !descriptor.supports_joint {
                return Err(QueryError::JointUnsupported(descriptor.name.clone()).into());
            }
            if !descriptor.accepts_joint(kinds.len()) {
                return Err(QueryError::TooManyQuestions {
                    requested: kinds.len(),
                    limit: descriptor.max_joint_questions as usize,
                }
                .into());
            }
            let query = build_joint_query(taxonomy, image, kinds)?;
            out.calls += 1;
            match backend.ask(&query.to_request(), options.timeout) {
                Ok(reply) => {
                    let (text, confidence) = match reply.response.answer_for(&query.query_id) {
                        Some(item) => (item.answer_text.as_str(), item.confidence),
                        None => ("", None),
                    };
                    let parsed = parse_joint_answer(text, kinds, confidence);
                    for (kind, answer) in parsed {
                        out.answers.insert(kind, answer.with_latency(reply.elapsed));
                    }
                    if options.fallback {
                        let retry: Vec<ContextId> = kinds
                            .iter()
                            .copied()
                            .filter(|k| out.answers[k].verdict == Verdict::Unparseable)
                            .collect();
                        if !retry.is_empty() {
                            recognize_individual(taxonomy, image, &retry, backend, options, &mut out)?;
                        }
                    }
                }
                Err(error) => {
                    for &k in kinds {
                        out.answers.insert(k, Answer::unparseable(""));
                    }
                    out.failures.push(QueryFailure { query_id: query.query_id, kinds: kinds.to_vec(), error });
                }
            }
        }
    }

    if out.failures.is_empty() {
        Ok(out)
    } else {
        Err(RecognizeError::Backend { failed_query_ids: out.failed_query_ids(), partial: Box::new(out) })
    }
}

/// Same as [`recognize`] but folds backend failures into the returned value.
pub fn recognize_lenient(
    taxonomy: &Taxonomy,
    image: &ImagePayload,
    kinds: &[ContextId],
    backend: &dyn Backend,
    options: &RecognizeOptions,
) -> Result<Recognition, QueryError> {
    match recognize(taxonomy, image, kinds, backend, options) {
        Ok(r) => Ok(r),
        Err(RecognizeError::Backend { partial, .. }) => Ok(*partial),
        Err(RecognizeError::Query(e)) => Err(e),
    }
}

/// One-off free-form question, outside the taxonomy.
pub fn ask_freeform(
    backend: &dyn Backend,
    image: &ImagePayload,
    question: &str,
    timeout: Duration,
) -> Result<Answer, BackendError> {
    let id = next_query_id("adhoc");
    let request = AskRequest {
        id: id.clone(),
        image: image.clone(),
        mode: QueryMode::Individual,
        questions: vec![Question { qid: id.clone(), text: question.to_string() }],
    };
    let reply = backend.ask(&request, timeout)?;
    let answer = match reply.response.answer_for(&id) {
        Some(item) => parse_individual_answer(&item.answer_text, item.confidence),
        None => Answer::unparseable(""),
    };
    Ok(answer.with_latency(reply.elapsed))
}
