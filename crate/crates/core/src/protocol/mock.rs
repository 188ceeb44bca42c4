//! Deterministic in-process backend for tests, benchmarks and simulation.
//!
//! Verdicts come from per-image ground truth, optionally corrupted by a
//! seeded noise model. Every `(seed, image, kind)` triple owns its own random
//! stream, so answers do not depend on call order or concurrency.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{
    fnv1a, AnswerItem, AskRequest, AskResponse, Backend, BackendDescriptor, BackendError, QueryMode,
    Reply, DEFAULT_MAX_IMAGE_BYTES, PROTOCOL_VERSION,
};
use crate::clock::{as_millis, millis, Clock, SystemClock};
use crate::query::{split_joint_prompt, Answer, ConfidenceSource, Verdict};
use crate::taxonomy::{ContextId, Taxonomy, CONTEXT_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ConfidenceDist {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl ConfidenceDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let v = match *self {
            ConfidenceDist::Fixed { value } => value,
            ConfidenceDist::Uniform { low, high } if high > low => rng.random_range(low..high),
            ConfidenceDist::Uniform { low, .. } => low,
            ConfidenceDist::Beta { alpha, beta } => match Beta::new(alpha, beta) {
                Ok(d) => d.sample(rng),
                Err(_) => 0.5,
            },
        };
        v.clamp(0.0, 1.0)
    }
}

/// How the mock deviates from ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Probability of answering the opposite of the truth.
    pub flip_prob: f64,
    /// Per-kind overrides of `flip_prob`.
    #[serde(default)]
    pub per_kind: BTreeMap<ContextId, f64>,
    /// Confidence reported for answers that match the truth.
    pub correct: ConfidenceDist,
    /// Confidence reported for flipped answers.
    pub incorrect: ConfidenceDist,
}

impl NoiseModel {
    pub fn perfect() -> Self {
        Self::uniform(0.0)
    }

    pub fn uniform(flip_prob: f64) -> Self {
        NoiseModel {
            flip_prob,
            per_kind: BTreeMap::new(),
            correct: ConfidenceDist::Fixed { value: 0.999 },
            incorrect: ConfidenceDist::Uniform { low: 0.5, high: 0.9 },
        }
    }

    pub fn flip_prob_for(&self, kind: ContextId) -> f64 {
        self.per_kind.get(&kind).copied().unwrap_or(self.flip_prob).clamp(0.0, 1.0)
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::perfect()
    }
}

/// Simulated service time: a fixed cost per call plus a marginal cost per
/// question contained in the call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub per_call_ms: f64,
    pub per_question_ms: f64,
}

impl CostModel {
    pub fn fixed(per_call_ms: f64) -> Self {
        CostModel { per_call_ms, per_question_ms: 0.0 }
    }

    pub fn delay(&self, questions: usize) -> Duration {
        millis(self.per_call_ms + self.per_question_ms * questions as f64)
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_ref: String,
    pub contexts: BTreeMap<ContextId, bool>,
}

/// Ground truth for a set of images, keyed by image locator. Stored on disk
/// as JSON lines, one [`ImageTruth`] per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    images: HashMap<String, ImageTruth>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: &str, kind: ContextId, value: bool) {
        self.images
            .entry(image_ref.to_string())
            .or_insert_with(|| ImageTruth { image_ref: image_ref.to_string(), contexts: BTreeMap::new() })
            .contexts
            .insert(kind, value);
    }

    pub fn insert_image(&mut self, truth: ImageTruth) {
        self.images.insert(truth.image_ref.clone(), truth);
    }

    pub fn get(&self, image_ref: &str) -> Option<&ImageTruth> {
        self.images.get(image_ref)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images sorted by locator.
    pub fn images(&self) -> Vec<&ImageTruth> {
        let mut v: Vec<_> = self.images.values().collect();
        v.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        v
    }

    /// Reads a sidecar file; every record must carry all 24 contexts.
    pub fn load(path: &Path) -> Result<GroundTruth, BackendError> {
        let file = fs::File::open(path)
            .map_err(|e| BackendError::MissingGroundTruth(format!("{}: {e}", path.display())))?;
        let mut truth = GroundTruth::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::MissingGroundTruth(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageTruth = serde_json::from_str(&line).map_err(|e| {
                BackendError::MissingGroundTruth(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            if record.contexts.len() != CONTEXT_COUNT {
                return Err(BackendError::MissingGroundTruth(format!(
                    "{}:{}: expected {CONTEXT_COUNT} contexts, found {}",
                    path.display(),
                    n + 1,
                    record.contexts.len()
                )));
            }
            truth.insert_image(record);
        }
        Ok(truth)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = Vec::new();
        for image in self.images() {
            serde_json::to_writer(&mut out, image)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)
    }
}

fn stream_rng(seed: u64, image_ref: &str, kind: ContextId) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(image_ref.as_bytes()).rotate_left(17) ^ ((kind.index() as u64 + 1) << 48);
    // splitmix64 finalizer
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    state = (state ^ (state >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    state = (state ^ (state >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(state ^ (state >> 31))
}

/// The mock's answer for one `(image, kind)`: the truth, flipped with the
/// kind's flip probability, with a confidence drawn from the matching
/// distribution.
pub fn mock_answer(
    image: &ImageTruth,
    kind: ContextId,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Answer, BackendError> {
    let truth = *image.contexts.get(&kind).ok_or_else(|| {
        BackendError::MissingGroundTruth(format!("no `{kind}` bit for image {}", image.image_ref))
    })?;
    let mut rng = stream_rng(seed, &image.image_ref, kind);
    let flipped = rng.random_bool(noise.flip_prob_for(kind));
    let verdict = truth != flipped;
    let confidence = if flipped { noise.incorrect.sample(&mut rng) } else { noise.correct.sample(&mut rng) };
    Ok(Answer {
        verdict: Verdict::from_bool(verdict),
        confidence,
        confidence_source: ConfidenceSource::Reported,
        raw_text: if verdict { "Yes" } else { "No" }.to_string(),
        latency_ms: 0.0,
    })
}

/// Hook to tamper with a response before it is returned, e.g. to drop items
/// from a joint reply.
pub type ReplyFilter = Arc<dyn Fn(&AskRequest, &mut AskResponse) + Send + Sync>;

pub struct MockBackend {
    descriptor: BackendDescriptor,
    truth: Arc<GroundTruth>,
    noise: NoiseModel,
    seed: u64,
    cost: CostModel,
    joint_cost: Option<CostModel>,
    clock: Arc<dyn Clock>,
    aliases: HashMap<String, ContextId>,
    reply_filter: Option<ReplyFilter>,
    outages: Vec<(Duration, Duration)>,
    calls: AtomicU64,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl MockBackend {
    pub fn new(truth: GroundTruth) -> Self {
        Self::shared(Arc::new(truth))
    }

    pub fn shared(truth: Arc<GroundTruth>) -> Self {
        let mut aliases = HashMap::new();
        aliases.insert(normalize("Are there tall buildings around?"), ContextId::UrbanCanyon);
        MockBackend {
            descriptor: BackendDescriptor {
                name: "mock".into(),
                model_id: "ground-truth-mock".into(),
                supports_joint: true,
                max_joint_questions: 0,
                supports_confidence: true,
                protocol_version: PROTOCOL_VERSION.into(),
            },
            truth,
            noise: NoiseModel::perfect(),
            seed: 0,
            cost: CostModel::default(),
            joint_cost: None,
            clock: Arc::new(SystemClock::new()),
            aliases,
            reply_filter: None,
            outages: Vec::new(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.descriptor.name = name.to_string();
        self
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    /// Separate cost model for joint calls; defaults to the general one.
    pub fn with_joint_cost(mut self, cost: CostModel) -> Self {
        self.joint_cost = Some(cost);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_joint(mut self, supported: bool, max_questions: u32) -> Self {
        self.descriptor.supports_joint = supported;
        self.descriptor.max_joint_questions = max_questions;
        self
    }

    pub fn with_confidence(mut self, supported: bool) -> Self {
        self.descriptor.supports_confidence = supported;
        self
    }

    pub fn with_alias(mut self, question: &str, kind: ContextId) -> Self {
        self.aliases.insert(normalize(question), kind);
        self
    }

    pub fn with_reply_filter(mut self, filter: ReplyFilter) -> Self {
        self.reply_filter = Some(filter);
        self
    }

    /// The backend is unreachable while the clock is inside `[start, end)`.
    pub fn with_outage(mut self, start: Duration, end: Duration) -> Self {
        self.outages.push((start, end));
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn kind_for(&self, question: &str) -> Option<ContextId> {
        Taxonomy::builtin()
            .kind_for_question(question)
            .or_else(|| self.aliases.get(&normalize(question)).copied())
    }

    fn answer(&self, image: Option<&ImageTruth>, image_ref: &str, kind: ContextId) -> Result<Answer, BackendError> {
        let image = image.ok_or_else(|| BackendError::MissingGroundTruth(format!("unknown image {image_ref}")))?;
        mock_answer(image, kind, &self.noise, self.seed)
    }

    fn respond(&self, request: &AskRequest) -> Result<(AskResponse, usize), BackendError> {
        let image_ref = request.image.reference();
        let image = self.truth.get(&image_ref);
        let mut answers = Vec::with_capacity(request.questions.len());
        let mut question_count = 0;
        for q in &request.questions {
            match request.mode {
                QueryMode::Individual => {
                    question_count += 1;
                    let item = match self.kind_for(&q.text) {
                        Some(kind) => {
                            let a = self.answer(image, &image_ref, kind)?;
                            AnswerItem {
                                qid: q.qid.clone(),
                                answer_text: a.raw_text,
                                confidence: self.descriptor.supports_confidence.then_some(a.confidence),
                            }
                        }
                        None => AnswerItem {
                            qid: q.qid.clone(),
                            answer_text: "I cannot tell from this image.".into(),
                            confidence: None,
                        },
                    };
                    answers.push(item);
                }
                QueryMode::Joint => {
                    let parts = split_joint_prompt(&q.text);
                    question_count += parts.len();
                    if self.descriptor.max_joint_questions > 0
                        && parts.len() > self.descriptor.max_joint_questions as usize
                    {
                        return Err(BackendError::InvalidRequest(format!(
                            "{} sub-questions exceed the limit of {}",
                            parts.len(),
                            self.descriptor.max_joint_questions
                        )));
                    }
                    let mut lines = Vec::with_capacity(parts.len());
                    for (number, text) in parts {
                        let line = match self.kind_for(&text) {
                            Some(kind) => {
                                let a = self.answer(image, &image_ref, kind)?;
                                let word = if a.verdict == Verdict::Yes { "yes" } else { "no" };
                                if self.descriptor.supports_confidence {
                                    format!("{number}. {word} ({:.3})", a.confidence)
                                } else {
                                    format!("{number}. {word}")
                                }
                            }
                            None => format!("{number}. unsure"),
                        };
                        lines.push(line);
                    }
                    answers.push(AnswerItem { qid: q.qid.clone(), answer_text: lines.join("\n"), confidence: None });
                }
            }
        }
        Ok((AskResponse { id: request.id.clone(), answers, backend_latency_ms: 0.0 }, question_count))
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn ask(&self, request: &AskRequest, timeout: Duration) -> Result<Reply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let started = self.clock.now();
        if self.outages.iter().any(|&(s, e)| started >= s && started < e) {
            return Err(BackendError::Transport("mock backend unavailable".into()));
        }
        request.validate(DEFAULT_MAX_IMAGE_BYTES)?;
        if request.mode == QueryMode::Joint && !self.descriptor.supports_joint {
            return Err(BackendError::Unsupported("joint queries".into()));
        }
        let (mut response, questions) = self.respond(request)?;
        let cost = match request.mode {
            QueryMode::Joint => self.joint_cost.unwrap_or(self.cost),
            QueryMode::Individual => self.cost,
        };
        let delay = cost.delay(questions);
        if delay > timeout {
            self.clock.sleep(timeout);
            return Err(BackendError::Timeout {
                request_id: request.id.clone(),
                elapsed: self.clock.now().saturating_sub(started),
            });
        }
        response.backend_latency_ms = as_millis(delay);
        if let Some(filter) = &self.reply_filter {
            filter(request, &mut response);
        }
        self.clock.sleep(delay);
        Ok(Reply { response, elapsed: self.clock.now().saturating_sub(started) })
    }
}
