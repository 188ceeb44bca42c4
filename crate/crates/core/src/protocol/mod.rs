//! Wire protocol between the orchestrator and VQA inference backends.
//!
//! # Framing
//!
//! Every message is a frame made of a big-endian `u32` byte length followed
//! by a UTF-8 JSON object. The object carries a `"type"` tag:
//!
//! ```text
//! client -> backend   {"type":"hello","protocol_version":"1.0","client":"..."}
//! backend -> client   {"type":"welcome","name":"...","model_id":"...",...}
//! client -> backend   {"type":"ask","id":"...","image":{...},"mode":"individual","questions":[...]}
//! backend -> client   {"type":"answer","id":"...","answers":[...],"backend_latency_ms":39.0}
//! backend -> client   {"type":"error","id":"..."|null,"code":"...","message":"..."}
//! ```
//!
//! Fields are emitted in declaration order, so encoding is byte-stable.
//! A backend answers `ask` messages in any order; responses are matched to
//! requests by `id`, which lets one connection carry concurrent requests.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod client;
pub mod conformance;
mod endpoint;
pub mod framing;
mod mock;
mod server;

pub use client::{handshake, ClientOptions, RemoteBackend};
pub use endpoint::{connect, Endpoint, MockSpec};
pub use mock::{
    mock_answer, ConfidenceDist, CostModel, GroundTruth, ImageTruth, MockBackend, NoiseModel,
    ReplyFilter,
};
pub use server::{serve_connection, BackendServer};

pub const PROTOCOL_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: &str = "1";

/// Default per-request timeout for `ask`.
pub const DEFAULT_ASK_TIMEOUT: Duration = Duration::from_secs(5);

/// Largest inline image accepted by default (16 MiB of raw bytes).
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request {request_id} timed out after {elapsed:?}")]
    Timeout { request_id: String, elapsed: Duration },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("image payload of {size} bytes exceeds limit of {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("backend reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("backend does not support {0}")]
    Unsupported(String),
}

impl BackendError {
    /// Errors that mean the backend itself is gone, as opposed to one bad
    /// request.
    pub fn is_connection_loss(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Capabilities advertised by a backend during the handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub model_id: String,
    pub supports_joint: bool,
    /// Upper bound on sub-questions in one joint prompt; 0 means unlimited.
    pub max_joint_questions: u32,
    pub supports_confidence: bool,
    pub protocol_version: String,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.name.trim().is_empty() {
            return Err(BackendError::Protocol("backend descriptor has an empty name".into()));
        }
        check_version(&self.protocol_version)
    }

    /// Whether a joint prompt with `n` sub-questions may be sent.
    pub fn accepts_joint(&self, n: usize) -> bool {
        self.supports_joint && (self.max_joint_questions == 0 || n <= self.max_joint_questions as usize)
    }
}

pub fn check_version(version: &str) -> Result<(), BackendError> {
    match version.split('.').next() {
        Some(major) if major == SUPPORTED_MAJOR => Ok(()),
        _ => Err(BackendError::Protocol(format!(
            "unsupported protocol version {version:?}, expected {SUPPORTED_MAJOR}.x"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Individual,
    Joint,
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "individual" => Ok(QueryMode::Individual),
            "joint" => Ok(QueryMode::Joint),
            other => Err(format!("unknown query mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    /// Base64 (standard alphabet) encoded image bytes.
    Inline { data: String },
    Locator { uri: String },
}

impl ImagePayload {
    pub fn inline(bytes: &[u8]) -> Self {
        use base64::Engine;
        ImagePayload::Inline { data: base64::engine::general_purpose::STANDARD.encode(bytes) }
    }

    pub fn locator(uri: impl Into<String>) -> Self {
        ImagePayload::Locator { uri: uri.into() }
    }

    /// Decoded size of an inline payload, 0 for locators.
    pub fn inline_size(&self) -> usize {
        match self {
            ImagePayload::Inline { data } => data.len() / 4 * 3,
            ImagePayload::Locator { .. } => 0,
        }
    }

    pub fn decode_inline(&self) -> Option<Vec<u8>> {
        use base64::Engine;
        match self {
            ImagePayload::Inline { data } => base64::engine::general_purpose::STANDARD.decode(data).ok(),
            ImagePayload::Locator { .. } => None,
        }
    }

    /// The key a mock backend uses to find ground truth for this image.
    pub fn reference(&self) -> String {
        match self {
            ImagePayload::Locator { uri } => uri.clone(),
            ImagePayload::Inline { data } => format!("inline:{}", fnv1a(data.as_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub qid: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskRequest {
    pub id: String,
    pub image: ImagePayload,
    pub mode: QueryMode,
    pub questions: Vec<Question>,
}

impl AskRequest {
    pub fn validate(&self, max_image_bytes: usize) -> Result<(), BackendError> {
        if self.id.is_empty() {
            return Err(BackendError::InvalidRequest("empty request id".into()));
        }
        if self.questions.is_empty() {
            return Err(BackendError::InvalidRequest(format!("request {} has no questions", self.id)));
        }
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !seen.insert(q.qid.as_str()) {
                return Err(BackendError::InvalidRequest(format!(
                    "duplicate qid {:?} in request {}",
                    q.qid, self.id
                )));
            }
            if q.text.trim().is_empty() {
                return Err(BackendError::InvalidRequest(format!("question {:?} is empty", q.qid)));
            }
        }
        let size = self.image.inline_size();
        if size > max_image_bytes {
            return Err(BackendError::PayloadTooLarge { size, limit: max_image_bytes });
        }
        if let ImagePayload::Locator { uri } = &self.image {
            if uri.is_empty() {
                return Err(BackendError::InvalidRequest("empty image locator".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerItem {
    pub qid: String,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub id: String,
    pub answers: Vec<AnswerItem>,
    pub backend_latency_ms: f64,
}

impl AskResponse {
    /// Checks the response against the request it answers. Missing qids are
    /// allowed; unknown or repeated ones are not.
    pub fn validate_against(&self, request: &AskRequest) -> Result<(), BackendError> {
        if self.id != request.id {
            return Err(BackendError::MalformedResponse(format!(
                "response id {:?} does not match request id {:?}",
                self.id, request.id
            )));
        }
        let asked: HashSet<&str> = request.questions.iter().map(|q| q.qid.as_str()).collect();
        let mut seen = HashSet::new();
        for item in &self.answers {
            if !asked.contains(item.qid.as_str()) {
                return Err(BackendError::MalformedResponse(format!("unexpected qid {:?}", item.qid)));
            }
            if !seen.insert(item.qid.as_str()) {
                return Err(BackendError::MalformedResponse(format!("qid {:?} answered twice", item.qid)));
            }
            if let Some(c) = item.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(BackendError::MalformedResponse(format!(
                        "confidence {c} for qid {:?} is outside [0, 1]",
                        item.qid
                    )));
                }
            }
        }
        if self.backend_latency_ms.is_nan() || self.backend_latency_ms < 0.0 {
            return Err(BackendError::MalformedResponse("negative backend latency".into()));
        }
        Ok(())
    }

    pub fn answer_for(&self, qid: &str) -> Option<&AnswerItem> {
        self.answers.iter().find(|a| a.qid == qid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: String,
    pub client: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub id: Option<String>,
    pub code: String,
    pub message: String,
}

/// Every message that can travel over a backend connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Welcome(BackendDescriptor),
    Ask(AskRequest),
    Answer(AskResponse),
    Error(ErrorMessage),
}

impl Message {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("protocol messages always serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Message, BackendError> {
        serde_json::from_slice(bytes).map_err(|e| BackendError::Protocol(format!("undecodable message: {e}")))
    }
}

/// A response together with the round-trip time the caller observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub response: AskResponse,
    pub elapsed: Duration,
}

/// Anything that can answer context questions about an image.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Sends one request and waits at most `timeout` for its response.
    fn ask(&self, request: &AskRequest, timeout: Duration) -> Result<Reply, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn ask(&self, request: &AskRequest, timeout: Duration) -> Result<Reply, BackendError> {
        (**self).ask(request, timeout)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn ask(&self, request: &AskRequest, timeout: Duration) -> Result<Reply, BackendError> {
        (**self).ask(request, timeout)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
