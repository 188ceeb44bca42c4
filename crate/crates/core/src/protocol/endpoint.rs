//! Backend endpoint strings.
//!
//! * `tcp://host:port` or bare `host:port`: a remote backend speaking the
//!   wire protocol.
//! * `mock:<truth.jsonl>[?key=value&...]`: the in-process mock answering
//!   from a ground-truth sidecar. Keys: `name`, `seed`, `flip`, `delay_ms`,
//!   `per_question_ms`, `joint_delay_ms`, `joint_per_question_ms`, `joint`
//!   (bool), `max_joint`, `confidence` (bool), `conf` (fixed confidence of
//!   correct answers).

use std::path::PathBuf;
use std::sync::Arc;

use super::{
    Backend, BackendError, ClientOptions, ConfidenceDist, CostModel, GroundTruth, MockBackend,
    NoiseModel, RemoteBackend,
};
use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq)]
pub struct MockSpec {
    pub truth: PathBuf,
    pub name: String,
    pub seed: u64,
    pub flip_prob: f64,
    pub correct_confidence: f64,
    pub cost: CostModel,
    pub joint_cost: Option<CostModel>,
    pub supports_joint: bool,
    pub max_joint: u32,
    pub supports_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Tcp(String),
    Mock(MockSpec),
}

fn bad(endpoint: &str, why: impl std::fmt::Display) -> BackendError {
    BackendError::InvalidRequest(format!("bad endpoint {endpoint:?}: {why}"))
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Endpoint, BackendError> {
        if let Some(rest) = s.strip_prefix("mock:") {
            let (path, query) = rest.split_once('?').unwrap_or((rest, ""));
            if path.is_empty() {
                return Err(bad(s, "mock endpoint needs a ground-truth file"));
            }
            let mut spec = MockSpec {
                truth: PathBuf::from(path),
                name: "mock".into(),
                seed: 0,
                flip_prob: 0.0,
                correct_confidence: 0.999,
                cost: CostModel::default(),
                joint_cost: None,
                supports_joint: true,
                max_joint: 0,
                supports_confidence: true,
            };
            let mut joint_cost: Option<CostModel> = None;
            for pair in query.split('&').filter(|p| !p.is_empty()) {
                let (key, value) = pair.split_once('=').ok_or_else(|| bad(s, format!("`{pair}` is not key=value")))?;
                let num = |v: &str| v.parse::<f64>().map_err(|e| bad(s, format!("{key}: {e}")));
                let flag = |v: &str| match v {
                    "true" | "1" | "yes" => Ok(true),
                    "false" | "0" | "no" => Ok(false),
                    _ => Err(bad(s, format!("{key}: expected a boolean"))),
                };
                match key {
                    "name" => spec.name = value.to_string(),
                    "seed" => spec.seed = value.parse().map_err(|e| bad(s, format!("seed: {e}")))?,
                    "flip" => spec.flip_prob = num(value)?,
                    "conf" => spec.correct_confidence = num(value)?,
                    "delay_ms" => spec.cost.per_call_ms = num(value)?,
                    "per_question_ms" => spec.cost.per_question_ms = num(value)?,
                    "joint_delay_ms" => joint_cost.get_or_insert(CostModel::default()).per_call_ms = num(value)?,
                    "joint_per_question_ms" => {
                        joint_cost.get_or_insert(CostModel::default()).per_question_ms = num(value)?
                    }
                    "joint" => spec.supports_joint = flag(value)?,
                    "max_joint" => spec.max_joint = value.parse().map_err(|e| bad(s, format!("max_joint: {e}")))?,
                    "confidence" => spec.supports_confidence = flag(value)?,
                    other => return Err(bad(s, format!("unknown key `{other}`"))),
                }
            }
            if !(0.0..=1.0).contains(&spec.flip_prob) {
                return Err(bad(s, "flip must be in [0, 1]"));
            }
            spec.joint_cost = joint_cost;
            return Ok(Endpoint::Mock(spec));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.rsplit_once(':').is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err()) {
            return Err(bad(s, "expected host:port"));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

/// Opens a backend for `endpoint`. Mock backends run on `clock`.
pub fn connect(endpoint: &Endpoint, clock: Arc<dyn Clock>) -> Result<Box<dyn Backend>, BackendError> {
    match endpoint {
        Endpoint::Tcp(addr) => Ok(Box::new(RemoteBackend::connect(addr, ClientOptions::default())?)),
        Endpoint::Mock(spec) => {
            let truth = GroundTruth::load(&spec.truth)?;
            let mut noise = NoiseModel::uniform(spec.flip_prob);
            noise.correct = ConfidenceDist::Fixed { value: spec.correct_confidence };
            let mut backend = MockBackend::new(truth)
                .with_name(&spec.name)
                .with_seed(spec.seed)
                .with_noise(noise)
                .with_cost(spec.cost)
                .with_joint(spec.supports_joint, spec.max_joint)
                .with_confidence(spec.supports_confidence)
                .with_clock(clock);
            if let Some(joint) = spec.joint_cost {
                backend = backend.with_joint_cost(joint);
            }
            Ok(Box::new(backend))
        }
    }
}
