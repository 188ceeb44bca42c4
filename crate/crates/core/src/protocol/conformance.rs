//! Byte-level conformance checks for anything that claims to be a backend.
//!
//! The checks talk raw frames over a fresh TCP connection, so they exercise
//! a server exactly as a foreign-language client would. The same suite runs
//! against the built-in mock server and any external backend.

use std::io::BufReader;
use std::net::TcpStream;
use std::time::{Duration, Instant};

use super::framing::{read_frame, read_message, write_frame, write_message};
use super::{
    AskRequest, Hello, ImagePayload, Message, QueryMode, Question, PROTOCOL_VERSION,
};
use crate::query::{parse_individual_answer, parse_joint_answer, Verdict};
use crate::taxonomy::{ContextId, Taxonomy};

#[derive(Debug, Clone)]
pub struct ConformanceConfig {
    /// Image locator the backend has ground truth for.
    pub probe_image: String,
    /// Expected answers for the probe image, when known.
    pub probe_truth: Vec<(ContextId, bool)>,
    /// Expected service time per individual query.
    pub expected_delay_ms: Option<f64>,
    pub delay_tolerance_ms: f64,
    pub delay_samples: usize,
    pub timeout: Duration,
}

impl ConformanceConfig {
    pub fn new(probe_image: &str) -> Self {
        ConformanceConfig {
            probe_image: probe_image.to_string(),
            probe_truth: Vec::new(),
            expected_delay_ms: None,
            delay_tolerance_ms: 5.0,
            delay_samples: 10,
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Conn {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Conn {
    fn open(addr: &str, timeout: Duration) -> Result<Conn, String> {
        let stream = TcpStream::connect(addr).map_err(|e| format!("connect {addr}: {e}"))?;
        stream.set_nodelay(true).map_err(|e| e.to_string())?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| e.to_string())?;
        let reader = BufReader::new(stream.try_clone().map_err(|e| e.to_string())?);
        Ok(Conn { writer: stream, reader })
    }

    fn send(&mut self, message: &Message) -> Result<(), String> {
        write_message(&mut self.writer, message).map_err(|e| e.to_string())
    }

    fn send_raw(&mut self, body: &[u8]) -> Result<(), String> {
        write_frame(&mut self.writer, body).map_err(|e| e.to_string())
    }

    fn recv(&mut self) -> Result<Message, String> {
        match read_message(&mut self.reader) {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err("connection closed".into()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn hello(&mut self, version: &str) -> Result<Message, String> {
        self.send(&Message::Hello(Hello { protocol_version: version.into(), client: "conformance".into() }))?;
        self.recv()
    }
}

fn ask(id: &str, image: &str, mode: QueryMode, questions: &[(&str, &str)]) -> AskRequest {
    AskRequest {
        id: id.to_string(),
        image: ImagePayload::locator(image),
        mode,
        questions: questions
            .iter()
            .map(|(qid, text)| Question { qid: qid.to_string(), text: text.to_string() })
            .collect(),
    }
}

fn check(name: &'static str, outcome: Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs every check against `addr` (`host:port`).
pub fn run(addr: &str, config: &ConformanceConfig) -> ConformanceReport {
    let addr = addr.strip_prefix("tcp://").unwrap_or(addr);
    let taxonomy = Taxonomy::builtin();
    let mut report = ConformanceReport::default();
    let mut supports_joint = false;

    report.checks.push(check("handshake", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        match conn.hello(PROTOCOL_VERSION)? {
            Message::Welcome(d) => {
                d.validate().map_err(|e| e.to_string())?;
                supports_joint = d.supports_joint;
                Ok(format!("backend {} ({}), joint={}", d.name, d.model_id, d.supports_joint))
            }
            other => Err(format!("expected welcome, got {other:?}")),
        }
    })()));

    report.checks.push(check("version_mismatch", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        match conn.hello("0.9")? {
            Message::Error(e) => Ok(format!("refused with {}", e.code)),
            other => Err(format!("expected error for version 0.9, got {other:?}")),
        }
    })()));

    report.checks.push(check("ask_individual", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        conn.hello(PROTOCOL_VERSION)?;
        let probes: Vec<(ContextId, Option<bool>)> = if config.probe_truth.is_empty() {
            vec![(ContextId::Daytime, None)]
        } else {
            config.probe_truth.iter().map(|&(k, v)| (k, Some(v))).collect()
        };
        for (i, (kind, expected)) in probes.iter().enumerate() {
            let id = format!("ind-{i}");
            let req = ask(&id, &config.probe_image, QueryMode::Individual, &[(&id, taxonomy.question_for(*kind))]);
            conn.send(&Message::Ask(req.clone()))?;
            let resp = match conn.recv()? {
                Message::Answer(r) => r,
                other => return Err(format!("expected answer, got {other:?}")),
            };
            resp.validate_against(&req).map_err(|e| e.to_string())?;
            let item = resp.answer_for(&id).ok_or("question left unanswered")?;
            let verdict = parse_individual_answer(&item.answer_text, item.confidence).verdict;
            match expected {
                Some(v) if verdict != Verdict::from_bool(*v) => {
                    return Err(format!("{kind}: expected {v}, got {:?}", item.answer_text))
                }
                None if verdict == Verdict::Unparseable => {
                    return Err(format!("{kind}: unparseable reply {:?}", item.answer_text))
                }
                _ => {}
            }
        }
        Ok(format!("{} probes answered", probes.len()))
    })()));

    report.checks.push(check("concurrent_ids", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        conn.hello(PROTOCOL_VERSION)?;
        let q = taxonomy.question_for(ContextId::Daytime);
        conn.send(&Message::Ask(ask("c-1", &config.probe_image, QueryMode::Individual, &[("x", q)])))?;
        conn.send(&Message::Ask(ask("c-2", &config.probe_image, QueryMode::Individual, &[("x", q)])))?;
        let mut ids = Vec::new();
        for _ in 0..2 {
            match conn.recv()? {
                Message::Answer(r) => ids.push(r.id),
                other => return Err(format!("expected answer, got {other:?}")),
            }
        }
        ids.sort();
        if ids == ["c-1", "c-2"] {
            Ok("both pipelined requests answered by id".into())
        } else {
            Err(format!("response ids {ids:?}"))
        }
    })()));

    report.checks.push(check("duplicate_qids_rejected", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        conn.hello(PROTOCOL_VERSION)?;
        let q = taxonomy.question_for(ContextId::Daytime);
        conn.send(&Message::Ask(ask("dup", &config.probe_image, QueryMode::Individual, &[("a", q), ("a", q)])))?;
        match conn.recv()? {
            Message::Error(e) if e.id.as_deref() == Some("dup") => Ok(format!("rejected with {}", e.code)),
            other => Err(format!("expected error for request dup, got {other:?}")),
        }
    })()));

    report.checks.push(check("malformed_recovery", (|| {
        let mut conn = Conn::open(addr, config.timeout)?;
        conn.hello(PROTOCOL_VERSION)?;
        conn.send_raw(b"{this is not json")?;
        match conn.recv()? {
            Message::Error(_) => {}
            other => return Err(format!("expected error for malformed frame, got {other:?}")),
        }
        conn.send_raw(br#"{"type":"ask","id":"m1"}"#)?;
        match conn.recv()? {
            Message::Error(_) => {}
            other => return Err(format!("expected error for schema violation, got {other:?}")),
        }
        let q = taxonomy.question_for(ContextId::Daytime);
        conn.send(&Message::Ask(ask("after", &config.probe_image, QueryMode::Individual, &[("a", q)])))?;
        match conn.recv()? {
            Message::Answer(r) if r.id == "after" => Ok("connection survived malformed input".into()),
            other => Err(format!("connection did not recover: {other:?}")),
        }
    })()));

    if supports_joint {
        report.checks.push(check("ask_joint", (|| {
            let mut conn = Conn::open(addr, config.timeout)?;
            conn.hello(PROTOCOL_VERSION)?;
            let kinds = [ContextId::Daytime, ContextId::Rainy, ContextId::Tunnel];
            let image = ImagePayload::locator(&config.probe_image);
            let query = crate::query::build_joint_query(taxonomy, &image, &kinds).map_err(|e| e.to_string())?;
            let req = query.to_request();
            conn.send(&Message::Ask(req.clone()))?;
            let resp = match conn.recv()? {
                Message::Answer(r) => r,
                other => return Err(format!("expected answer, got {other:?}")),
            };
            resp.validate_against(&req).map_err(|e| e.to_string())?;
            let item = resp.answer_for(&query.query_id).ok_or("joint prompt unanswered")?;
            let parsed = parse_joint_answer(&item.answer_text, &kinds, item.confidence);
            let unreadable: Vec<_> =
                parsed.iter().filter(|(_, a)| a.verdict == Verdict::Unparseable).map(|(k, _)| *k).collect();
            if unreadable.is_empty() {
                Ok(format!("{} numbered answers", parsed.len()))
            } else {
                Err(format!("unreadable joint items {unreadable:?} in {:?}", item.answer_text))
            }
        })()));
    }

    if let Some(expected) = config.expected_delay_ms {
        report.checks.push(check("delay_emulation", (|| {
            let mut conn = Conn::open(addr, config.timeout)?;
            conn.hello(PROTOCOL_VERSION)?;
            let q = taxonomy.question_for(ContextId::Daytime);
            let mut total = Duration::ZERO;
            for i in 0..config.delay_samples.max(1) {
                let id = format!("d-{i}");
                let started = Instant::now();
                conn.send(&Message::Ask(ask(&id, &config.probe_image, QueryMode::Individual, &[(&id, q)])))?;
                match conn.recv()? {
                    Message::Answer(_) => total += started.elapsed(),
                    other => return Err(format!("expected answer, got {other:?}")),
                }
            }
            let mean = total.as_secs_f64() * 1000.0 / config.delay_samples.max(1) as f64;
            if (mean - expected).abs() <= config.delay_tolerance_ms {
                Ok(format!("mean per-query latency {mean:.2} ms"))
            } else {
                Err(format!("mean per-query latency {mean:.2} ms, expected {expected} ms"))
            }
        })()));
    }

    // A bogus length prefix must not take the server down for other clients.
    report.checks.push(check("oversized_frame_isolated", (|| {
        let mut bad = Conn::open(addr, config.timeout)?;
        use std::io::Write;
        bad.writer.write_all(&u32::MAX.to_be_bytes()).map_err(|e| e.to_string())?;
        let _ = read_frame(&mut bad.reader);
        let mut conn = Conn::open(addr, config.timeout)?;
        match conn.hello(PROTOCOL_VERSION)? {
            Message::Welcome(_) => Ok("server still accepts connections".into()),
            other => Err(format!("unexpected reply after oversized frame: {other:?}")),
        }
    })()));

    report
}
