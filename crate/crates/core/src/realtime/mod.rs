//! The realtime loop: take the newest frame, ask about the kinds that are
//! due, fold the answers into the live state and publish snapshots.
//!
//! One loop owns [`ContextState`]. Readers get immutable snapshots through
//! a [`SnapshotHandle`]; ad-hoc questions arrive over a channel and are
//! answered only in the slack left after the scheduled queries.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::clock::{as_millis, Clock};
use crate::protocol::{Backend, BackendError, ImagePayload, QueryMode};
use crate::query::{ask_freeform, recognize_lenient, Answer, QueryError, RecognizeOptions, Verdict};
use crate::taxonomy::{ContextId, Taxonomy};

mod frames;
mod sink;
mod state;

pub use frames::{
    read_trace, write_trace, DirFrameSource, Frame, FrameMessage, FramePoll, FrameSource, SimFrameSource, SimTrace,
    SocketFrameSource, TraceFrame,
};
pub use sink::{open_sink, sink_records, MemorySink, NdjsonSink, Sink, SinkRecord};
pub use state::{
    budget_law_holds, check_order, schedule_due, worst_case_full_refresh, ContextState, ContextValue, EntryState,
    SchedulerConfig, Snapshot, SnapshotEntry,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error("sink failed: {0}")]
    Sink(#[from] io::Error),
    #[error("cycle issued {issued} queries of {budget_ms} ms into a {cycle_ms} ms cycle")]
    BudgetLaw { issued: usize, budget_ms: f64, cycle_ms: f64 },
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Stop after this many cycles; `None` runs until stopped or the source ends.
    pub max_cycles: Option<u64>,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { max_cycles: None, backoff_initial: Duration::from_millis(100), backoff_max: Duration::from_secs(5) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub cycles: u64,
    pub queries_issued: u64,
    /// Queries that ran past their budget.
    pub cancelled: u64,
    pub unparseable: u64,
    pub backend_errors: u64,
    pub adhoc_answered: u64,
    pub publishes: u64,
    pub frames_dropped: u64,
    /// Longest time a cycle spent on scheduled and ad-hoc queries.
    pub max_cycle_busy_ms: f64,
    pub final_snapshot: Snapshot,
}

/// Lock-protected pointer swap: readers clone an `Arc` and never wait on a
/// query, only on the pointer store.
#[derive(Debug, Clone)]
pub struct SnapshotHandle(Arc<RwLock<Arc<Snapshot>>>);

impl SnapshotHandle {
    pub fn latest(&self) -> Arc<Snapshot> {
        self.0.read().unwrap().clone()
    }

    fn store(&self, snapshot: Snapshot) {
        *self.0.write().unwrap() = Arc::new(snapshot);
    }
}

pub type AdhocReply = Result<Answer, BackendError>;

struct AdhocRequest {
    question: String,
    reply: Sender<AdhocReply>,
}

/// Submits one-off questions about the current frame.
#[derive(Clone)]
pub struct AdhocHandle(Sender<AdhocRequest>);

impl AdhocHandle {
    /// The answer arrives on the returned channel once the loop has slack.
    /// The channel closes unanswered if the loop stops first.
    pub fn ask(&self, question: &str) -> Receiver<AdhocReply> {
        let (tx, rx) = mpsc::channel();
        let _ = self.0.send(AdhocRequest { question: question.to_string(), reply: tx });
        rx
    }
}

/// Serves ad-hoc questions over TCP: one question per line in, one JSON
/// answer per line out. Returns the bound address.
pub fn serve_adhoc(listener: TcpListener, handle: AdhocHandle) -> io::Result<std::net::SocketAddr> {
    let addr = listener.local_addr()?;
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let handle = handle.clone();
            thread::spawn(move || {
                let Ok(mut writer) = stream.try_clone() else { return };
                for line in BufReader::new(stream).lines() {
                    let Ok(line) = line else { break };
                    let question = line.trim();
                    if question.is_empty() {
                        continue;
                    }
                    let body = match handle.ask(question).recv() {
                        Ok(Ok(answer)) => serde_json::json!({"question": question, "answer": answer}),
                        Ok(Err(e)) => serde_json::json!({"question": question, "error": e.to_string()}),
                        Err(_) => serde_json::json!({"question": question, "error": "runner stopped"}),
                    };
                    if writeln!(writer, "{body}").is_err() {
                        break;
                    }
                }
            });
        }
    });
    Ok(addr)
}

pub struct Runner {
    taxonomy: &'static Taxonomy,
    config: SchedulerConfig,
    backend: Arc<dyn Backend>,
    clock: Arc<dyn Clock>,
    options: RunOptions,
    stop: Arc<AtomicBool>,
    latest: SnapshotHandle,
    adhoc_tx: Sender<AdhocRequest>,
    adhoc_rx: Receiver<AdhocRequest>,
}

struct Backoff {
    until: Duration,
    delay: Duration,
}

impl Runner {
    pub fn new(config: SchedulerConfig, backend: Arc<dyn Backend>, clock: Arc<dyn Clock>) -> Result<Runner, RunError> {
        config.validate().map_err(RunError::Config)?;
        let initial = ContextState::new(&config.enabled_kinds).snapshot(0, clock.now(), &config);
        let (adhoc_tx, adhoc_rx) = mpsc::channel();
        Ok(Runner {
            taxonomy: Taxonomy::builtin(),
            config,
            backend,
            clock,
            options: RunOptions::default(),
            stop: Arc::new(AtomicBool::new(false)),
            latest: SnapshotHandle(Arc::new(RwLock::new(Arc::new(initial)))),
            adhoc_tx,
            adhoc_rx,
        })
    }

    pub fn with_taxonomy(mut self, taxonomy: &'static Taxonomy) -> Self {
        self.taxonomy = taxonomy;
        self
    }

    pub fn with_options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn snapshots(&self) -> SnapshotHandle {
        self.latest.clone()
    }

    pub fn adhoc(&self) -> AdhocHandle {
        AdhocHandle(self.adhoc_tx.clone())
    }

    /// Setting the flag stops the loop at the next cycle boundary.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn run(&self, source: &mut dyn FrameSource, sink: &mut dyn Sink) -> Result<RunSummary, RunError> {
        let config = &self.config;
        let cycle = config.cycle_period();
        let budget = config.budget();
        let mut state = ContextState::new(&config.enabled_kinds);
        let mut summary = RunSummary {
            cycles: 0,
            queries_issued: 0,
            cancelled: 0,
            unparseable: 0,
            backend_errors: 0,
            adhoc_answered: 0,
            publishes: 0,
            frames_dropped: 0,
            max_cycle_busy_ms: 0.0,
            final_snapshot: self.latest.latest().as_ref().clone(),
        };
        let mut last_published: Option<Snapshot> = None;
        let mut seq = 0u64;
        let mut backoff: Option<Backoff> = None;
        let mut pending_adhoc: VecDeque<AdhocRequest> = VecDeque::new();
        let mut publish = |state: &ContextState, force: bool, summary: &mut RunSummary| -> Result<(), RunError> {
            let now = self.clock.now();
            let candidate = state.snapshot(seq + 1, now, config);
            let changed = last_published.as_ref().is_none_or(|last| !last.same_view(&candidate));
            if changed || force {
                seq += 1;
                sink.publish(&candidate)?;
                summary.publishes += 1;
                self.latest.store(candidate.clone());
                last_published = Some(candidate.clone());
            }
            summary.final_snapshot = candidate;
            Ok(())
        };

        loop {
            let start = self.clock.now();
            let limit_hit = self.options.max_cycles.is_some_and(|m| summary.cycles >= m);
            if limit_hit || self.stop.load(Ordering::SeqCst) {
                publish(&state, true, &mut summary)?;
                break;
            }
            summary.cycles += 1;
            let frame = match source.poll_latest(start) {
                FramePoll::Ended => {
                    publish(&state, true, &mut summary)?;
                    break;
                }
                FramePoll::Pending => None,
                FramePoll::Frame(frame) => Some(frame),
            };

            let mut issued = 0usize;
            let backing_off = backoff.as_ref().is_some_and(|b| start < b.until);
            if let (Some(frame), false) = (&frame, backing_off) {
                let due = schedule_due(&state, start, config);
                if !due.is_empty() {
                    let outcome = self.query_due(&mut state, &frame.image, &due, start, &mut summary)?;
                    issued = outcome.issued;
                    match outcome.lost {
                        Some(_) => {
                            let delay = backoff.as_ref().map_or(self.options.backoff_initial, |b| {
                                (b.delay * 2).min(self.options.backoff_max)
                            });
                            backoff = Some(Backoff { until: self.clock.now() + delay, delay });
                        }
                        None if outcome.answered => backoff = None,
                        None => {}
                    }
                }
            }
            if !budget_law_holds(issued, config.per_query_budget_ms, config.cycle_period_ms) {
                return Err(RunError::BudgetLaw {
                    issued,
                    budget_ms: config.per_query_budget_ms,
                    cycle_ms: config.cycle_period_ms,
                });
            }

            pending_adhoc.extend(self.adhoc_rx.try_iter());
            if let Some(frame) = &frame {
                while !pending_adhoc.is_empty()
                    && budget_law_holds(issued + 1, config.per_query_budget_ms, config.cycle_period_ms)
                    && !backing_off
                {
                    let request = pending_adhoc.pop_front().expect("checked non-empty");
                    let reply = ask_freeform(self.backend.as_ref(), &frame.image, &request.question, budget);
                    issued += 1;
                    summary.adhoc_answered += 1;
                    let _ = request.reply.send(reply);
                }
            }

            let busy = self.clock.now().saturating_sub(start);
            summary.max_cycle_busy_ms = summary.max_cycle_busy_ms.max(as_millis(busy));
            publish(&state, false, &mut summary)?;
            let next = start + cycle;
            let now = self.clock.now();
            if next > now {
                self.clock.sleep(next - now);
            }
        }
        summary.frames_dropped = source.dropped();
        Ok(summary)
    }

    fn query_due(
        &self,
        state: &mut ContextState,
        image: &ImagePayload,
        due: &[ContextId],
        frame_time: Duration,
        summary: &mut RunSummary,
    ) -> Result<CycleOutcome, RunError> {
        let mut outcome = CycleOutcome::default();
        let batches: Vec<&[ContextId]> = match self.config.mode {
            QueryMode::Individual => due.chunks(1).collect(),
            QueryMode::Joint => vec![due],
        };
        let options = RecognizeOptions {
            mode: self.config.mode,
            fallback: false,
            timeout: self.config.budget(),
            in_flight: 1,
        };
        for kinds in batches {
            for &k in kinds {
                state.mark_attempt(k, frame_time);
            }
            let recognition = recognize_lenient(self.taxonomy, image, kinds, self.backend.as_ref(), &options)?;
            outcome.issued += recognition.calls;
            summary.queries_issued += recognition.calls as u64;
            let failed = recognition.failed_kinds();
            for failure in &recognition.failures {
                match &failure.error {
                    BackendError::Timeout { .. } => summary.cancelled += 1,
                    e => {
                        summary.backend_errors += 1;
                        if e.is_connection_loss() {
                            outcome.lost = Some(e.clone());
                        }
                    }
                }
            }
            for (kind, answer) in &recognition.answers {
                if failed.contains(kind) {
                    continue;
                }
                outcome.answered = true;
                if answer.verdict == Verdict::Unparseable {
                    summary.unparseable += 1;
                }
                state.fold(*kind, answer, frame_time);
            }
            if outcome.lost.is_some() {
                break;
            }
        }
        Ok(outcome)
    }
}

#[derive(Default)]
struct CycleOutcome {
    issued: usize,
    answered: bool,
    lost: Option<BackendError>,
}
