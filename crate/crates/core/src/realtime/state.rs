//! The live context state, its published snapshots and the deadline
//! scheduler that decides which kinds to ask about next.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::millis;
use crate::protocol::QueryMode;
use crate::query::{Answer, Verdict};
use crate::taxonomy::{ContextId, RefreshClass, Taxonomy};

pub(crate) fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextValue {
    Present,
    Absent,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub per_query_budget_ms: f64,
    pub cycle_period_ms: f64,
    pub refresh_fast_ms: f64,
    pub refresh_slow_ms: f64,
    pub max_queries_per_cycle: usize,
    pub mode: QueryMode,
    pub enabled_kinds: Vec<ContextId>,
}

impl Default for SchedulerConfig {
    /// Eight 10.5 ms queries per 84 ms cycle: a cold start covers all 24
    /// kinds in three cycles, 252 ms.
    fn default() -> Self {
        SchedulerConfig {
            per_query_budget_ms: 10.5,
            cycle_period_ms: 84.0,
            refresh_fast_ms: 1000.0,
            refresh_slow_ms: 5000.0,
            max_queries_per_cycle: 8,
            mode: QueryMode::Individual,
            enabled_kinds: ContextId::ALL.to_vec(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("per-query budget", self.per_query_budget_ms),
            ("cycle period", self.cycle_period_ms),
            ("fast refresh", self.refresh_fast_ms),
            ("slow refresh", self.refresh_slow_ms),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be a positive number of milliseconds, got {v}"));
            }
        }
        if self.max_queries_per_cycle == 0 {
            return Err("max queries per cycle must be at least 1".into());
        }
        if !budget_law_holds(self.max_queries_per_cycle, self.per_query_budget_ms, self.cycle_period_ms) {
            return Err(format!(
                "{} queries x {} ms exceed the {} ms cycle",
                self.max_queries_per_cycle, self.per_query_budget_ms, self.cycle_period_ms
            ));
        }
        if self.enabled_kinds.is_empty() {
            return Err("no context kinds enabled".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(k) = self.enabled_kinds.iter().find(|k| !seen.insert(**k)) {
            return Err(format!("{k} enabled twice"));
        }
        Ok(())
    }

    pub fn refresh_interval(&self, class: RefreshClass) -> Duration {
        millis(match class {
            RefreshClass::Fast => self.refresh_fast_ms,
            RefreshClass::Slow => self.refresh_slow_ms,
        })
    }

    /// An entry older than this is stale: one refresh interval plus one
    /// cycle to get scheduled.
    pub fn staleness_bound(&self, class: RefreshClass) -> Duration {
        self.refresh_interval(class) + millis(self.cycle_period_ms)
    }

    pub fn budget(&self) -> Duration {
        millis(self.per_query_budget_ms)
    }

    pub fn cycle_period(&self) -> Duration {
        millis(self.cycle_period_ms)
    }
}

/// Queries issued in one cycle, each allowed the full budget, fit the cycle.
pub fn budget_law_holds(queries: usize, budget_ms: f64, cycle_ms: f64) -> bool {
    queries as f64 * budget_ms <= cycle_ms + 1e-9
}

/// Time to refresh `n_kinds` from scratch if each query uses its whole budget.
pub fn worst_case_full_refresh(config: &SchedulerConfig, n_kinds: usize) -> Duration {
    match config.mode {
        QueryMode::Individual => millis(n_kinds as f64 * config.per_query_budget_ms),
        QueryMode::Joint => millis(config.per_query_budget_ms),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryState {
    pub value: ContextValue,
    pub confidence: f64,
    /// Start of the cycle whose frame produced the current value.
    pub updated_at: Option<Duration>,
    pub last_attempt: Option<Duration>,
}

/// Single-writer state owned by the runner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    entries: BTreeMap<ContextId, EntryState>,
}

impl ContextState {
    pub fn new(kinds: &[ContextId]) -> Self {
        let blank = EntryState { value: ContextValue::Unknown, confidence: 0.0, updated_at: None, last_attempt: None };
        ContextState { entries: kinds.iter().map(|&k| (k, blank)).collect() }
    }

    pub fn entry(&self, kind: ContextId) -> Option<&EntryState> {
        self.entries.get(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ContextId> + '_ {
        self.entries.keys().copied()
    }

    pub fn mark_attempt(&mut self, kind: ContextId, at: Duration) {
        if let Some(e) = self.entries.get_mut(&kind) {
            e.last_attempt = Some(at);
        }
    }

    /// Folds an answer observed on the frame taken at `frame_time`. An
    /// unparseable answer keeps the last known value.
    pub fn fold(&mut self, kind: ContextId, answer: &Answer, frame_time: Duration) -> bool {
        let Some(e) = self.entries.get_mut(&kind) else { return false };
        let value = match answer.verdict {
            Verdict::Yes => ContextValue::Present,
            Verdict::No => ContextValue::Absent,
            Verdict::Unparseable => return false,
        };
        e.value = value;
        e.confidence = answer.confidence.clamp(0.0, 1.0);
        e.updated_at = Some(frame_time);
        true
    }

    pub fn is_stale(&self, kind: ContextId, now: Duration, config: &SchedulerConfig) -> bool {
        let Some(e) = self.entries.get(&kind) else { return true };
        match e.updated_at {
            None => true,
            Some(t) => now.saturating_sub(t) > config.staleness_bound(class_of(kind)),
        }
    }

    pub fn snapshot(&self, seq: u64, now: Duration, config: &SchedulerConfig) -> Snapshot {
        Snapshot {
            seq,
            timestamp_ns: nanos(now),
            entries: self
                .entries
                .iter()
                .map(|(&kind, e)| SnapshotEntry {
                    kind,
                    value: e.value,
                    confidence: e.confidence,
                    updated_at_ns: e.updated_at.map(nanos),
                    stale: self.is_stale(kind, now, config),
                })
                .collect(),
        }
    }
}

pub(crate) fn class_of(kind: ContextId) -> RefreshClass {
    Taxonomy::builtin().kind(kind).refresh_class
}

/// Kinds due at `now`, most overdue first, at most
/// `max_queries_per_cycle` of them.
///
/// A kind is due when it has no value yet or its refresh interval has
/// elapsed. Kinds never tried go first; the rest sort by the later of their
/// deadline and their last attempt, so a kind that was just tried (and
/// failed) waits behind the others instead of starving them.
pub fn schedule_due(state: &ContextState, now: Duration, config: &SchedulerConfig) -> Vec<ContextId> {
    let mut due: Vec<(bool, Duration, ContextId)> = Vec::new();
    for kind in &config.enabled_kinds {
        let Some(e) = state.entry(*kind) else { continue };
        let deadline = e.updated_at.map(|t| t + config.refresh_interval(class_of(*kind)));
        if deadline.is_some_and(|d| now < d) {
            continue;
        }
        let key = deadline.unwrap_or_default().max(e.last_attempt.unwrap_or_default());
        due.push((e.last_attempt.is_some(), key, *kind));
    }
    due.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.index().cmp(&b.2.index())));
    let cap = match config.mode {
        QueryMode::Individual => config.max_queries_per_cycle,
        QueryMode::Joint => usize::MAX,
    };
    due.into_iter().take(cap).map(|(_, _, k)| k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub kind: ContextId,
    pub value: ContextValue,
    pub confidence: f64,
    /// Nanoseconds on the runner's clock.
    pub updated_at_ns: Option<u64>,
    pub stale: bool,
}

/// An immutable copy of the state as of `timestamp_ns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    /// Nanoseconds on the runner's clock.
    pub timestamp_ns: u64,
    pub entries: Vec<SnapshotEntry>,
}

impl Snapshot {
    pub fn get(&self, kind: ContextId) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    /// The parts a consumer reacts to. Timestamps alone do not count.
    pub(crate) fn same_view(&self, other: &Snapshot) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.kind == b.kind && a.value == b.value && a.confidence == b.confidence && a.stale == b.stale)
    }

    /// Checks the per-entry invariants against `config`.
    pub fn check(&self, config: &SchedulerConfig) -> Result<(), String> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(format!("{}: confidence {} outside [0, 1]", e.kind, e.confidence));
            }
            if e.value == ContextValue::Unknown && e.confidence != 0.0 {
                return Err(format!("{}: unknown with confidence {}", e.kind, e.confidence));
            }
            let expected_stale = match e.updated_at_ns {
                None => true,
                Some(t) => {
                    if t > self.timestamp_ns {
                        return Err(format!("{}: updated in the future ({t} > {})", e.kind, self.timestamp_ns));
                    }
                    Duration::from_nanos(self.timestamp_ns - t) > config.staleness_bound(class_of(e.kind))
                }
            };
            if e.stale != expected_stale {
                return Err(format!("{}: stale={} but age says {}", e.kind, e.stale, expected_stale));
            }
        }
        Ok(())
    }
}

/// Checks that `snapshots` are totally ordered with monotone timestamps.
pub fn check_order(snapshots: &[Snapshot]) -> Result<(), String> {
    for w in snapshots.windows(2) {
        if w[1].seq <= w[0].seq {
            return Err(format!("sequence went from {} to {}", w[0].seq, w[1].seq));
        }
        if w[1].timestamp_ns < w[0].timestamp_ns {
            return Err(format!("time went back from {} to {}", w[0].timestamp_ns, w[1].timestamp_ns));
        }
    }
    Ok(())
}
