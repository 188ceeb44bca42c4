//! Scoring predictions against labels, confidence profiles and latency
//! benchmarks.
//!
//! The positive class is "yes". A zero-denominator metric is `None` rather
//! than 0 or 1, and macro means skip it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::annotation::{Label, SourceSubset};
use crate::clock::{as_millis, Clock};
use crate::dataset::DatasetManifest;
use crate::protocol::{Backend, ImagePayload, QueryMode};
use crate::query::{
    build_individual_queries, build_joint_query, recognize, QueryError, RecognizeError, RecognizeOptions,
    Recognition, Verdict,
};
use crate::taxonomy::{ContextId, Taxonomy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to score")]
    EmptyCounts,
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("nothing to benchmark: no images or no kinds")]
    NothingToBenchmark,
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Scores one prediction. An unparseable prediction is wrong: a missed
    /// positive or a false alarm depending on the label.
    pub fn record(&mut self, label: bool, prediction: Verdict) {
        match (label, prediction) {
            (true, Verdict::Yes) => self.tp += 1,
            (false, Verdict::No) => self.tn += 1,
            (false, Verdict::Yes | Verdict::Unparseable) => self.fp += 1,
            (true, Verdict::No | Verdict::Unparseable) => self.fn_ += 1,
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall; undefined when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => f1_score(p, r),
        _ => None,
    };
    Ok(Metrics { accuracy: (c.tp + c.tn) as f64 / total as f64, precision, recall, f1 })
}

/// Counts for one cell of the report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub counts: ConfusionCounts,
    pub unparseable: u64,
    pub yes_verdicts: u64,
    pub yes_confidence_sum: f64,
    pub no_verdicts: u64,
    pub no_confidence_sum: f64,
}

impl Tally {
    fn record(&mut self, label: bool, verdict: Verdict, confidence: f64) {
        self.counts.record(label, verdict);
        match verdict {
            Verdict::Yes => {
                self.yes_verdicts += 1;
                self.yes_confidence_sum += confidence;
            }
            Verdict::No => {
                self.no_verdicts += 1;
                self.no_confidence_sum += confidence;
            }
            Verdict::Unparseable => self.unparseable += 1,
        }
    }

    fn add(&mut self, other: &Tally) {
        self.counts.add(&other.counts);
        self.unparseable += other.unparseable;
        self.yes_verdicts += other.yes_verdicts;
        self.yes_confidence_sum += other.yes_confidence_sum;
        self.no_verdicts += other.no_verdicts;
        self.no_confidence_sum += other.no_confidence_sum;
    }

    pub fn metrics(&self) -> Option<Metrics> {
        metrics(&self.counts).ok()
    }

    pub fn mean_yes_confidence(&self) -> Option<f64> {
        ratio_f(self.yes_confidence_sum, self.yes_verdicts)
    }

    pub fn mean_no_confidence(&self) -> Option<f64> {
        ratio_f(self.no_confidence_sum, self.no_verdicts)
    }
}

fn ratio_f(sum: f64, n: u64) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Micro,
    Macro,
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            _ => Err(format!("unknown averaging `{s}` (expected micro or macro)")),
        }
    }
}

/// Pairs that could not be scored because the backend failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub image_id: String,
    pub query_ids: Vec<String>,
    pub kinds: Vec<ContextId>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub backend: String,
    pub mode: QueryMode,
    pub per_kind: BTreeMap<ContextId, Tally>,
    pub per_subset: BTreeMap<SourceSubset, Tally>,
    pub cells: BTreeMap<(ContextId, SourceSubset), Tally>,
    pub failures: Vec<EvalFailure>,
}

impl EvalReport {
    fn new(dataset: &str, backend: &str, mode: QueryMode) -> Self {
        EvalReport {
            dataset: dataset.to_string(),
            backend: backend.to_string(),
            mode,
            per_kind: BTreeMap::new(),
            per_subset: BTreeMap::new(),
            cells: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    fn record(&mut self, kind: ContextId, subset: SourceSubset, label: bool, verdict: Verdict, confidence: f64) {
        self.per_kind.entry(kind).or_default().record(label, verdict, confidence);
        self.per_subset.entry(subset).or_default().record(label, verdict, confidence);
        self.cells.entry((kind, subset)).or_default().record(label, verdict, confidence);
    }

    /// Pooled over every scored pair.
    pub fn micro(&self) -> Tally {
        let mut all = Tally::default();
        for t in self.per_kind.values() {
            all.add(t);
        }
        all
    }

    pub fn micro_metrics(&self) -> Option<Metrics> {
        self.micro().metrics()
    }

    /// Unweighted mean over kinds; each metric averages only the kinds
    /// where it is defined.
    pub fn macro_metrics(&self) -> Option<Metrics> {
        let per: Vec<Metrics> = self.per_kind.values().filter_map(Tally::metrics).collect();
        if per.is_empty() {
            return None;
        }
        let mean = |values: Vec<f64>| (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Some(Metrics {
            accuracy: per.iter().map(|m| m.accuracy).sum::<f64>() / per.len() as f64,
            precision: mean(per.iter().filter_map(|m| m.precision).collect()),
            recall: mean(per.iter().filter_map(|m| m.recall).collect()),
            f1: mean(per.iter().filter_map(|m| m.f1).collect()),
        })
    }

    pub fn headline(&self, averaging: Averaging) -> Option<Metrics> {
        match averaging {
            Averaging::Micro => self.micro_metrics(),
            Averaging::Macro => self.macro_metrics(),
        }
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn to_json(&self, headline: Averaging) -> Value {
        let tally = |t: &Tally| {
            json!({
                "counts": t.counts,
                "total": t.counts.total(),
                "unparseable": t.unparseable,
                "metrics": t.metrics(),
                "mean_yes_confidence": t.mean_yes_confidence(),
                "mean_no_confidence": t.mean_no_confidence(),
            })
        };
        let per_kind: serde_json::Map<String, Value> =
            self.per_kind.iter().map(|(k, t)| (k.as_str().to_string(), tally(t))).collect();
        let per_subset: serde_json::Map<String, Value> =
            self.per_subset.iter().map(|(s, t)| (s.as_str().to_string(), tally(t))).collect();
        json!({
            "dataset": self.dataset,
            "backend": self.backend,
            "mode": self.mode,
            "headline": headline,
            "headline_metrics": self.headline(headline),
            "micro": tally(&self.micro()),
            "macro": self.macro_metrics(),
            "per_kind": per_kind,
            "per_subset": per_subset,
            "partial": self.is_partial(),
            "failures": self.failures,
        })
    }

    /// One row per kind x subset, plus `all` rows for the margins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,subset,tp,fp,tn,fn,unparseable,accuracy,precision,recall,f1,mean_yes_confidence,mean_no_confidence\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = |kind: &str, subset: &str, t: &Tally| {
            let m = t.metrics();
            let c = t.counts;
            out.push_str(&format!(
                "{kind},{subset},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                t.unparseable,
                fmt(m.map(|m| m.accuracy)),
                fmt(m.and_then(|m| m.precision)),
                fmt(m.and_then(|m| m.recall)),
                fmt(m.and_then(|m| m.f1)),
                fmt(t.mean_yes_confidence()),
                fmt(t.mean_no_confidence()),
            ));
        };
        for ((kind, subset), t) in &self.cells {
            row(kind.as_str(), subset.as_str(), t);
        }
        for (kind, t) in &self.per_kind {
            row(kind.as_str(), "all", t);
        }
        for (subset, t) in &self.per_subset {
            row("all", subset.as_str(), t);
        }
        row("all", "all", &self.micro());
        out
    }
}

/// Mean confidence of yes verdicts per kind; `None` where a kind never got one.
pub fn confidence_profile(report: &EvalReport) -> BTreeMap<ContextId, Option<f64>> {
    report.per_kind.iter().map(|(k, t)| (*k, t.mean_yes_confidence())).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub recognize: RecognizeOptions,
    /// Images evaluated concurrently.
    pub in_flight_images: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { recognize: RecognizeOptions::individual(), in_flight_images: 4 }
    }
}

type ImageOutcome = (Recognition, Option<EvalFailure>);

fn evaluate_image(
    taxonomy: &Taxonomy,
    image_id: &str,
    image_ref: &str,
    kinds: &[ContextId],
    backend: &dyn Backend,
    options: &RecognizeOptions,
) -> Result<ImageOutcome, QueryError> {
    let image = ImagePayload::locator(image_ref);
    match recognize(taxonomy, &image, kinds, backend, options) {
        Ok(r) => Ok((r, None)),
        Err(RecognizeError::Query(e)) => Err(e),
        Err(RecognizeError::Backend { failed_query_ids, partial }) => {
            let failure = EvalFailure {
                image_id: image_id.to_string(),
                query_ids: failed_query_ids,
                kinds: partial.failed_kinds().into_iter().collect(),
                error: partial.failures.first().map(|f| f.error.to_string()).unwrap_or_default(),
            };
            Ok((*partial, Some(failure)))
        }
    }
}

/// Asks `backend` about every labeled pair in `manifest` and scores the
/// answers. Pairs whose query failed are left out of the counts and listed
/// in `failures`.
pub fn evaluate(
    taxonomy: &Taxonomy,
    manifest: &DatasetManifest,
    backend: &dyn Backend,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut labels: BTreeMap<&str, BTreeMap<ContextId, Label>> = BTreeMap::new();
    for r in &manifest.records {
        labels.entry(r.image_id.as_str()).or_default().insert(r.kind, r.answer);
    }
    let work: Vec<(&crate::dataset::ImageMeta, Vec<ContextId>)> = manifest
        .images
        .iter()
        .filter_map(|i| labels.get(i.image_id.as_str()).map(|l| (i, l.keys().copied().collect())))
        .collect();

    let results: Vec<Mutex<Option<Result<ImageOutcome, QueryError>>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = options.in_flight_images.clamp(1, work.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((image, kinds)) = work.get(i) else { break };
                let outcome = evaluate_image(taxonomy, &image.image_id, &image.image_ref, kinds, backend, &options.recognize);
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut report = EvalReport::new(&manifest.name, &backend.descriptor().name, options.recognize.mode);
    for ((image, _), slot) in work.iter().zip(results) {
        let (recognition, failure) = slot.into_inner().unwrap().expect("every image evaluated")?;
        let failed = recognition.failed_kinds();
        for (kind, label) in &labels[image.image_id.as_str()] {
            if failed.contains(kind) {
                continue;
            }
            let answer = &recognition.answers[kind];
            report.record(*kind, image.source_subset, label.as_bool(), answer.verdict, answer.confidence);
        }
        report.failures.extend(failure);
    }
    Ok(report)
}

/// Plain-text table of headline metrics, one row per labeled report (for
/// example one per shot count).
pub fn curve_table(rows: &[(String, &EvalReport)], averaging: Averaging) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = format!("{:<12} {:>9} {:>9} {:>9} {:>9}\n", "run", "accuracy", "precision", "recall", "f1");
    for (label, report) in rows {
        let m = report.headline(averaging);
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
            label,
            fmt(m.map(|m| m.accuracy)),
            fmt(m.and_then(|m| m.precision)),
            fmt(m.and_then(|m| m.recall)),
            fmt(m.and_then(|m| m.f1)),
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank summary; `None` for no samples.
pub fn summarize(samples: &[f64]) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
    Some(Summary { mean: sorted.iter().sum::<f64>() / sorted.len() as f64, p50: rank(0.50), p95: rank(0.95) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: QueryMode,
    pub kinds: usize,
    pub images: usize,
    pub repetitions: usize,
    pub calls: usize,
    /// Time per context answered. For joint calls, the call time divided by
    /// the number of questions in it.
    pub per_query_ms: Option<Summary>,
    pub per_call_ms: Option<Summary>,
    /// Mean time to answer every kind for one image.
    pub per_image_total_ms: Option<f64>,
    /// Sum over the whole benchmark.
    pub total_ms: f64,
    pub failures: Vec<String>,
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub mode: QueryMode,
    pub repetitions: usize,
    pub timeout: Duration,
}

impl BenchOptions {
    pub fn new(mode: QueryMode, repetitions: usize) -> Self {
        BenchOptions { mode, repetitions, timeout: Duration::from_secs(120) }
    }
}

/// Times `ask` calls one at a time on `clock`. Individual mode issues one
/// call per kind, joint mode one call per image.
pub fn benchmark_latency(
    taxonomy: &Taxonomy,
    backend: &dyn Backend,
    clock: &dyn Clock,
    images: &[ImagePayload],
    kinds: &[ContextId],
    options: &BenchOptions,
) -> Result<LatencyReport, EvalError> {
    let BenchOptions { mode, repetitions, timeout } = *options;
    if repetitions == 0 {
        return Err(EvalError::NoRepetitions);
    }
    if images.is_empty() || kinds.is_empty() {
        return Err(EvalError::NothingToBenchmark);
    }
    let mut per_query = Vec::new();
    let mut per_call = Vec::new();
    let mut per_image = Vec::new();
    let mut failures = Vec::new();
    let mut total_ms = 0.0;
    for _ in 0..repetitions {
        for image in images {
            let queries = match mode {
                QueryMode::Individual => build_individual_queries(taxonomy, image, kinds)?,
                QueryMode::Joint => vec![build_joint_query(taxonomy, image, kinds)?],
            };
            let mut image_ms = 0.0;
            let mut complete = true;
            for query in queries {
                let request = query.to_request();
                let started = clock.now();
                let result = backend.ask(&request, timeout);
                let ms = as_millis(clock.now().saturating_sub(started));
                image_ms += ms;
                match result {
                    Ok(_) => {
                        per_call.push(ms);
                        let n = query.kinds.len();
                        per_query.extend(std::iter::repeat_n(ms / n as f64, n));
                    }
                    Err(e) => {
                        complete = false;
                        failures.push(format!("{}: {e}", query.query_id));
                    }
                }
            }
            total_ms += image_ms;
            if complete {
                per_image.push(image_ms);
            }
        }
    }
    Ok(LatencyReport {
        mode,
        kinds: kinds.len(),
        images: images.len(),
        repetitions,
        calls: per_call.len() + failures.len(),
        per_query_ms: summarize(&per_query),
        per_call_ms: summarize(&per_call),
        per_image_total_ms: (!per_image.is_empty()).then(|| per_image.iter().sum::<f64>() / per_image.len() as f64),
        total_ms,
        partial: !failures.is_empty(),
        failures,
    })
}
