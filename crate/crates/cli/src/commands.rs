//! One function per subcommand. Each parses nothing itself: it receives
//! clap's arguments and the validated config, and maps library errors onto
//! exit categories through `CliError`.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use serde_json::json;

use drivectx::annotation::{
    machine_annotate, review_interactive, sample_for_review, AnnotateOptions, AnnotationTarget, Origin,
    ReviewDecision, ReviewSession,
};
use drivectx::clock::{Clock, SimClock, SystemClock};
use drivectx::dataset::{
    export_vqa, import_vqa, load_images, sample_shots, split, stats, write_atomic, DatasetManifest, ImageMeta,
    SplitSpec, VqaPaths,
};
use drivectx::evaluation::{benchmark_latency, evaluate, BenchOptions, EvalOptions};
use drivectx::protocol::{
    connect, Backend, BackendServer, Endpoint, GroundTruth, ImagePayload, QueryMode,
};
use drivectx::protocol::conformance::{self, ConformanceConfig};
use drivectx::query::{ask_freeform, RecognizeOptions};
use drivectx::realtime::{
    open_sink, serve_adhoc, DirFrameSource, FrameSource, RunOptions, Runner, SimFrameSource, SocketFrameSource,
};
use drivectx::synth::{self, SynthSpec, QUESTION_STRIDE};
use drivectx::{ContextId, Taxonomy};

use crate::args::*;
use crate::config::AppConfig;
use crate::error::{CliError, CliResult};

pub struct Ctx {
    pub config: AppConfig,
    pub taxonomy: &'static Taxonomy,
}

impl Ctx {
    fn backend(&self, name: &str, clock: Arc<dyn Clock>) -> CliResult<Arc<dyn Backend>> {
        let endpoint = self.config.resolve_backend(name)?;
        let backend = connect(&endpoint, clock)?;
        let d = backend.descriptor();
        info!("connected to backend {} ({}), joint={}", d.name, d.model_id, d.supports_joint);
        Ok(Arc::from(backend))
    }

    fn dataset(&self, name: &str) -> CliResult<DatasetManifest> {
        let path = self.config.resolve_dataset(name);
        Ok(DatasetManifest::load(&path)?)
    }

    fn kinds(&self, spec: Option<&str>) -> CliResult<Vec<ContextId>> {
        match spec {
            Some(s) => Ok(self.taxonomy.parse_kind_list(s)?),
            None => Ok(ContextId::ALL.to_vec()),
        }
    }
}

fn print_json(value: &serde_json::Value) -> CliResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn json_bytes<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn recognize_options(q: &QueryArgs) -> RecognizeOptions {
    RecognizeOptions {
        mode: q.mode.into(),
        fallback: !q.no_fallback,
        timeout: Duration::from_millis(q.timeout_ms),
        ..RecognizeOptions::default()
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

/// Question ids follow the image id when every id is numeric, else the
/// position in the list.
fn question_bases(images: &[ImageMeta]) -> Vec<u64> {
    let numeric: Option<Vec<u64>> = images.iter().map(|i| i.image_id.parse::<u64>().ok()).collect();
    match numeric {
        Some(ids) => ids.into_iter().map(|id| id * QUESTION_STRIDE).collect(),
        None => (1..=images.len() as u64).map(|i| i * QUESTION_STRIDE).collect(),
    }
}

pub fn annotate(ctx: &Ctx, a: &AnnotateArgs) -> CliResult {
    let images = load_images(&a.images)?;
    let names: Vec<String> =
        if a.backends.is_empty() { ctx.config.backends.keys().cloned().collect() } else { a.backends.clone() };
    if names.is_empty() {
        return Err(CliError::usage("no backends: pass --backend or configure [backends]"));
    }
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let backends: Vec<Arc<dyn Backend>> = names.iter().map(|n| ctx.backend(n, clock.clone())).collect::<Result<_, _>>()?;
    let voters: Vec<&dyn Backend> = backends.iter().map(|b| b.as_ref()).collect();
    let kinds = ctx.kinds(a.kinds.as_deref())?;
    let options = AnnotateOptions {
        threshold: a.threshold.unwrap_or(ctx.config.annotation.threshold),
        emit_negatives: ctx.config.annotation.emit_negatives && !a.no_negatives,
        recognize: recognize_options(&a.query),
    };

    let mut manifest = DatasetManifest::new(&a.name.clone().unwrap_or_else(|| stem(&a.out)));
    manifest.taxonomy_version = ctx.taxonomy.taxonomy_version().to_string();
    let mut uncertain = Vec::new();
    let mut suppressed = 0usize;
    for (image, base) in images.iter().zip(question_bases(&images)) {
        let target = AnnotationTarget {
            image_id: image.image_id.clone(),
            image: ImagePayload::locator(image.image_ref.clone()),
            subset: image.source_subset,
            base_question_id: base,
        };
        let pass = machine_annotate(ctx.taxonomy, &target, &kinds, &voters, &options)?;
        info!("image {}: {} labels, {} uncertain", image.image_id, pass.records.len(), pass.uncertain.len());
        manifest.records.extend(pass.records);
        uncertain.extend(pass.uncertain);
        suppressed += pass.suppressed_negatives.len();
    }
    manifest.images = images;
    manifest.canonicalize();
    manifest.validate()?;
    manifest.save(&a.out)?;
    if let Some(path) = &a.uncertain {
        let mut bytes = Vec::new();
        for item in &uncertain {
            serde_json::to_writer(&mut bytes, item).map_err(io::Error::from)?;
            bytes.push(b'\n');
        }
        write_atomic(path, &bytes)?;
    }
    print_json(&json!({
        "images": manifest.images.len(),
        "records": manifest.records.len(),
        "uncertain": uncertain.len(),
        "suppressed_negatives": suppressed,
        "out": a.out,
    }))
}

pub fn review(ctx: &Ctx, a: &ReviewArgs) -> CliResult {
    let manifest = ctx.dataset(&a.dataset)?;
    let machine: Vec<_> = manifest.records.iter().filter(|r| r.origin == Origin::Machine).cloned().collect();
    if machine.is_empty() {
        return Err(CliError::data("no machine-annotated records to review"));
    }
    let sample = sample_for_review(&machine, a.rate, a.seed)?;
    if a.list {
        let mut out = io::stdout().lock();
        for r in &sample {
            serde_json::to_writer(&mut out, r).map_err(io::Error::from)?;
            writeln!(out)?;
        }
        return Ok(());
    }
    let audit = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.audit)
        .map_err(|e| CliError::data(format!("{}: {e}", a.audit.display())))?;
    let mut session = ReviewSession::new(manifest.records.clone(), &sample, audit);
    let entries = match &a.decisions {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let mut entries = Vec::new();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() || line.trim_start().starts_with('#') {
                    continue;
                }
                let decision = ReviewDecision::parse_line(&line)
                    .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
                entries.push(session.apply(decision)?);
            }
            entries
        }
        None => {
            let refs: std::collections::HashMap<&str, &str> =
                manifest.images.iter().map(|i| (i.image_id.as_str(), i.image_ref.as_str())).collect();
            let locate = |id: &str| refs.get(id).map_or_else(|| id.to_string(), |r| r.to_string());
            review_interactive(&mut session, &sample, locate, io::stdin().lock(), io::stdout().lock())?
        }
    };
    let mut reviewed = DatasetManifest { records: session.finish(), ..manifest };
    reviewed.canonicalize();
    reviewed.validate()?;
    reviewed.save(&a.out)?;
    let count = |o: drivectx::annotation::AuditOutcome| entries.iter().filter(|e| e.outcome == o).count();
    use drivectx::annotation::AuditOutcome::*;
    eprintln!(
        "{}",
        json!({"sampled": sample.len(), "decisions": entries.len(), "verified": count(Verified),
               "removed": count(Removed), "unchanged": count(Unchanged), "unknown": count(Unknown)})
    );
    Ok(())
}

pub fn import(ctx: &Ctx, a: &ImportArgs) -> CliResult {
    let paths = match (&a.dir, &a.name, &a.questions) {
        (Some(dir), Some(name), _) => VqaPaths::in_dir(dir, name),
        (None, _, Some(questions)) => VqaPaths {
            questions: questions.clone(),
            annotations: a.annotations.clone().ok_or_else(|| CliError::usage("--annotations is required"))?,
            images: a.images.clone().ok_or_else(|| CliError::usage("--images is required"))?,
            extensions: a.extensions.clone(),
        },
        _ => return Err(CliError::usage("pass --dir and --name, or --questions, --annotations and --images")),
    };
    let manifest = import_vqa(ctx.taxonomy, &paths)?;
    manifest.save(&a.out)?;
    print_json(&json!({"name": manifest.name, "images": manifest.images.len(), "records": manifest.records.len()}))
}

pub fn export(ctx: &Ctx, a: &ExportArgs) -> CliResult {
    let manifest = ctx.dataset(&a.dataset)?;
    ensure_dir(&a.out_dir)?;
    let paths = export_vqa(&manifest, &a.out_dir)?;
    print_json(&json!({
        "questions": paths.questions,
        "annotations": paths.annotations,
        "images": paths.images,
        "extensions": paths.extensions,
    }))
}

pub fn stats_cmd(ctx: &Ctx, a: &StatsArgs) -> CliResult {
    let s = stats(&ctx.dataset(&a.dataset)?);
    if a.json {
        print_json(&serde_json::to_value(&s).map_err(io::Error::from)?)
    } else {
        print!("{}", s.table());
        Ok(())
    }
}

pub fn split_cmd(ctx: &Ctx, a: &SplitArgs) -> CliResult {
    let manifest = ctx.dataset(&a.dataset)?;
    let (train, test) = split(&manifest, &SplitSpec { train_fraction: a.ratio, seed: a.seed })?;
    ensure_dir(&a.out_dir)?;
    let mut written = Vec::new();
    for part in [&train, &test] {
        let path = a.out_dir.join(format!("{}.json", part.name));
        part.save(&path)?;
        written.push(json!({"path": path, "images": part.images.len(), "records": part.records.len()}));
    }
    print_json(&json!(written))
}

pub fn shots(ctx: &Ctx, a: &ShotsArgs) -> CliResult {
    let train = ctx.dataset(&a.dataset)?;
    ensure_dir(&a.out_dir)?;
    let mut written = Vec::new();
    for &k in &a.k {
        let sample = sample_shots(&train, k, a.seed, a.unit.into())?;
        let path = a.out_dir.join(format!("{}.json", sample.name));
        sample.save(&path)?;
        written.push(json!({"k": k, "path": path, "images": sample.images.len(), "records": sample.records.len()}));
    }
    print_json(&json!(written))
}

pub fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> CliResult {
    let manifest = ctx.dataset(&a.dataset)?;
    let backend = ctx.backend(&a.backend, Arc::new(SystemClock::new()))?;
    let options = EvalOptions { recognize: recognize_options(&a.query), in_flight_images: a.in_flight.max(1) };
    let report = evaluate(ctx.taxonomy, &manifest, backend.as_ref(), &options)?;
    let averaging = a.averaging.into();
    let full = report.to_json(averaging);
    if let Some(path) = &a.report {
        write_atomic(path, &json_bytes(&full)?)?;
    }
    if let Some(path) = &a.table {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    if report.is_partial() {
        warn!("{} images had failed queries; their pairs are not scored", report.failures.len());
    }
    print_json(&json!({
        "dataset": report.dataset,
        "backend": report.backend,
        "mode": report.mode,
        "averaging": averaging,
        "headline": report.headline(averaging),
        "pairs": report.micro().counts.total(),
        "partial": report.is_partial(),
    }))
}

pub fn bench(ctx: &Ctx, a: &BenchArgs) -> CliResult {
    let clock: Arc<dyn Clock> = if a.sim_clock { SimClock::shared() } else { Arc::new(SystemClock::new()) };
    if a.sim_clock && !matches!(ctx.config.resolve_backend(&a.backend)?, Endpoint::Mock(_)) {
        return Err(CliError::usage("--sim-clock only applies to mock backends"));
    }
    let backend = ctx.backend(&a.backend, clock.clone())?;
    let mut images = load_images(&a.images)?;
    if let Some(n) = a.limit {
        images.truncate(n);
    }
    let payloads: Vec<ImagePayload> = images.iter().map(|i| ImagePayload::locator(i.image_ref.clone())).collect();
    let kinds = ctx.kinds(a.kinds.as_deref())?;
    let options =
        BenchOptions { timeout: Duration::from_millis(a.timeout_ms), ..BenchOptions::new(a.mode.into(), a.repetitions) };
    let report = benchmark_latency(ctx.taxonomy, backend.as_ref(), clock.as_ref(), &payloads, &kinds, &options)?;
    if report.partial {
        warn!("{} calls failed; results are partial", report.failures.len());
    }
    print_json(&serde_json::to_value(&report).map_err(io::Error::from)?)
}

fn frame_source(a: &RunArgs) -> CliResult<Box<dyn FrameSource>> {
    let spec = a.frames.as_str();
    if let Some(dir) = spec.strip_prefix("dir:") {
        let dir = PathBuf::from(dir);
        if !dir.is_dir() {
            return Err(CliError::data(format!("{} is not a directory", dir.display())));
        }
        let mut source = DirFrameSource::new(&dir, a.inline);
        if let Some(ms) = a.idle_timeout_ms {
            source = source.with_idle_timeout(Duration::from_millis(ms));
        }
        return Ok(Box::new(source));
    }
    if let Some(addr) = spec.strip_prefix("tcp:") {
        let source = SocketFrameSource::bind(addr.trim_start_matches("//"))
            .map_err(|e| CliError::config(format!("cannot listen on {addr}: {e}")))?;
        info!("waiting for frames on {}", source.local_addr());
        return Ok(Box::new(source));
    }
    let path = spec.strip_prefix("trace:").unwrap_or(spec);
    let source = SimFrameSource::load(Path::new(path)).map_err(|e| CliError::data(format!("{path}: {e}")))?;
    Ok(Box::new(source))
}

pub fn run(ctx: &Ctx, a: &RunArgs) -> CliResult {
    let mut config = ctx.config.scheduler(Some(ctx.taxonomy))?;
    if let Some(m) = a.mode {
        config.mode = m.into();
    }
    if let Some(v) = a.budget_ms {
        config.per_query_budget_ms = v;
    }
    if let Some(v) = a.cycle_ms {
        config.cycle_period_ms = v;
    }
    if let Some(v) = a.refresh_fast {
        config.refresh_fast_ms = v;
    }
    if let Some(v) = a.refresh_slow {
        config.refresh_slow_ms = v;
    }
    if let Some(v) = a.max_per_cycle {
        config.max_queries_per_cycle = v;
    }
    if let Some(k) = &a.kinds {
        config.enabled_kinds = ctx.taxonomy.parse_kind_list(k)?;
    }
    config.validate().map_err(CliError::usage)?;

    let clock: Arc<dyn Clock> = if a.sim_clock { SimClock::shared() } else { Arc::new(SystemClock::new()) };
    let backend = ctx.backend(&a.backend, clock.clone())?;
    if config.mode == QueryMode::Joint && !backend.descriptor().supports_joint {
        return Err(CliError::backend(format!("backend {} does not support joint queries", backend.descriptor().name)));
    }
    let mut source = frame_source(a)?;
    let mut sink = open_sink(&a.sink).map_err(|e| CliError::data(format!("sink {}: {e}", a.sink)))?;
    let runner = Runner::new(config, backend, clock)?
        .with_taxonomy(ctx.taxonomy)
        .with_options(RunOptions { max_cycles: a.max_cycles, ..RunOptions::default() });
    if let Some(addr) = &a.adhoc {
        let listener = TcpListener::bind(addr).map_err(|e| CliError::config(format!("cannot listen on {addr}: {e}")))?;
        let bound = serve_adhoc(listener, runner.adhoc())?;
        info!("ad-hoc questions on {bound}");
    }
    let summary = runner.run(source.as_mut(), &mut sink)?;
    let report = json!({
        "cycles": summary.cycles,
        "queries_issued": summary.queries_issued,
        "cancelled": summary.cancelled,
        "unparseable": summary.unparseable,
        "backend_errors": summary.backend_errors,
        "adhoc_answered": summary.adhoc_answered,
        "publishes": summary.publishes,
        "frames_dropped": summary.frames_dropped,
        "max_cycle_busy_ms": summary.max_cycle_busy_ms,
    });
    info!("run finished: {report}");
    if let Some(path) = &a.summary {
        write_atomic(path, &json_bytes(&report)?)?;
    }
    Ok(())
}

pub fn ask(ctx: &Ctx, a: &AskArgs) -> CliResult {
    let backend = ctx.backend(&a.backend, Arc::new(SystemClock::new()))?;
    let image = match (&a.image, &a.image_file) {
        (_, Some(path)) => {
            ImagePayload::inline(&fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?)
        }
        (Some(locator), None) => ImagePayload::locator(locator.clone()),
        (None, None) => return Err(CliError::usage("pass --image or --image-file")),
    };
    let answer = ask_freeform(backend.as_ref(), &image, &a.question, Duration::from_millis(a.timeout_ms))?;
    print_json(&json!({"question": a.question, "answer": answer}))
}

pub fn synth_cmd(ctx: &Ctx, c: &SynthCommand) -> CliResult {
    match c {
        SynthCommand::Dataset(a) => {
            let spec = match a.preset {
                PresetArg::Ha => SynthSpec::hand_annotated(a.seed),
                PresetArg::Ma => {
                    if a.divisor == 0 {
                        return Err(CliError::usage("--divisor must be at least 1"));
                    }
                    SynthSpec::machine_annotated(a.divisor, a.seed)
                }
            };
            let manifest = synth::manifest(ctx.taxonomy, &spec);
            manifest.save(&a.out)?;
            if let Some(path) = &a.truth {
                manifest.ground_truth().save(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            }
            print_json(&json!({"name": manifest.name, "images": manifest.images.len(), "records": manifest.records.len()}))
        }
        SynthCommand::Trace(a) => {
            let kind: ContextId = ctx.taxonomy.get(&a.kind)?.id;
            if a.frame_ms == 0 {
                return Err(CliError::usage("--frame-ms must be positive"));
            }
            let trace = synth::flip_trace(
                a.seed,
                Duration::from_secs(a.seconds),
                Duration::from_millis(a.frame_ms),
                kind,
                Duration::from_millis(a.flip_at_ms),
            );
            let frames = trace.frames();
            drivectx::realtime::write_trace(&a.out, &frames)
                .map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
            trace.ground_truth().save(&a.truth).map_err(|e| CliError::data(format!("{}: {e}", a.truth.display())))?;
            print_json(&json!({"frames": frames.len(), "kind": kind, "flip_at_ms": a.flip_at_ms,
                                "initial": trace.initial[&kind]}))
        }
    }
}

pub fn serve(ctx: &Ctx, a: &ServeArgs) -> CliResult {
    let backend = ctx.backend(&a.backend, Arc::new(SystemClock::new()))?;
    let server = BackendServer::spawn(backend, &a.listen)
        .map_err(|e| CliError::config(format!("cannot listen on {}: {e}", a.listen)))?;
    println!("{}", json!({"listening": server.endpoint()}));
    io::stdout().flush()?;
    server.join();
    Ok(())
}

pub fn conformance_cmd(_ctx: &Ctx, a: &ConformanceArgs) -> CliResult {
    let mut config = ConformanceConfig::new(&a.probe_image);
    config.expected_delay_ms = a.expected_delay_ms;
    config.delay_tolerance_ms = a.tolerance_ms;
    if let Some(path) = &a.truth {
        let truth = GroundTruth::load(path)?;
        let image = truth
            .get(&a.probe_image)
            .ok_or_else(|| CliError::data(format!("{} has no entry for {}", path.display(), a.probe_image)))?;
        config.probe_truth = image.contexts.iter().map(|(&k, &v)| (k, v)).collect();
    }
    let report = conformance::run(&a.endpoint, &config);
    let mut out = io::stdout().lock();
    for check in &report.checks {
        writeln!(out, "{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::backend(format!("{} conformance checks failed", report.failures().len())))
    }
}
