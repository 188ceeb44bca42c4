use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contextd"));
    for (key, _) in std::env::vars() {
        if key.starts_with("CONTEXTD_") {
            cmd.env_remove(key);
        }
    }
    cmd.env("COLUMNS", "100");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

/// The last stderr line is the machine-readable error.
fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// The hand-annotated layout plus its ground-truth file.
    fn ha(&self) -> (PathBuf, PathBuf) {
        let (m, t) = (self.path("ha.json"), self.path("ha_truth.jsonl"));
        if !m.exists() {
            ok(&["synth", "dataset", "--preset", "ha", "--seed", "1", "--out", s(&m), "--truth", s(&t)]);
        }
        (m, t)
    }
}

const SUBCOMMANDS: [&[&str]; 16] = [
    &[],
    &["annotate"],
    &["review"],
    &["import"],
    &["export"],
    &["stats"],
    &["split"],
    &["shots"],
    &["evaluate"],
    &["bench"],
    &["run"],
    &["ask"],
    &["synth", "dataset"],
    &["synth", "trace"],
    &["serve"],
    &["conformance"],
];

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in SUBCOMMANDS {
        let mut args: Vec<&str> = sub.to_vec();
        args.push("--help");
        let text = ok(&args);
        let name = if sub.is_empty() { "contextd".to_string() } else { sub.join("_") };
        let path = golden.join(format!("{name}.txt"));
        if update {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(&path, &text).unwrap();
        }
        let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
        assert_eq!(text, expected, "help for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
    }
}

#[test]
fn run_help_lists_scheduler_flags() {
    let text = ok(&["run", "--help"]);
    for flag in ["--mode", "--budget-ms", "--cycle-ms", "--kinds", "--refresh-fast", "--refresh-slow", "--backend", "--sink"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();

    let unknown_flag = run(&["stats", "--dataset", s(&manifest), "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
    assert_eq!(error_line(&unknown_flag)["error"], "usage");

    let no_seed = run(&["split", "--dataset", s(&manifest), "--out-dir", s(&f.path("x"))]);
    assert_eq!(no_seed.status.code(), Some(2));
    assert!(error_line(&no_seed)["message"].as_str().unwrap().contains("--seed"));

    let bad_config = bin().args(["stats", "--dataset", s(&manifest)]).env("CONTEXTD_ANNOTATION__THRESHOLD", "1.5").output().unwrap();
    assert_eq!(bad_config.status.code(), Some(3));
    assert_eq!(error_line(&bad_config)["error"], "config");

    let config = f.path("c.toml");
    std::fs::write(&config, "[annotation]\nthreshold = 0.0\n").unwrap();
    let bad_file = run(&["--config", s(&config), "stats", "--dataset", s(&manifest)]);
    assert_eq!(bad_file.status.code(), Some(3));

    let unreachable = run(&["evaluate", "--dataset", s(&manifest), "--backend", "127.0.0.1:1"]);
    assert_eq!(unreachable.status.code(), Some(4));
    assert_eq!(error_line(&unreachable)["error"], "backend");

    let missing = run(&["stats", "--dataset", s(&f.path("missing.json"))]);
    assert_eq!(missing.status.code(), Some(5));
    assert_eq!(error_line(&missing)["exit_code"], 5);
}

#[test]
fn stats_on_hand_annotated_fixture() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();
    let table = ok(&["stats", "--dataset", s(&manifest)]);
    assert!(table.lines().any(|l| l.starts_with("total") && l.contains("1467") && l.contains("35208")), "{table}");
    let v = json(&["stats", "--dataset", s(&manifest), "--json"]);
    assert_eq!((v["images"].as_u64(), v["records"].as_u64()), (Some(1467), Some(35208)));
}

#[test]
fn configured_dataset_names_resolve() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();
    let out = bin().args(["stats", "--dataset", "ha", "--json"]).env("CONTEXTD_DATASETS__HA", s(&manifest)).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["images"], 1467);
}

#[test]
fn split_is_reproducible() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();
    let (a, b) = (f.path("a"), f.path("b"));
    ok(&["split", "--dataset", s(&manifest), "--ratio", "0.7", "--seed", "7", "--out-dir", s(&a)]);
    ok(&["split", "--dataset", s(&manifest), "--ratio", "0.7", "--seed", "7", "--out-dir", s(&b)]);
    for name in ["ha_train.json", "ha_test.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let leftovers: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "{leftovers:?}");
}

#[test]
fn shots_are_nested() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();
    let out = f.path("shots");
    let v = json(&["shots", "--dataset", s(&manifest), "--k", "4,16,64", "--seed", "3", "--out-dir", s(&out)]);
    assert_eq!(v.as_array().unwrap().len(), 3);
    let ids = |k: usize| -> std::collections::HashSet<u64> {
        let m: Value = serde_json::from_slice(&std::fs::read(out.join(format!("ha_{k}shot.json"))).unwrap()).unwrap();
        m["records"].as_array().unwrap().iter().map(|r| r["question_id"].as_u64().unwrap()).collect()
    };
    assert!(ids(4).is_subset(&ids(16)) && ids(16).is_subset(&ids(64)));
}

#[test]
fn joint_bench_beats_individual_on_cost_model() {
    let f = Fixture::new();
    let (manifest, truth) = f.ha();
    let backend = format!("mock:{}?delay_ms=20&per_question_ms=5", s(&truth));
    let bench = |mode: &str| {
        json(&["bench", "--backend", &backend, "--images", s(&manifest), "--limit", "3", "--mode", mode, "--sim-clock"])
    };
    let (individual, joint) = (bench("individual"), bench("joint"));
    let total = |v: &Value| v["total_ms"].as_f64().unwrap();
    assert!(total(&joint) < total(&individual), "{} vs {}", total(&joint), total(&individual));
    assert_eq!(individual["calls"], 72);
    assert_eq!(joint["calls"], 3);
}

#[test]
fn evaluate_writes_report_and_table() {
    let f = Fixture::new();
    let (manifest, truth) = f.ha();
    let shots = f.path("s");
    ok(&["shots", "--dataset", s(&manifest), "--k", "48", "--seed", "1", "--unit", "image", "--out-dir", s(&shots)]);
    let small = shots.join("ha_48shot.json");
    let (report, table) = (f.path("r.json"), f.path("t.csv"));
    let v = json(&[
        "evaluate", "--dataset", s(&small), "--backend", &format!("mock:{}", s(&truth)),
        "--averaging", "macro", "--report", s(&report), "--table", s(&table),
    ]);
    assert_eq!(v["headline"]["accuracy"], 1.0);
    assert_eq!(v["pairs"], 48 * 24);
    assert!(std::fs::read_to_string(&table).unwrap().starts_with("kind,subset,tp,fp,tn,fn"));
    let full: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(full.is_object());
}

#[test]
fn export_import_round_trip() {
    let f = Fixture::new();
    let (manifest, _) = f.ha();
    let out = f.path("vqa");
    ok(&["export", "--dataset", s(&manifest), "--out-dir", s(&out)]);
    let back = f.path("back.json");
    let v = json(&["import", "--dir", s(&out), "--name", "ha", "--out", s(&back)]);
    assert_eq!((v["images"].as_u64(), v["records"].as_u64()), (Some(1467), Some(35208)));
    assert_eq!(std::fs::read(&manifest).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn import_reports_unknown_questions() {
    let f = Fixture::new();
    let dir = f.path("vqa");
    std::fs::create_dir_all(&dir).unwrap();
    let (m, _) = f.ha();
    ok(&["export", "--dataset", s(&m), "--out-dir", s(&dir)]);
    let questions = dir.join("ha_questions.json");
    let mut q: Value = serde_json::from_slice(&std::fs::read(&questions).unwrap()).unwrap();
    q["questions"][0]["question"] = "Is the sky purple?".into();
    std::fs::write(&questions, q.to_string()).unwrap();
    let out = run(&["import", "--dir", s(&dir), "--name", "ha", "--out", s(&f.path("x.json"))]);
    assert_eq!(out.status.code(), Some(5));
    let err = error_line(&out);
    assert_eq!(err["detail"][0]["question"], "Is the sky purple?");
}

#[test]
fn annotate_then_review() {
    let f = Fixture::new();
    let (manifest, truth) = f.ha();
    let shots = f.path("s");
    ok(&["shots", "--dataset", s(&manifest), "--k", "5", "--seed", "2", "--unit", "image", "--out-dir", s(&shots)]);
    let images = shots.join("ha_5shot.json");
    let a = format!("mock:{}?name=vilt&conf=0.95", s(&truth));
    let b = format!("mock:{}?name=llava&conf=0.97", s(&truth));
    let labeled = f.path("ma.json");
    let v = json(&[
        "annotate", "--images", s(&images), "--backend", &a, "--backend", &b, "--out", s(&labeled),
        "--uncertain", s(&f.path("u.jsonl")),
    ]);
    assert_eq!(v["records"], 5 * 24);
    assert_eq!(v["uncertain"], 0);

    let low = json(&[
        "annotate", "--images", s(&images), "--backend", &a, "--backend", &b, "--out", s(&f.path("none.json")),
        "--threshold", "0.96",
    ]);
    assert_eq!((low["records"].as_u64(), low["uncertain"].as_u64()), (Some(0), Some(120)));

    let sample: Vec<Value> = ok(&["review", "--dataset", s(&labeled), "--rate", "0.1", "--seed", "4", "--audit",
        s(&f.path("audit.jsonl")), "--out", s(&f.path("r.json")), "--list"])
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(sample.len(), 12);
    let first = sample[0]["question_id"].as_u64().unwrap();
    let second = sample[1]["question_id"].as_u64().unwrap();
    let decisions = f.path("d.txt");
    std::fs::write(&decisions, format!("{first},accept\n{second},reject\n")).unwrap();
    let reviewed = f.path("reviewed.json");
    ok(&["review", "--dataset", s(&labeled), "--rate", "0.1", "--seed", "4", "--audit", s(&f.path("audit.jsonl")),
        "--out", s(&reviewed), "--decisions", s(&decisions)]);
    let m: Value = serde_json::from_slice(&std::fs::read(&reviewed).unwrap()).unwrap();
    let records = m["records"].as_array().unwrap();
    assert_eq!(records.len(), 119);
    let verified = records.iter().find(|r| r["question_id"] == first).unwrap();
    assert_eq!(verified["origin"], "verified");
    assert!(verified["reviewed_at_ms"].is_u64());
    assert_eq!(std::fs::read_to_string(f.path("audit.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn run_publishes_snapshots_from_trace() {
    let f = Fixture::new();
    let (trace, truth, sink) = (f.path("trace.jsonl"), f.path("truth.jsonl"), f.path("out.ndjson"));
    let v = json(&["synth", "trace", "--seed", "3", "--seconds", "10", "--flip-at-ms", "5000", "--out", s(&trace),
        "--truth", s(&truth)]);
    let initial = v["initial"].as_bool().unwrap();
    ok(&[
        "run", "--backend", &format!("mock:{}?delay_ms=10", s(&truth)), "--frames", s(&trace), "--sim-clock",
        "--sink", s(&sink), "--budget-ms", "10.5", "--cycle-ms", "84", "--refresh-fast", "1000", "--refresh-slow",
        "5000", "--summary", s(&f.path("summary.json")),
    ]);
    let records: Vec<Value> =
        std::fs::read_to_string(&sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    for r in &records {
        for key in ["timestamp", "kind", "value", "confidence", "stale"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    let after = if initial { "absent" } else { "present" };
    let first_after = records
        .iter()
        .find(|r| r["kind"] == "urban_canyon" && r["value"] == after)
        .expect("flip published");
    assert!(first_after["timestamp"].as_f64().unwrap() <= 5000.0 + 1084.0);
    let summary: Value = serde_json::from_slice(&std::fs::read(f.path("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cancelled"], 0);

    let bad = run(&["run", "--backend", &format!("mock:{}", s(&truth)), "--frames", s(&trace), "--sim-clock",
        "--max-per-cycle", "9"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ask_answers_free_form_question() {
    let f = Fixture::new();
    let (trace, truth) = (f.path("trace.jsonl"), f.path("truth.jsonl"));
    let v = json(&["synth", "trace", "--seed", "3", "--seconds", "1", "--flip-at-ms", "0", "--out", s(&trace),
        "--truth", s(&truth)]);
    let expected = if v["initial"].as_bool().unwrap() { "no" } else { "yes" };
    let answer = json(&["ask", "--backend", &format!("mock:{}", s(&truth)), "--image", "trace/000000",
        "--question", "Are there tall buildings around?"]);
    assert_eq!(answer["answer"]["verdict"], expected);
}

#[test]
fn serve_passes_conformance() {
    let f = Fixture::new();
    let (_, truth) = f.ha();
    let mut child = bin()
        .args(["serve", "--backend", &format!("mock:{}?delay_ms=5", s(&truth)), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = serde_json::from_str::<Value>(&line).unwrap()["listening"].as_str().unwrap().to_string();
    let result = run(&["conformance", "--endpoint", &endpoint, "--probe-image", "kitti/0000001.jpg", "--truth",
        s(&truth), "--expected-delay-ms", "5", "--tolerance-ms", "20"]);
    child.kill().unwrap();
    let _ = child.wait();
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(result.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
