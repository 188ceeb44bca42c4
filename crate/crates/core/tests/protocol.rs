use std::sync::Arc;
use std::time::{Duration, Instant};

use drivectx::clock::SystemClock;
use drivectx::protocol::conformance::{self, ConformanceConfig};
use drivectx::protocol::{connect, BackendError, BackendServer, CostModel, Endpoint, GroundTruth, ImagePayload, MockBackend};
use drivectx::query::{recognize, RecognizeOptions};
use drivectx::{synth, ContextId, Taxonomy, Verdict};

fn truth() -> GroundTruth {
    let mut t = GroundTruth::new();
    for (k, v) in synth::random_truth(4) {
        t.insert("probe.jpg", k, v);
    }
    t
}

#[test]
fn mock_server_passes_conformance_with_delay_emulation() {
    let t = truth();
    let probe: Vec<(ContextId, bool)> = t.get("probe.jpg").unwrap().contexts.iter().map(|(k, v)| (*k, *v)).collect();
    let backend = MockBackend::new(t).with_cost(CostModel::fixed(39.0));
    let server = BackendServer::spawn(Arc::new(backend), "127.0.0.1:0").unwrap();
    let mut config = ConformanceConfig::new("probe.jpg");
    config.probe_truth = probe;
    config.expected_delay_ms = Some(39.0);
    config.delay_tolerance_ms = 10.0;
    let addr = server.endpoint().trim_start_matches("tcp://").to_string();
    let report = conformance::run(&addr, &config);
    let failures = report.failures();
    assert!(failures.is_empty(), "{failures:?}");
    assert!(report.checks.iter().any(|c| c.name == "delay_emulation"));
    drop(server);
}

#[test]
fn remote_client_matches_in_process_answers() {
    let t = truth();
    let expected = t.get("probe.jpg").unwrap().contexts.clone();
    let server = BackendServer::spawn(Arc::new(MockBackend::new(t)), "127.0.0.1:0").unwrap();
    let remote = connect(&Endpoint::parse(&server.endpoint()).unwrap(), Arc::new(SystemClock::new())).unwrap();
    let image = ImagePayload::locator("probe.jpg");
    for options in [RecognizeOptions::individual(), RecognizeOptions::joint(false)] {
        let r = recognize(Taxonomy::builtin(), &image, &ContextId::ALL, remote.as_ref(), &options).unwrap();
        for (kind, value) in &expected {
            let want = if *value { Verdict::Yes } else { Verdict::No };
            assert_eq!(r.answers[kind].verdict, want, "{kind:?} in {:?}", options.mode);
        }
    }
    let missing = recognize(
        Taxonomy::builtin(),
        &ImagePayload::locator("elsewhere.jpg"),
        &[ContextId::UrbanCanyon],
        remote.as_ref(),
        &RecognizeOptions::individual(),
    );
    assert!(missing.is_err());
    drop(remote);
    drop(server);
}

#[test]
fn slow_server_times_out_on_client() {
    let backend = MockBackend::new(truth()).with_cost(CostModel::fixed(300.0));
    let server = BackendServer::spawn(Arc::new(backend), "127.0.0.1:0").unwrap();
    let remote = connect(&Endpoint::parse(&server.endpoint()).unwrap(), Arc::new(SystemClock::new())).unwrap();
    let options = RecognizeOptions { timeout: Duration::from_millis(50), ..RecognizeOptions::individual() };
    let started = Instant::now();
    let err = recognize(Taxonomy::builtin(), &ImagePayload::locator("probe.jpg"), &[ContextId::UrbanCanyon], remote.as_ref(), &options)
        .unwrap_err();
    assert!(started.elapsed() < Duration::from_millis(250));
    assert!(err.to_string().contains("timed out") || format!("{err:?}").contains("Timeout"), "{err:?}");
    drop(remote);
    drop(server);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let err = connect(&Endpoint::parse("127.0.0.1:1").unwrap(), Arc::new(SystemClock::new())).err().unwrap();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}
