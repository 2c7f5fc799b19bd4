use proptest::prelude::*;
use pvc_core::simnet::{
    check_trace_properties, churn_scenario, pipeline_speedup, simulate, simulate_with, SimConfig, SimTrace,
    SimWorkerSpec, TraceEvent,
};

const RANDOM_TESTING_RATES: [f64; 6] = [54.22, 150.46, 617.40, 551.18, 498.65, 1816.23];

fn fleet(rates: &[f64]) -> Vec<SimWorkerSpec> {
    rates
        .iter()
        .enumerate()
        .map(|(i, r)| SimWorkerSpec::new(format!("d{i}"), *r))
        .collect()
}

#[test]
fn churn_runs_keep_their_guarantees() {
    for seed in 0..200 {
        let (workers, n) = churn_scenario(seed);
        let trace = simulate(&workers, n, seed, 20.0).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let verdict = check_trace_properties(&trace);
        assert!(verdict.is_ok(), "seed {seed}: {:?}", verdict.violations);
    }
}

#[test]
fn churn_scenarios_always_keep_a_survivor() {
    for seed in 0..1000 {
        let (workers, n) = churn_scenario(seed);
        assert!((2..=6).contains(&workers.len()));
        assert!((50..=300).contains(&n));
        assert!(workers.iter().any(|w| w.fail_at.is_none()), "seed {seed}");
    }
}

#[test]
fn failures_are_exercised() {
    let failing = (0..50)
        .map(churn_scenario)
        .filter(|(w, _)| w.iter().any(|s| s.fail_at.is_some()))
        .count();
    assert!(failing > 25);
    let (workers, n) = (0..50)
        .map(churn_scenario)
        .find(|(w, _)| w.iter().any(|s| s.fail_at.is_some_and(|f| f < 2.0)))
        .unwrap();
    let trace = simulate(&workers, n, 0, 0.0).unwrap();
    assert!(trace.events.iter().any(|e| matches!(e, TraceEvent::Revoke { .. })));
}

#[test]
fn failure_free_runs_execute_each_item_once() {
    for seed in 0..100 {
        let (mut workers, n) = churn_scenario(seed);
        for w in &mut workers {
            w.fail_at = None;
        }
        let trace = simulate(&workers, n, seed, 30.0).unwrap();
        assert_eq!(trace.executions(), n, "seed {seed}");
        assert!(check_trace_properties(&trace).is_ok());
        assert_eq!(trace.completed.iter().sum::<u64>(), n);
    }
}

#[test]
fn eight_to_one_split() {
    let workers = fleet(&[8.0, 1.0]);
    let trace = simulate(&workers, 9000, 0, 0.0).unwrap();
    let (fast, slow) = (trace.completed[0] as f64, trace.completed[1] as f64);
    assert!((fast / 8000.0 - 1.0).abs() <= 0.10, "{fast}");
    assert!((slow / 1000.0 - 1.0).abs() <= 0.10, "{slow}");
}

#[test]
fn random_testing_fleet_reaches_its_aggregate_rate() {
    let trace = simulate(&fleet(&RANDOM_TESTING_RATES), 40_000, 0, 0.0).unwrap();
    let aggregate = trace.report.all_row.items_per_s;
    assert!((aggregate / 3688.14 - 1.0).abs() <= 0.05, "{aggregate}");
    for (row, rate) in trace.report.rows.iter().zip(RANDOM_TESTING_RATES) {
        let expected = rate / 3688.14 * 100.0;
        assert!(
            (row.share_pct - expected).abs() < 0.5,
            "{}: {}",
            row.device,
            row.share_pct
        );
    }
}

#[test]
fn pipelining_hides_round_trips() {
    let at_rtt = |rtt: f64, windows: &[u32]| pipeline_speedup(10.0, rtt, windows).unwrap();
    let no_delay = at_rtt(0.0, &[1, 2]);
    assert!((no_delay[1].1 / no_delay[0].1 - 1.0).abs() < 0.01);
    let delayed = at_rtt(100.0, &[1, 2]);
    assert!(delayed[1].1 >= 1.8 * delayed[0].1, "{delayed:?}");
    assert!((delayed[0].1 - 5.0).abs() < 0.05, "{delayed:?}");
    let long = at_rtt(1000.0, &[11]);
    assert!((long[0].1 / 10.0 - 1.0).abs() <= 0.05, "{long:?}");
}

#[test]
fn identical_inputs_give_identical_traces() {
    let (workers, n) = churn_scenario(77);
    let a = simulate(&workers, n, 5, 25.0).unwrap();
    let b = simulate(&workers, n, 5, 25.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_ndjson(), b.to_ndjson());
}

#[test]
fn ndjson_trace_parses_back() {
    let trace = simulate(&fleet(&[3.0, 5.0]), 20, 1, 10.0).unwrap();
    let events: Vec<TraceEvent> = trace
        .to_ndjson()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events, trace.events);
}

#[test]
fn fleet_files_use_defaults() {
    let workers: Vec<SimWorkerSpec> =
        serde_json::from_str(r#"[{"label": "laptop", "rate": 4}, {"label": "phone", "rate": 1, "fail_at": 2.5}]"#)
            .unwrap();
    assert_eq!(workers[0].window, 2);
    assert_eq!(workers[0].latency_ms, 0.0);
    assert_eq!(workers[1].fail_at, Some(2.5));
    assert!(serde_json::from_str::<Vec<SimWorkerSpec>>(r#"[{"label": "x", "rate": 1, "speed": 2}]"#).is_err());
}

fn completed_at(trace: &SimTrace, horizon: f64) -> u64 {
    trace.completed_by(horizon)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_a_worker_never_lowers_completions(
        rates in prop::collection::vec(1.0..40.0f64, 1..5),
        extra in 1.0..40.0f64,
        latency in 0.0..30.0f64,
        horizon in 0.5..5.0f64,
    ) {
        let n = 400;
        let mut config = SimConfig::new(n, 0, 0.0);
        config.high_water = Some(n);
        let mut base: Vec<SimWorkerSpec> = fleet(&rates);
        for w in &mut base {
            w.latency_ms = latency;
        }
        let mut grown = base.clone();
        let mut added = SimWorkerSpec::new("extra", extra);
        added.latency_ms = latency;
        grown.push(added);
        let before = simulate_with(&base, &config).unwrap();
        let after = simulate_with(&grown, &config).unwrap();
        prop_assert!(
            completed_at(&after, horizon) >= completed_at(&before, horizon),
            "{} < {}",
            completed_at(&after, horizon),
            completed_at(&before, horizon)
        );
    }

    #[test]
    fn jittered_runs_still_emit_in_order(seed in any::<u64>(), jitter in 0.0..100.0f64) {
        let workers = fleet(&[5.0, 9.0, 2.0]);
        let trace = simulate(&workers, 60, seed, jitter).unwrap();
        prop_assert!(check_trace_properties(&trace).is_ok());
        let emits: Vec<u64> = trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Emit { index, .. } => Some(*index),
                _ => None,
            })
            .collect();
        prop_assert_eq!(emits, (0..60).collect::<Vec<_>>());
    }
}
