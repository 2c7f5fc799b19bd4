//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{ExitCode, Stdio};
use std::time::{Duration, Instant};

use common::{big_decimals, pvc, report_counter, Serve};
use pvc_core::coordinator::{make_report, ConnId, ThroughputReport, WorkerState};
use pvc_core::processors::{
    box_blur, collatz_steps, hashcash_search, interleave_check, parse_natural, process_item, render_frame, GrayImage,
    SceneFrame,
};
use pvc_core::simnet::{check_trace_properties, churn_scenario, pipeline_speedup, simulate, SimWorkerSpec};
use pvc_core::splitmix::SplitMix64;
use pvc_core::{Mutant, TaskSpec};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const RANDOM_TESTING: [(&str, f64, f64); 6] = [
    ("iPhone 4S", 54.22, 1.5),
    ("Novena", 150.46, 4.1),
    ("Asus Pentium", 617.40, 16.7),
    ("Macbook Air 2011", 551.18, 14.9),
    ("iPhone SE", 498.65, 13.5),
    ("Macbook Pro 2016", 1816.23, 49.3),
];

const SMARTPHONES: [(&str, f64, f64); 12] = [
    ("iPhone SE", 443.46, 18.70),
    ("Huawei P10 lite 2017", 364.99, 15.39),
    ("Samsung Galaxy S7", 304.64, 12.84),
    ("Xiaomi redmi note 6 pro", 291.03, 12.27),
    ("LG G6 H870 2017", 260.17, 10.97),
    ("Lenovo P2a42 2016", 171.26, 7.22),
    ("Wileyfox Storm 2016", 128.89, 5.43),
    ("Honor", 125.29, 5.28),
    ("Zenfone 3", 100.58, 4.24),
    ("Samsung A3 2016", 90.58, 3.82),
    ("Zenfone 2", 55.81, 2.35),
    ("Huawei P10 lite 2017 (2)", 35.13, 1.48),
];

fn churn_exactly_once() -> Outcome {
    let mut revocations = 0;
    for seed in 0..1000 {
        let (fleet, n) = churn_scenario(seed);
        let trace = simulate(&fleet, n, seed, 20.0).map_err(|e| format!("seed {seed}: {e}"))?;
        let verdict = check_trace_properties(&trace);
        ensure!(verdict.is_ok(), "seed {seed}: {:?}", verdict.violations);
        revocations += trace
            .events
            .iter()
            .filter(|e| matches!(e, pvc_core::simnet::TraceEvent::Revoke { .. }))
            .count();
    }
    Ok(format!("1000 runs clean, {revocations} revocations exercised"))
}

fn redundancy_avoidance() -> Outcome {
    for seed in 0..100 {
        let (mut fleet, n) = churn_scenario(seed);
        for w in &mut fleet {
            w.fail_at = None;
        }
        let trace = simulate(&fleet, n, seed, 20.0).map_err(|e| e.to_string())?;
        ensure!(
            trace.executions() == n,
            "seed {seed}: {} executions for {n} items",
            trace.executions()
        );
        ensure!(check_trace_properties(&trace).is_ok(), "seed {seed}: trace violations");
    }
    Ok("100 seeds, executions = n_items".into())
}

fn proportional_dispatch() -> Outcome {
    let fleet = [SimWorkerSpec::new("fast", 8.0), SimWorkerSpec::new("slow", 1.0)];
    let trace = simulate(&fleet, 9000, 0, 0.0).map_err(|e| e.to_string())?;
    let (fast, slow) = (trace.completed[0], trace.completed[1]);
    let fast_err = (fast as f64 / 8000.0 - 1.0).abs();
    let slow_err = (slow as f64 / 1000.0 - 1.0).abs();
    ensure!(fast_err <= 0.10 && slow_err <= 0.10, "split {fast}:{slow}");
    Ok(format!("split {fast}:{slow} (target 8000:1000)"))
}

fn worker(agent: &str, completed: u64) -> WorkerState {
    WorkerState {
        conn: ConnId(0),
        worker_id: agent.into(),
        agent: agent.into(),
        cores: 1,
        window: 2,
        in_flight: 0,
        completed,
        busy_ms: 0.0,
        last_pong: 0,
        connected_at: 0,
    }
}

fn check_shares(report: &ThroughputReport, printed: &[(&str, f64, f64)], tolerance: f64) -> Result<(), String> {
    for (row, (device, _, pct)) in report.rows.iter().zip(printed) {
        ensure!(
            (row.share_pct - pct).abs() <= tolerance + 1e-9,
            "{device}: share {} vs printed {pct}",
            row.share_pct
        );
    }
    Ok(())
}

fn random_testing_accounting() -> Outcome {
    // accounting: each device completes rate x 100 items over a 100 s job
    let workers: Vec<WorkerState> = RANDOM_TESTING
        .iter()
        .map(|(device, rate, _)| worker(device, (rate * 100.0).round() as u64))
        .collect();
    let report = make_report(&workers, Duration::from_secs(100), 0, 0);
    let row_sum: f64 = report.rows.iter().map(|r| r.items_per_s).sum();
    ensure!(
        (report.all_row.items_per_s - 3688.14).abs() <= 0.01,
        "All = {}",
        report.all_row.items_per_s
    );
    ensure!(
        (report.all_row.items_per_s - row_sum).abs() <= 0.01,
        "All {} != row sum {row_sum}",
        report.all_row.items_per_s
    );
    check_shares(&report, &RANDOM_TESTING, 0.1)?;

    // the same fleet through the simulator
    let fleet: Vec<SimWorkerSpec> = RANDOM_TESTING
        .iter()
        .map(|(device, rate, _)| SimWorkerSpec::new(*device, *rate))
        .collect();
    let trace = simulate(&fleet, 40_000, 0, 0.0).map_err(|e| e.to_string())?;
    let sim = &trace.report;
    let sim_sum: f64 = sim.rows.iter().map(|r| r.items_per_s).sum();
    ensure!(
        (sim.all_row.items_per_s - sim_sum).abs() <= 0.01,
        "simulated All != row sum"
    );
    ensure!(
        (sim.all_row.items_per_s / 3688.14 - 1.0).abs() <= 0.05,
        "simulated All = {}",
        sim.all_row.items_per_s
    );
    check_shares(sim, &RANDOM_TESTING, 0.1)?;
    let shares: Vec<String> = sim.rows.iter().map(|r| format!("{:.2}", r.share_pct)).collect();
    Ok(format!(
        "All {:.2}; simulated All {:.2}, shares {}",
        report.all_row.items_per_s,
        sim.all_row.items_per_s,
        shares.join("/")
    ))
}

fn smartphone_shares() -> Outcome {
    let report = ThroughputReport::from_rates(
        &[("iPhone SE".into(), 443.46), ("others".into(), 2371.82 - 443.46)],
        0,
        0,
    );
    let share = report.row("iPhone SE").unwrap().share_pct;
    ensure!(format!("{share:.2}") == "18.70", "share {share}");
    let rows: Vec<(String, f64)> = SMARTPHONES.iter().map(|(d, r, _)| (d.to_string(), *r)).collect();
    let full = ThroughputReport::from_rates(&rows, 0, 0);
    check_shares(&full, &SMARTPHONES, 0.0)?;
    Ok(format!("iPhone SE {share:.2}%; all 12 printed shares reproduced"))
}

fn pipelining() -> Outcome {
    let rates = pipeline_speedup(10.0, 100.0, &[1, 2]).map_err(|e| e.to_string())?;
    let (w1, w2) = (rates[0].1, rates[1].1);
    ensure!(w2 >= 1.8 * w1, "window 1: {w1:.3}/s, window 2: {w2:.3}/s");
    Ok(format!("window 1 {w1:.2}/s, window 2 {w2:.2}/s ({:.2}x)", w2 / w1))
}

fn parallel_interleave(
    seeds: std::ops::Range<u64>,
    mutant: Option<Mutant>,
) -> Vec<pvc_core::processors::InterleaveReport> {
    let seeds: Vec<u64> = seeds.collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = seeds.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| interleave_check(*s, 200, mutant))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

fn interleaving_suite() -> Outcome {
    let shipped = parallel_interleave(0..10_000, None);
    let violations: u64 = shipped.iter().map(|r| r.violations).sum();
    ensure!(
        violations == 0,
        "{violations} violations; first: {:?}",
        shipped.iter().find_map(|r| r.first_violation.clone())
    );
    let mutant = parallel_interleave(0..1000, Some(Mutant::RelendWithoutRevoke));
    let caught = mutant.iter().find(|r| r.violations > 0);
    let Some(caught) = caught else {
        return Err("mutant survived the first 1000 seeds".into());
    };
    Ok(format!(
        "10000 seeds clean; mutant caught at seed {} ({} of 1000 seeds fail)",
        caught.seed,
        mutant.iter().filter(|r| r.violations > 0).count()
    ))
}

fn zero_bits(block: &str, nonce: u64) -> u32 {
    let digest = Sha256::digest(format!("{block}{nonce}").as_bytes());
    let bits: String = digest.iter().map(|b| format!("{b:08b}")).collect();
    bits.chars().take_while(|c| *c == '0').count() as u32
}

fn processor_oracles() -> Outcome {
    for n in 1..=10_000u64 {
        let (mut m, mut steps) = (n, 0u64);
        while m != 1 {
            m = if m.is_multiple_of(2) { m / 2 } else { 3 * m + 1 };
            steps += 1;
        }
        let ours = collatz_steps(&parse_natural(&n.to_string()).unwrap()).unwrap();
        ensure!(ours == steps, "collatz({n}) = {ours}, brute force {steps}");
    }
    let two_70 = collatz_steps(&parse_natural("1180591620717411303424").unwrap()).unwrap();
    ensure!(two_70 == 70, "collatz(2^70) = {two_70}");

    let block = "acceptance";
    let zeros: Vec<u32> = (0..100_000).map(|n| zero_bits(block, n)).collect();
    for difficulty in 0..=14 {
        let expected = zeros.iter().position(|z| *z >= difficulty).map(|p| p as u64);
        let found = hashcash_search(block, difficulty, 0, 100_000);
        ensure!(
            found == expected,
            "hashcash difficulty {difficulty}: {found:?} vs scan {expected:?}"
        );
        if let Some(nonce) = found {
            ensure!(
                zero_bits(block, nonce) >= difficulty,
                "nonce {nonce} does not re-verify"
            );
        }
    }

    let mut rng = SplitMix64::new(99);
    for case in 0..100 {
        let w = 5 + rng.below(12) as i64;
        let h = 5 + rng.below(12) as i64;
        let r = rng.below(5) as i64;
        let pixels: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
        let mut naive = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0u64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                        sum += u64::from(pixels[(sy * w + sx) as usize]);
                    }
                }
                let count = ((2 * r + 1) * (2 * r + 1)) as f64;
                naive.push((sum as f64 / count + 0.5).floor() as u8);
            }
        }
        let img = GrayImage::new(w as usize, h as usize, pixels).unwrap();
        ensure!(
            box_blur(&img, r as usize).pixels == naive,
            "blur case {case} ({w}x{h}, r={r})"
        );
    }

    let hash = render_frame(&SceneFrame::new(0, 8, 64, 64).unwrap()).hash;
    ensure!(hash == "ec9b679b41a9ac77", "frame hash {hash}");
    Ok("collatz 1..10000 + 2^70, hashcash d<=14 over 1e5, blur 100 images, frame hash".into())
}

fn end_to_end() -> Outcome {
    let window = 2u64;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("in.ndjson");
    let output = dir.path().join("out.ndjson");
    let values: Vec<Value> = big_decimals(100, 1000, 2019).into_iter().map(Value::from).collect();
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&input, text).map_err(|e| e.to_string())?;

    let serve = Serve::spawn(&[
        "--processor",
        "collatz",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    let spawn_worker = |label: &str| {
        pvc()
            .args(["work", &serve.url(), "--label", label])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap()
    };
    let mut survivor = spawn_worker("survivor");
    let mut victim = spawn_worker("victim");

    // kill the victim once the job is well under way
    let deadline = Instant::now() + Duration::from_secs(25);
    let mut done_at_kill = 0;
    while Instant::now() < deadline {
        done_at_kill = std::fs::read_to_string(&output).map(|s| s.lines().count()).unwrap_or(0);
        if done_at_kill >= 10 {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    let _ = victim.kill();
    let _ = victim.wait();

    let (status, report) = serve.wait(Duration::from_secs(25));
    let survivor_status = survivor.wait().map_err(|e| e.to_string())?;
    ensure!(status.success(), "serve failed: {report}");
    ensure!(
        survivor_status.success(),
        "surviving worker exited with {survivor_status}"
    );
    ensure!(done_at_kill < 100, "job finished before the kill");

    let task = TaskSpec::new("collatz");
    let expected: String = values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            format!(
                "{}\n",
                json!({"index": k, "value": process_item(&task, v).unwrap().outcome.unwrap()})
            )
        })
        .collect();
    let got = std::fs::read_to_string(&output).map_err(|e| e.to_string())?;
    ensure!(got == expected, "output differs from the sequential map");
    let reprocessed = report_counter(&report, "reprocessed").ok_or("no reprocessed counter in report")?;
    ensure!(reprocessed <= window, "reprocessed {reprocessed} > window {window}");
    Ok(format!(
        "100 ordered results, victim killed after {done_at_kill}, reprocessed {reprocessed}"
    ))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "exactly-once and in-order under churn",
            limit: Duration::from_secs(60),
            run: churn_exactly_once,
        },
        Criterion {
            name: "redundancy avoidance",
            limit: Duration::from_secs(5),
            run: redundancy_avoidance,
        },
        Criterion {
            name: "proportional dispatch 8:1",
            limit: Duration::from_secs(5),
            run: proportional_dispatch,
        },
        Criterion {
            name: "random-testing table accounting",
            limit: Duration::from_secs(5),
            run: random_testing_accounting,
        },
        Criterion {
            name: "smartphone share formula",
            limit: Duration::from_secs(1),
            run: smartphone_shares,
        },
        Criterion {
            name: "pipelining with a window of two",
            limit: Duration::from_secs(5),
            run: pipelining,
        },
        Criterion {
            name: "interleaving suite",
            limit: Duration::from_secs(60),
            run: interleaving_suite,
        },
        Criterion {
            name: "processor oracles",
            limit: Duration::from_secs(60),
            run: processor_oracles,
        },
        Criterion {
            name: "end-to-end with a killed worker",
            limit: Duration::from_secs(30),
            run: end_to_end,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|panic| {
            let text = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {text}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; took longer than {:?}", c.limit)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<40} {:>7.2}s  {detail}", c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<40} {:>7.2}s  {why}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
