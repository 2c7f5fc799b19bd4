//! Deterministic discrete-event simulation of a volunteer fleet.
//!
//! Simulated workers join, process leased items with deterministic service
//! times (optionally jittered by a seeded generator), answer pings, and may
//! fail silently. The master side is the production [`Scheduler`]; the
//! simulator only moves messages between it and the workers over links with a
//! fixed one-way latency, and records what happened.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coordinator::{
    Action, ConnId, JobConfig, Pull, SchedEvent, Scheduler, ThroughputReport, DEFAULT_HEARTBEAT_MISSES,
    DEFAULT_HEARTBEAT_PERIOD,
};
use crate::lender::Mutant;
use crate::protocol::{Message, TaskSpec};
use crate::splitmix::SplitMix64;

const NS_PER_S: f64 = 1e9;
const NS_PER_MS: u64 = 1_000_000;

fn default_window() -> u32 {
    2
}

/// One simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimWorkerSpec {
    pub label: String,
    /// Items per second; service time is `1 / rate`.
    pub rate: f64,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default)]
    pub join_at: f64,
    #[serde(default)]
    pub fail_at: Option<f64>,
    #[serde(default = "default_window")]
    pub window: u32,
}

impl SimWorkerSpec {
    pub fn new(label: impl Into<String>, rate: f64) -> Self {
        Self {
            label: label.into(),
            rate,
            latency_ms: 0.0,
            join_at: 0.0,
            fail_at: None,
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_items: u64,
    pub seed: u64,
    pub jitter_pct: f64,
    pub heartbeat_period: Duration,
    pub heartbeat_misses: u32,
    pub high_water: Option<u64>,
    pub mutant: Option<Mutant>,
}

impl SimConfig {
    pub fn new(n_items: u64, seed: u64, jitter_pct: f64) -> Self {
        Self {
            n_items,
            seed,
            jitter_pct,
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD,
            heartbeat_misses: DEFAULT_HEARTBEAT_MISSES,
            high_water: None,
            mutant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Join {
        t: f64,
        worker: usize,
    },
    Fail {
        t: f64,
        worker: usize,
    },
    Lend {
        t: f64,
        worker: usize,
        lease: u64,
        indices: Vec<u64>,
    },
    Settle {
        t: f64,
        worker: usize,
        lease: u64,
        index: u64,
        accepted: bool,
    },
    Revoke {
        t: f64,
        worker: usize,
        requeued: Vec<u64>,
    },
    Emit {
        t: f64,
        index: u64,
    },
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        match self {
            TraceEvent::Join { t, .. }
            | TraceEvent::Fail { t, .. }
            | TraceEvent::Lend { t, .. }
            | TraceEvent::Settle { t, .. }
            | TraceEvent::Revoke { t, .. }
            | TraceEvent::Emit { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub n_items: u64,
    pub labels: Vec<String>,
    pub windows: Vec<u32>,
    pub events: Vec<TraceEvent>,
    /// Time the last result was emitted, in seconds.
    pub makespan_s: f64,
    /// Accepted results per worker.
    pub completed: Vec<u64>,
    pub report: ThroughputReport,
}

impl SimTrace {
    /// Total items handed out, counting re-lends.
    pub fn executions(&self) -> u64 {
        self.events
            .iter()
            .map(|e| match e {
                TraceEvent::Lend { indices, .. } => indices.len() as u64,
                _ => 0,
            })
            .sum()
    }

    /// Accepted results with timestamp at or before `horizon` seconds.
    pub fn completed_by(&self, horizon: f64) -> u64 {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Settle { t, accepted: true, .. } if *t <= horizon))
            .count() as u64
    }

    /// Times at which each index was emitted, in emission order.
    pub fn emit_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Emit { t, .. } => Some(*t),
                _ => None,
            })
            .collect()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid fleet: {0}")]
    InvalidFleet(String),
    #[error("every worker failed with {} item(s) unfinished: {remaining:?}", remaining.len())]
    AllWorkersFailed { at_s: f64, remaining: Vec<u64> },
}

#[derive(Debug, Clone)]
enum Ev {
    Join(usize),
    Fail(usize),
    ToMaster(usize, Message),
    ToWorker(usize, Message),
    ServiceDone(usize),
    Tick,
}

#[derive(Debug, Default)]
struct SimWorker {
    joined: bool,
    dead: bool,
    closed: bool,
    queue: VecDeque<(String, u64, Value)>,
    busy_with: Option<(String, u64, Value)>,
}

impl SimWorker {
    fn live(&self) -> bool {
        !self.dead && !self.closed
    }
}

struct Sim<'a> {
    specs: &'a [SimWorkerSpec],
    config: &'a SimConfig,
    scheduler: Scheduler,
    queue: BTreeMap<(u64, u64), Ev>,
    seq: u64,
    now: u64,
    rng: SplitMix64,
    workers: Vec<SimWorker>,
    events: Vec<TraceEvent>,
    fed: u64,
    pending_joins: usize,
}

fn secs_to_ns(s: f64) -> u64 {
    (s * NS_PER_S).round().max(0.0) as u64
}

impl<'a> Sim<'a> {
    fn t(&self) -> f64 {
        self.now as f64 / NS_PER_S
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn latency(&self, w: usize) -> u64 {
        secs_to_ns(self.specs[w].latency_ms / 1000.0)
    }

    fn service_time(&mut self, w: usize) -> u64 {
        let base = 1.0 / self.specs[w].rate;
        let factor = if self.config.jitter_pct > 0.0 {
            1.0 + self.rng.next_signed_unit() * self.config.jitter_pct / 100.0
        } else {
            1.0
        };
        secs_to_ns(base * factor).max(1)
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(conn, message) => {
                    let w = conn.0 as usize;
                    let at = self.now + self.latency(w);
                    self.schedule(at, Ev::ToWorker(w, message));
                }
                Action::Close(conn) => {
                    let w = conn.0 as usize;
                    let worker = &mut self.workers[w];
                    worker.closed = true;
                    worker.queue.clear();
                    worker.busy_with = None;
                }
            }
        }
    }

    fn pump(&mut self) {
        let n_items = self.config.n_items;
        let fed = &mut self.fed;
        let actions = self.scheduler.pump(&mut || {
            if *fed < n_items {
                *fed += 1;
                Pull::Item(Value::from(*fed - 1))
            } else {
                Pull::End
            }
        });
        self.apply(actions);
        self.record_journal();
    }

    fn record_journal(&mut self) {
        let t = self.t();
        for event in self.scheduler.drain_journal() {
            self.events.push(match event {
                SchedEvent::Lend { conn, lease, indices } => TraceEvent::Lend {
                    t,
                    worker: conn.0 as usize,
                    lease: lease.0,
                    indices,
                },
                SchedEvent::Settle {
                    conn,
                    lease,
                    index,
                    accepted,
                } => TraceEvent::Settle {
                    t,
                    worker: conn.0 as usize,
                    lease: lease.0,
                    index,
                    accepted,
                },
                SchedEvent::Revoke { conn, requeued } => TraceEvent::Revoke {
                    t,
                    worker: conn.0 as usize,
                    requeued,
                },
                SchedEvent::Emit { index } => TraceEvent::Emit { t, index },
            });
        }
        // results leave the master as soon as they are in order
        self.scheduler.take_ready();
    }

    fn start_next(&mut self, w: usize) {
        if self.workers[w].busy_with.is_some() {
            return;
        }
        if let Some(item) = self.workers[w].queue.pop_front() {
            self.workers[w].busy_with = Some(item);
            let at = self.now + self.service_time(w);
            self.schedule(at, Ev::ServiceDone(w));
        }
    }

    fn master_receives(&mut self, w: usize, message: Message) {
        let window = self.specs[w].window;
        let is_hello = matches!(message, Message::Hello { .. });
        let actions = self
            .scheduler
            .on_message(ConnId(w as u64), message, self.now / NS_PER_MS);
        if is_hello {
            self.scheduler.set_window(ConnId(w as u64), window);
        }
        self.apply(actions);
        self.record_journal();
        self.pump();
    }

    fn worker_receives(&mut self, w: usize, message: Message) {
        if !self.workers[w].live() {
            return;
        }
        match message {
            Message::Lease { lease_id, items } => {
                for item in items {
                    self.workers[w]
                        .queue
                        .push_back((lease_id.clone(), item.index, item.value));
                }
                self.start_next(w);
            }
            Message::Ping { t } => {
                let at = self.now + self.latency(w);
                self.schedule(at, Ev::ToMaster(w, Message::Pong { t }));
            }
            _ => {}
        }
    }

    fn step(&mut self, ev: Ev) {
        match ev {
            Ev::Join(w) => {
                self.pending_joins -= 1;
                self.workers[w].joined = true;
                self.events.push(TraceEvent::Join { t: self.t(), worker: w });
                let hello = Message::Hello {
                    agent: self.specs[w].label.clone(),
                    cores: 1,
                    worker_id: None,
                };
                let at = self.now + self.latency(w);
                self.schedule(at, Ev::ToMaster(w, hello));
            }
            Ev::Fail(w) => {
                let worker = &mut self.workers[w];
                if worker.joined && !worker.dead {
                    worker.dead = true;
                    worker.queue.clear();
                    worker.busy_with = None;
                    self.events.push(TraceEvent::Fail { t: self.t(), worker: w });
                }
            }
            // messages already on the wire still arrive after a crash
            Ev::ToMaster(w, message) => self.master_receives(w, message),
            Ev::ToWorker(w, message) => self.worker_receives(w, message),
            Ev::ServiceDone(w) => {
                if !self.workers[w].live() {
                    return;
                }
                if let Some((lease_id, index, value)) = self.workers[w].busy_with.take() {
                    let result = Message::Result {
                        lease_id,
                        index,
                        value,
                        elapsed_ms: 1000.0 / self.specs[w].rate,
                    };
                    let at = self.now + self.latency(w);
                    self.schedule(at, Ev::ToMaster(w, result));
                }
                self.start_next(w);
            }
            Ev::Tick => {
                let actions = self.scheduler.on_tick(self.now / NS_PER_MS);
                self.apply(actions);
                self.record_journal();
                self.pump();
                if !self.scheduler.is_done() {
                    let at = self.now + self.config.heartbeat_period.as_nanos() as u64;
                    self.schedule(at, Ev::Tick);
                }
            }
        }
    }

    fn hopeless(&self) -> bool {
        self.pending_joins == 0 && !self.workers.iter().any(|w| w.joined && w.live())
    }

    fn remaining(&self) -> Vec<u64> {
        let lender = self.scheduler.lender();
        (lender.next_emit()..self.config.n_items)
            .filter(|i| !lender.is_settled(*i))
            .collect()
    }
}

fn validate(specs: &[SimWorkerSpec]) -> Result<(), SimError> {
    if specs.is_empty() {
        return Err(SimError::InvalidFleet("no workers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        let bad = |why: &str| Err(SimError::InvalidFleet(format!("worker {i} ({}): {why}", s.label)));
        if !(s.rate > 0.0 && s.rate.is_finite()) {
            return bad("rate must be positive");
        }
        if !(s.latency_ms >= 0.0 && s.latency_ms.is_finite()) {
            return bad("latency must be non-negative");
        }
        if !(s.join_at >= 0.0 && s.join_at.is_finite()) {
            return bad("join_at must be non-negative");
        }
        if s.fail_at
            .is_some_and(|f| f.partial_cmp(&s.join_at) != Some(std::cmp::Ordering::Greater))
        {
            return bad("fail_at must be after join_at");
        }
        if s.window == 0 {
            return bad("window must be at least 1");
        }
    }
    Ok(())
}

/// Simulates `workers` processing `n_items` with default heartbeat settings.
pub fn simulate(workers: &[SimWorkerSpec], n_items: u64, seed: u64, jitter_pct: f64) -> Result<SimTrace, SimError> {
    simulate_with(workers, &SimConfig::new(n_items, seed, jitter_pct))
}

pub fn simulate_with(workers: &[SimWorkerSpec], config: &SimConfig) -> Result<SimTrace, SimError> {
    validate(workers)?;
    if !(0.0..=100.0).contains(&config.jitter_pct) {
        return Err(SimError::InvalidFleet("jitter must be within 0..=100 percent".into()));
    }
    let mut job = JobConfig::new(TaskSpec::new("sim"));
    job.heartbeat_period = config.heartbeat_period;
    job.heartbeat_misses = config.heartbeat_misses;
    job.high_water = config.high_water;
    let mut scheduler = Scheduler::with_mutant(job, config.mutant);
    scheduler.enable_journal();

    let mut sim = Sim {
        specs: workers,
        config,
        scheduler,
        queue: BTreeMap::new(),
        seq: 0,
        now: 0,
        rng: SplitMix64::new(config.seed),
        workers: (0..workers.len()).map(|_| SimWorker::default()).collect(),
        events: Vec::new(),
        fed: 0,
        pending_joins: workers.len(),
    };
    for (w, spec) in workers.iter().enumerate() {
        sim.schedule(secs_to_ns(spec.join_at), Ev::Join(w));
        if let Some(fail_at) = spec.fail_at {
            sim.schedule(secs_to_ns(fail_at), Ev::Fail(w));
        }
    }
    sim.schedule(config.heartbeat_period.as_nanos() as u64, Ev::Tick);
    sim.pump();

    let mut makespan = 0;
    while !sim.scheduler.is_done() {
        if sim.hopeless() {
            return Err(SimError::AllWorkersFailed {
                at_s: sim.t(),
                remaining: sim.remaining(),
            });
        }
        let Some(((at, _), ev)) = sim.queue.pop_first() else {
            unreachable!("the heartbeat tick is always scheduled while work remains");
        };
        sim.now = at;
        sim.step(ev);
        makespan = sim.now;
    }

    let completed: Vec<u64> = {
        let mut by_conn = HashMap::new();
        for w in sim.scheduler.all_workers() {
            by_conn.insert(w.conn.0 as usize, w.completed);
        }
        (0..workers.len())
            .map(|w| by_conn.get(&w).copied().unwrap_or(0))
            .collect()
    };
    let started = sim.scheduler.started_at().unwrap_or(0);
    let wall = Duration::from_nanos(makespan.saturating_sub(started * NS_PER_MS));
    let report = sim.scheduler.report(wall);
    Ok(SimTrace {
        n_items: config.n_items,
        labels: workers.iter().map(|s| s.label.clone()).collect(),
        windows: workers.iter().map(|s| s.window).collect(),
        events: sim.events,
        makespan_s: makespan as f64 / NS_PER_S,
        completed,
        report,
    })
}

/// A random fleet drawn from `seed`: 2 to 6 workers with rates from 2 to 50
/// items/s, link latencies up to 50 ms and staggered joins. Each worker fails
/// with probability ½ at a random time, except one survivor chosen at random.
/// Returns the fleet and a stream length of 50 to 300 items.
pub fn churn_scenario(seed: u64) -> (Vec<SimWorkerSpec>, u64) {
    let mut rng = SplitMix64::new(seed);
    let n_workers = 2 + rng.below(5) as usize;
    let survivor = rng.below(n_workers as u64) as usize;
    let n_items = 50 + rng.below(251);
    let fleet = (0..n_workers)
        .map(|w| {
            let mut spec = SimWorkerSpec::new(format!("w{w}"), 2.0 + rng.next_f64() * 48.0);
            spec.latency_ms = (rng.next_f64() * 50.0).floor();
            spec.join_at = (rng.next_f64() * 3.0 * 1000.0).floor() / 1000.0;
            spec.window = 1 + rng.below(3) as u32;
            if w != survivor && rng.chance(1, 2) {
                let after = 0.001 + (rng.next_f64() * 10.0 * 1000.0).floor() / 1000.0;
                spec.fail_at = Some(spec.join_at + after);
            }
            spec
        })
        .collect();
    (fleet, n_items)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub violations: Vec<String>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the delivery guarantees on a recorded trace.
pub fn check_trace_properties(trace: &SimTrace) -> Verdict {
    let mut violations = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut emitted = vec![false; trace.n_items as usize];
    let mut next_emit = 0u64;
    let mut held: HashMap<u64, (usize, u64)> = HashMap::new();
    let mut executions = 0u64;
    let mut failures = false;

    for (k, event) in trace.events.iter().enumerate() {
        let t = event.time();
        if t < last_t {
            violations.push(format!("time-regression({k})"));
        }
        last_t = t;
        match event {
            TraceEvent::Join { .. } => {}
            TraceEvent::Fail { .. } => failures = true,
            TraceEvent::Lend {
                worker, lease, indices, ..
            } => {
                executions += indices.len() as u64;
                for index in indices {
                    if held.contains_key(index) {
                        violations.push(format!("concurrent-hold({index})"));
                    } else {
                        held.insert(*index, (*worker, *lease));
                    }
                }
            }
            TraceEvent::Settle {
                worker, lease, index, ..
            } => {
                if held.get(index) == Some(&(*worker, *lease)) {
                    held.remove(index);
                }
            }
            TraceEvent::Revoke { worker, requeued, .. } => {
                failures = true;
                held.retain(|_, (w, _)| w != worker);
                let window = trace.windows.get(*worker).copied().unwrap_or(0) as usize;
                if requeued.len() > window {
                    violations.push(format!("excess-reprocess({worker})"));
                }
            }
            TraceEvent::Emit { index, .. } => {
                match emitted.get_mut(*index as usize) {
                    Some(seen) if *seen => violations.push(format!("duplicate-emit({index})")),
                    Some(seen) => {
                        *seen = true;
                        if *index != next_emit {
                            violations.push(format!("out-of-order-emit({index})"));
                        }
                    }
                    None => violations.push(format!("unknown-emit({index})")),
                }
                next_emit = next_emit.max(index + 1);
            }
        }
    }
    if let Some(missing) = emitted.iter().position(|seen| !seen) {
        violations.push(format!("missing-emit({missing})"));
    }
    if !failures && executions != trace.n_items {
        violations.push(format!("redundant-execution({executions}/{})", trace.n_items));
    }
    Verdict { violations }
}

/// Steady-state throughput of one worker at each window size, with the given
/// round-trip time split evenly between the two directions.
pub fn pipeline_speedup(rate: f64, rtt_ms: f64, windows: &[u32]) -> Result<Vec<(u32, f64)>, SimError> {
    windows
        .iter()
        .map(|&window| {
            let n_items = 200 + 20 * u64::from(window);
            let mut spec = SimWorkerSpec::new("solo", rate);
            spec.latency_ms = rtt_ms / 2.0;
            spec.window = window;
            let mut config = SimConfig::new(n_items, 0, 0.0);
            config.high_water = Some(n_items.max(1));
            let trace = simulate_with(&[spec], &config)?;
            let times = trace.emit_times();
            // skip the pipeline fill
            let skip = (window as usize).min(times.len().saturating_sub(2));
            let span = times[times.len() - 1] - times[skip];
            let rate = (times.len() - 1 - skip) as f64 / span;
            Ok((window, rate))
        })
        .collect()
}
