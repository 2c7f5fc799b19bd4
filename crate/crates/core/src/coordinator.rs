//! Master-side scheduling, independent of any transport.
//!
//! [`Scheduler`] turns worker messages, disconnects and heartbeat ticks into
//! outbound [`Action`]s, driving a [`StreamLender`] with a pull-based window:
//! each worker holds at most `window` unsettled items and is topped up as its
//! results come in, so faster workers are handed more items. The network
//! coordinator and the simulator both drive this same type; neither adds
//! scheduling logic of its own.
//!
//! Time is passed in by the caller as milliseconds, so the scheduler never
//! reads a clock.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::lender::{HolderId, LeaseId, LenderError, StreamLender, DEFAULT_HIGH_WATER};
use crate::protocol::{LeaseItem, Message, TaskSpec};

pub const DEFAULT_WINDOW: u32 = 2;
pub const DEFAULT_HEARTBEAT_PERIOD: Duration = Duration::from_secs(5);
pub const DEFAULT_HEARTBEAT_MISSES: u32 = 3;
pub const DEFAULT_PORT: u16 = 8080;

/// A transport connection. One worker session per connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnId(pub u64);

impl ConnId {
    fn holder(self) -> HolderId {
        HolderId(self.0)
    }
}

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Result of one item: the mapped value, or the processor's error text.
pub type Outcome = Result<Value, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub task: TaskSpec,
    pub window: u32,
    pub heartbeat_period: Duration,
    pub heartbeat_misses: u32,
    /// Fixed backpressure bound. `None` tracks `max(1024, 8 × Σ windows)` over
    /// the connected workers.
    pub high_water: Option<u64>,
    pub port: u16,
}

impl JobConfig {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            window: DEFAULT_WINDOW,
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD,
            heartbeat_misses: DEFAULT_HEARTBEAT_MISSES,
            high_water: None,
            port: DEFAULT_PORT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerState {
    pub conn: ConnId,
    pub worker_id: String,
    pub agent: String,
    pub cores: u32,
    pub window: u32,
    pub in_flight: u32,
    pub completed: u64,
    pub busy_ms: f64,
    /// Last time anything was heard from the worker.
    pub last_pong: u64,
    pub connected_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(ConnId, Message),
    /// Drop the connection. The worker's items have already been revoked.
    Close(ConnId),
}

/// What the input source had to offer when asked for the next value.
#[derive(Debug, Clone, PartialEq)]
pub enum Pull {
    Item(Value),
    /// Nothing available yet; ask again later.
    Wait,
    End,
}

/// Scheduling events, recorded when journaling is enabled.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedEvent {
    Lend {
        conn: ConnId,
        lease: LeaseId,
        indices: Vec<u64>,
    },
    Settle {
        conn: ConnId,
        lease: LeaseId,
        index: u64,
        accepted: bool,
    },
    Revoke {
        conn: ConnId,
        requeued: Vec<u64>,
    },
    Emit {
        index: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub device: String,
    pub items_per_s: f64,
    pub share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub rows: Vec<ReportRow>,
    pub all_row: ReportRow,
    pub duplicates: u64,
    pub reprocessed: u64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl ThroughputReport {
    /// Builds rows from per-device rates; shares are rounded to 2 decimals.
    pub fn from_rates(rates: &[(String, f64)], duplicates: u64, reprocessed: u64) -> Self {
        let total: f64 = rates.iter().map(|(_, r)| r).sum();
        let rows = rates
            .iter()
            .map(|(device, rate)| ReportRow {
                device: device.clone(),
                items_per_s: *rate,
                share_pct: if total > 0.0 { round2(rate / total * 100.0) } else { 0.0 },
            })
            .collect();
        Self {
            rows,
            all_row: ReportRow {
                device: "All".into(),
                items_per_s: total,
                share_pct: 100.0,
            },
            duplicates,
            reprocessed,
        }
    }

    pub fn row(&self, device: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.device == device)
    }
}

impl fmt::Display for ThroughputReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.device.len())
            .chain(["Device".len()])
            .max()
            .unwrap_or(6);
        writeln!(f, "{:<width$}  {:>12}  {:>7}", "Device", "items/s", "%")?;
        writeln!(f, "{}", "-".repeat(width + 23))?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>12.2}  {:>7.2}",
                row.device, row.items_per_s, row.share_pct
            )?;
        }
        writeln!(f, "{}", "-".repeat(width + 23))?;
        writeln!(
            f,
            "{:<width$}  {:>12.2}  {:>7.2}",
            self.all_row.device, self.all_row.items_per_s, self.all_row.share_pct
        )?;
        writeln!(f, "duplicates: {}", self.duplicates)?;
        write!(f, "reprocessed: {}", self.reprocessed)
    }
}

/// Per-device throughput over `wall`. Workers with the same agent label are
/// one device (one row), in order of first connection.
pub fn make_report(workers: &[WorkerState], wall: Duration, duplicates: u64, reprocessed: u64) -> ThroughputReport {
    let secs = wall.as_secs_f64();
    let mut devices: Vec<(String, u64)> = Vec::new();
    for w in workers {
        match devices.iter_mut().find(|(d, _)| *d == w.agent) {
            Some((_, completed)) => *completed += w.completed,
            None => devices.push((w.agent.clone(), w.completed)),
        }
    }
    let rates: Vec<(String, f64)> = devices
        .into_iter()
        .map(|(d, completed)| {
            let rate = if secs > 0.0 { completed as f64 / secs } else { 0.0 };
            (d, rate)
        })
        .collect();
    ThroughputReport::from_rates(&rates, duplicates, reprocessed)
}

pub struct Scheduler {
    config: JobConfig,
    lender: StreamLender<Value, Outcome>,
    workers: BTreeMap<ConnId, WorkerState>,
    departed: Vec<WorkerState>,
    ready: VecDeque<(u64, Outcome)>,
    next_worker: u64,
    duplicates: u64,
    reprocessed: u64,
    stale: u64,
    started_at: Option<u64>,
    journal: Option<Vec<SchedEvent>>,
}

impl Scheduler {
    pub fn new(config: JobConfig) -> Self {
        Self::with_lender(config, None)
    }

    /// A scheduler over a lender running a known-bad policy.
    pub fn with_mutant(config: JobConfig, mutant: Option<crate::lender::Mutant>) -> Self {
        Self::with_lender(config, mutant)
    }

    fn with_lender(config: JobConfig, mutant: Option<crate::lender::Mutant>) -> Self {
        assert!(config.window >= 1, "window must be at least 1");
        assert!(!config.heartbeat_period.is_zero(), "heartbeat period must be positive");
        let high_water = config.high_water.unwrap_or(DEFAULT_HIGH_WATER);
        Self {
            lender: StreamLender::with_mutant(high_water, mutant),
            config,
            workers: BTreeMap::new(),
            departed: Vec::new(),
            ready: VecDeque::new(),
            next_worker: 0,
            duplicates: 0,
            reprocessed: 0,
            stale: 0,
            started_at: None,
            journal: None,
        }
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn enable_journal(&mut self) {
        self.journal.get_or_insert_with(Vec::new);
    }

    pub fn drain_journal(&mut self) -> Vec<SchedEvent> {
        self.journal.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, event: SchedEvent) {
        if let Some(journal) = &mut self.journal {
            journal.push(event);
        }
    }

    pub fn worker(&self, conn: ConnId) -> Option<&WorkerState> {
        self.workers.get(&conn)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerState> {
        self.workers.values()
    }

    /// Connected and departed workers, in order of connection.
    pub fn all_workers(&self) -> Vec<WorkerState> {
        let mut all: Vec<WorkerState> = self.departed.iter().chain(self.workers.values()).cloned().collect();
        all.sort_by_key(|w| w.conn);
        all
    }

    pub fn lender(&self) -> &StreamLender<Value, Outcome> {
        &self.lender
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn reprocessed(&self) -> u64 {
        self.reprocessed
    }

    /// Late results from connections that had already lost their leases.
    pub fn stale_results(&self) -> u64 {
        self.stale
    }

    /// Time of the first worker hello.
    pub fn started_at(&self) -> Option<u64> {
        self.started_at
    }

    /// Overrides the window of one connected worker.
    pub fn set_window(&mut self, conn: ConnId, window: u32) {
        assert!(window >= 1, "window must be at least 1");
        if let Some(w) = self.workers.get_mut(&conn) {
            w.window = window;
            self.refresh_high_water();
        }
    }

    fn refresh_high_water(&mut self) {
        if self.config.high_water.is_none() {
            let windows: u64 = self.workers.values().map(|w| u64::from(w.window)).sum();
            self.lender.set_high_water(DEFAULT_HIGH_WATER.max(8 * windows));
        }
    }

    fn sync_in_flight(&mut self, conn: ConnId) {
        let held = self.lender.held_by(conn.holder()) as u32;
        if let Some(w) = self.workers.get_mut(&conn) {
            w.in_flight = held;
        }
    }

    pub fn on_message(&mut self, conn: ConnId, message: Message, now: u64) -> Vec<Action> {
        let Some(worker) = self.workers.get_mut(&conn) else {
            return self.on_unregistered(conn, message, now);
        };
        worker.last_pong = now;
        match message {
            Message::Result {
                lease_id,
                index,
                value,
                elapsed_ms,
            } => self.settle(conn, &lease_id, index, Ok(value), elapsed_ms),
            Message::ItemError {
                lease_id,
                index,
                message,
            } => self.settle(conn, &lease_id, index, Err(message), 0.0),
            Message::Pong { .. } => Vec::new(),
            Message::Ping { t } => vec![Action::Send(conn, Message::Pong { t })],
            Message::Bye {} => self.disconnect(conn),
            Message::Hello { .. } | Message::Welcome { .. } | Message::Lease { .. } => {
                log::warn!("{conn}: unexpected {} message", message.kind());
                self.disconnect(conn)
            }
        }
    }

    fn on_unregistered(&mut self, conn: ConnId, message: Message, now: u64) -> Vec<Action> {
        match message {
            Message::Hello {
                agent,
                cores,
                worker_id,
            } => {
                let worker_id = match worker_id {
                    Some(id) if !self.workers.values().any(|w| w.worker_id == id) => id,
                    _ => format!("w{}", self.next_worker),
                };
                self.next_worker += 1;
                self.started_at.get_or_insert(now);
                self.workers.insert(
                    conn,
                    WorkerState {
                        conn,
                        worker_id: worker_id.clone(),
                        agent,
                        cores,
                        window: self.config.window,
                        in_flight: 0,
                        completed: 0,
                        busy_ms: 0.0,
                        last_pong: now,
                        connected_at: now,
                    },
                );
                self.refresh_high_water();
                vec![Action::Send(
                    conn,
                    Message::Welcome {
                        worker_id,
                        task: self.config.task.clone(),
                        window: self.config.window,
                    },
                )]
            }
            // Results still queued from a connection that was already dropped.
            Message::Result { lease_id, index, .. } | Message::ItemError { lease_id, index, .. } => {
                self.settle_stale(&lease_id, index);
                Vec::new()
            }
            Message::Bye {} | Message::Pong { .. } => Vec::new(),
            other => {
                log::warn!("{conn}: {} before hello", other.kind());
                vec![Action::Close(conn)]
            }
        }
    }

    fn settle_stale(&mut self, lease_id: &str, index: u64) {
        self.stale += 1;
        if let Ok(lease) = lease_id.parse::<LeaseId>() {
            if let Ok(s) = self.lender.settle(lease, [(index, Err(String::new()))]) {
                debug_assert!(s.accepted == 0 || !s.stale);
                self.duplicates += s.duplicates as u64;
            }
        }
    }

    fn settle(&mut self, conn: ConnId, lease_id: &str, index: u64, outcome: Outcome, elapsed_ms: f64) -> Vec<Action> {
        let Ok(lease) = lease_id.parse::<LeaseId>() else {
            log::warn!("{conn}: malformed lease id {lease_id:?}");
            return self.disconnect(conn);
        };
        let settlement = match self.lender.settle(lease, [(index, outcome)]) {
            Ok(s) => s,
            Err(LenderError::ForeignIndex { .. }) => {
                log::warn!("{conn}: result for index {index} outside lease {lease}");
                return self.disconnect(conn);
            }
            Err(LenderError::InputClosed) => unreachable!("settle never reports a closed input"),
        };
        self.duplicates += settlement.duplicates as u64;
        if settlement.stale {
            self.stale += 1;
        }
        let holder_conn = settlement.holder.map(|h| ConnId(h.0)).unwrap_or(conn);
        if let Some(w) = self.workers.get_mut(&conn) {
            w.completed += settlement.accepted as u64;
            w.busy_ms += elapsed_ms;
        }
        self.sync_in_flight(holder_conn);
        if !settlement.stale {
            self.log(SchedEvent::Settle {
                conn,
                lease,
                index,
                accepted: settlement.accepted > 0,
            });
        }
        self.collect();
        Vec::new()
    }

    fn collect(&mut self) {
        for (index, outcome) in self.lender.collect_ready() {
            self.log(SchedEvent::Emit { index });
            self.ready.push_back((index, outcome));
        }
    }

    /// The transport lost `conn`, or the scheduler decided to drop it.
    /// Revokes its leases; the items are lent again on the next [`pump`].
    ///
    /// [`pump`]: Scheduler::pump
    pub fn on_disconnect(&mut self, conn: ConnId) {
        let Some(worker) = self.workers.remove(&conn) else {
            return;
        };
        let requeued = self.lender.revoke(conn.holder());
        self.reprocessed += requeued.len() as u64;
        self.log(SchedEvent::Revoke { conn, requeued });
        self.departed.push(WorkerState { in_flight: 0, ..worker });
        self.refresh_high_water();
    }

    fn disconnect(&mut self, conn: ConnId) -> Vec<Action> {
        self.on_disconnect(conn);
        vec![Action::Close(conn)]
    }

    /// Pings every worker and drops those not heard from for
    /// `heartbeat_misses × heartbeat_period`.
    pub fn on_tick(&mut self, now: u64) -> Vec<Action> {
        let timeout = self.config.heartbeat_period.as_millis() as u64 * u64::from(self.config.heartbeat_misses);
        let mut dead = Vec::new();
        let mut alive = Vec::new();
        for w in self.workers.values() {
            if now.saturating_sub(w.last_pong) > timeout {
                dead.push(w.conn);
            } else {
                alive.push(w.conn);
            }
        }
        let mut actions: Vec<Action> = alive
            .into_iter()
            .map(|conn| Action::Send(conn, Message::Ping { t: now }))
            .collect();
        for conn in dead {
            log::info!("{conn}: missed heartbeats, revoking");
            actions.extend(self.disconnect(conn));
        }
        actions
    }

    fn wants_input(&self) -> bool {
        let windows: usize = self.workers.values().map(|w| w.window as usize).sum();
        !self.lender.is_input_closed() && self.lender.pending_len() < windows.max(1) && self.lender.below_high_water()
    }

    /// Whether [`pump`](Scheduler::pump) would ask the input for another value.
    pub fn needs_input(&self) -> bool {
        self.wants_input()
    }

    /// Reads input as far as backpressure allows and tops every worker up to
    /// its window.
    pub fn pump(&mut self, pull: &mut dyn FnMut() -> Pull) -> Vec<Action> {
        let mut actions = Vec::new();
        loop {
            while self.wants_input() {
                match pull() {
                    Pull::Item(value) => {
                        self.lender.submit(value).expect("input is open");
                    }
                    Pull::Wait => break,
                    Pull::End => {
                        self.lender.close_input();
                    }
                }
            }
            let mut lent_any = false;
            let conns: Vec<ConnId> = self.workers.keys().copied().collect();
            for conn in conns {
                let window = self.workers[&conn].window as usize;
                let held = self.lender.held_by(conn.holder());
                if held >= window {
                    continue;
                }
                let Some(lease) = self.lender.lend(conn.holder(), window - held) else {
                    continue;
                };
                lent_any = true;
                let indices = lease.indices();
                let items = lease
                    .items
                    .into_iter()
                    .map(|item| LeaseItem {
                        index: item.index,
                        value: item.payload,
                    })
                    .collect();
                self.sync_in_flight(conn);
                self.log(SchedEvent::Lend {
                    conn,
                    lease: lease.id,
                    indices,
                });
                actions.push(Action::Send(
                    conn,
                    Message::Lease {
                        lease_id: lease.id.to_string(),
                        items,
                    },
                ));
            }
            if !lent_any || !self.wants_input() {
                break;
            }
        }
        actions
    }

    /// Results ready to be written, in index order.
    pub fn take_ready(&mut self) -> Vec<(u64, Outcome)> {
        self.ready.drain(..).collect()
    }

    /// Every input value has been read and every result handed out.
    pub fn is_done(&self) -> bool {
        self.lender.is_done() && self.ready.is_empty()
    }

    pub fn report(&self, wall: Duration) -> ThroughputReport {
        make_report(&self.all_workers(), wall, self.duplicates, self.reprocessed)
    }
}
