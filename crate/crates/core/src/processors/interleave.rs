//! Random-interleaving test of the stream lender.
//!
//! A seeded generator plays the role of 2 to 4 concurrent holders and of the
//! input stream, issuing only events whose preconditions hold. After every
//! event the checker compares the lender against a shadow model it maintains
//! from the observable results alone, so a lender that lies about its own
//! state is still caught.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::lender::{HolderId, LeaseId, Mutant, StreamLender};
use crate::splitmix::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleaveReport {
    pub seed: u64,
    pub violations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<String>,
}

/// The map function the simulated holders apply.
fn mapped(index: u64) -> u64 {
    index.wrapping_mul(3).wrapping_add(1)
}

struct Checker {
    seed: u64,
    lender: StreamLender<u64, u64>,
    holders: u64,
    rng: SplitMix64,
    // shadow model
    held: HashMap<u64, LeaseId>,
    lease_holder: HashMap<LeaseId, HolderId>,
    revoked: Vec<(LeaseId, Vec<u64>)>,
    expected_next: u64,
    emitted: BTreeSet<u64>,
    // reporting
    events: Vec<String>,
    violations: u64,
    first_violation: Option<String>,
}

impl Checker {
    fn new(seed: u64, mutant: Option<Mutant>) -> Self {
        let mut rng = SplitMix64::new(seed);
        let holders = 2 + rng.below(3);
        let high_water = 4 + rng.below(13);
        Self {
            seed,
            lender: StreamLender::with_mutant(high_water, mutant),
            holders,
            rng,
            held: HashMap::new(),
            lease_holder: HashMap::new(),
            revoked: Vec::new(),
            expected_next: 0,
            emitted: BTreeSet::new(),
            events: Vec::new(),
            violations: 0,
            first_violation: None,
        }
    }

    fn random_holder(&mut self) -> HolderId {
        HolderId(self.rng.below(self.holders))
    }

    fn step(&mut self) {
        let mut found = BTreeSet::new();
        let roll = self.rng.below(100);
        let closed = self.lender.is_input_closed();
        match roll {
            0..=24 if !closed => self.submit(),
            0..=49 => {
                let holder = self.random_holder();
                let capacity = 1 + self.rng.below(3) as usize;
                self.lend(holder, capacity, &mut found);
            }
            50..=74 => self.settle_random(&mut found),
            75..=81 => {
                let holder = self.random_holder();
                self.revoke(holder);
            }
            82..=93 => self.collect(&mut found),
            94..=97 => self.stale_settle(&mut found),
            _ => {
                if closed {
                    self.collect(&mut found);
                } else {
                    self.close(&mut found);
                }
            }
        }
        self.check_state(&mut found);
        self.record(found);
    }

    fn submit(&mut self) {
        let next = self.lender.submitted();
        match self.lender.submit(next) {
            Ok(index) => self.events.push(format!("submit->{index}")),
            Err(e) => self.events.push(format!("submit->error({e})")),
        }
    }

    fn lend(&mut self, holder: HolderId, capacity: usize, found: &mut BTreeSet<String>) {
        let limit = self.lender.next_emit() + self.lender.high_water();
        let Some(lease) = self.lender.lend(holder, capacity) else {
            self.events.push(format!("lend({holder},{capacity})->none"));
            return;
        };
        self.events
            .push(format!("lend({holder},{capacity})->{}{:?}", lease.id, lease.indices()));
        self.lease_holder.insert(lease.id, holder);
        for item in &lease.items {
            if item.index >= limit {
                found.insert(format!("backpressure({})", item.index));
            }
            if item.payload != item.index {
                found.insert(format!("wrong-payload({})", item.index));
            }
            if self.emitted.contains(&item.index) {
                found.insert(format!("relend-after-emit({})", item.index));
            }
            if let Some(previous) = self.held.insert(item.index, lease.id) {
                found.insert(format!("concurrent-hold({})", item.index));
                // keep the older holding visible to the shadow model
                self.held.insert(item.index, previous);
            }
        }
    }

    fn settle(&mut self, lease: LeaseId, indices: Vec<u64>, found: &mut BTreeSet<String>) {
        let results: Vec<(u64, u64)> = indices.iter().map(|i| (*i, mapped(*i))).collect();
        match self.lender.settle(lease, results) {
            Ok(s) => {
                self.events.push(format!(
                    "settle({lease},{indices:?})->accepted={},dup={},stale={}",
                    s.accepted, s.duplicates, s.stale
                ));
                if !s.stale {
                    for index in &indices {
                        if self.held.get(index) == Some(&lease) {
                            self.held.remove(index);
                        }
                    }
                } else if s.accepted != 0 {
                    found.insert(format!("stale-accepted({lease})"));
                }
            }
            Err(e) => {
                self.events.push(format!("settle({lease},{indices:?})->error"));
                found.insert(format!("settle-rejected({e})"));
            }
        }
    }

    fn settle_random(&mut self, found: &mut BTreeSet<String>) {
        let open = self.lender.outstanding_leases();
        if open.is_empty() {
            self.events.push("settle->nothing outstanding".into());
            return;
        }
        let (id, _, indices) = open[self.rng.below(open.len() as u64) as usize].clone();
        let chosen: Vec<u64> = indices.iter().copied().filter(|_| self.rng.chance(2, 3)).collect();
        let chosen = if chosen.is_empty() { vec![indices[0]] } else { chosen };
        self.settle(id, chosen, found);
    }

    fn stale_settle(&mut self, found: &mut BTreeSet<String>) {
        if self.revoked.is_empty() {
            self.events.push("stale-settle->none revoked".into());
            return;
        }
        let pick = self.rng.below(self.revoked.len() as u64) as usize;
        let (id, indices) = self.revoked[pick].clone();
        self.settle(id, indices, found);
    }

    fn revoke(&mut self, holder: HolderId) {
        let open: Vec<(LeaseId, Vec<u64>)> = self
            .lender
            .outstanding_leases()
            .into_iter()
            .filter(|(_, h, _)| *h == holder)
            .map(|(id, _, indices)| (id, indices))
            .collect();
        let requeued = self.lender.revoke(holder);
        self.events.push(format!("revoke({holder})->{requeued:?}"));
        for (id, indices) in open {
            self.revoked.push((id, indices));
        }
        let lease_holder = &self.lease_holder;
        self.held.retain(|_, lease| lease_holder.get(lease) != Some(&holder));
    }

    fn collect(&mut self, found: &mut BTreeSet<String>) {
        let ready = self.lender.collect_ready();
        self.events.push(format!(
            "collect->{:?}",
            ready.iter().map(|(i, _)| *i).collect::<Vec<_>>()
        ));
        for (index, value) in ready {
            if !self.emitted.insert(index) {
                found.insert(format!("duplicate-emit({index})"));
            } else if index != self.expected_next {
                found.insert(format!("out-of-order-emit({index})"));
            }
            if value != mapped(index) {
                found.insert(format!("wrong-value({index})"));
            }
            self.expected_next = self.expected_next.max(index + 1);
        }
    }

    fn close(&mut self, found: &mut BTreeSet<String>) {
        let done = self.lender.close_input();
        self.events.push(format!("close->{done}"));
        if done && (self.emitted.len() as u64) != self.lender.submitted() {
            found.insert("premature-done".into());
        }
    }

    fn check_state(&mut self, found: &mut BTreeSet<String>) {
        let lender = &self.lender;
        let pending = lender.pending_len() as u64;
        let lent = lender.outstanding_items() as u64;
        let settled = lender.settled_count();
        if lender.submitted() != pending + lent + settled {
            found.insert(format!(
                "conservation(submitted={},pending={pending},lent={lent},settled={settled})",
                lender.submitted()
            ));
        }
        let mut seen = BTreeSet::new();
        for (_, _, indices) in lender.outstanding_leases() {
            for index in indices {
                if !seen.insert(index) {
                    found.insert(format!("concurrent-hold({index})"));
                }
                if lender.is_settled(index) {
                    found.insert(format!("held-and-settled({index})"));
                }
            }
        }
        for index in lender.pending_indices() {
            if seen.contains(&index) {
                found.insert(format!("pending-and-held({index})"));
            }
            if lender.is_settled(index) {
                found.insert(format!("pending-and-settled({index})"));
            }
        }
        if lender.next_emit() != self.expected_next {
            found.insert(format!(
                "emit-cursor(lender={},observed={})",
                lender.next_emit(),
                self.expected_next
            ));
        }
    }

    fn record(&mut self, found: BTreeSet<String>) {
        if found.is_empty() {
            return;
        }
        self.violations += found.len() as u64;
        if self.first_violation.is_none() {
            let mut text = format!(
                "seed={} op={}: {}; trace:",
                self.seed,
                self.events.len() - 1,
                found.into_iter().collect::<Vec<_>>().join(", ")
            );
            for event in &self.events {
                let _ = write!(text, " {event};");
            }
            self.first_violation = Some(text);
        }
    }

    /// Closes the input and lets holder 0 finish everything, checking after
    /// each event that the stream completes with every index emitted once.
    fn drain(&mut self) {
        if !self.lender.is_input_closed() {
            let mut found = BTreeSet::new();
            self.close(&mut found);
            self.check_state(&mut found);
            self.record(found);
        }
        let budget = 4 * self.lender.submitted() + 16;
        for _ in 0..budget {
            if self.lender.is_done() {
                break;
            }
            let mut found = BTreeSet::new();
            let open = self.lender.outstanding_leases();
            if let Some((id, _, indices)) = open.into_iter().next() {
                self.settle(id, indices, &mut found);
            } else if self.lender.pending_len() > 0 {
                self.lend(HolderId(0), 8, &mut found);
            }
            self.collect(&mut found);
            self.check_state(&mut found);
            self.record(found);
        }
        let mut found = BTreeSet::new();
        if !self.lender.is_done() {
            found.insert("not-done-after-drain".into());
        }
        if let Some(missing) = (0..self.lender.submitted()).find(|i| !self.emitted.contains(i)) {
            found.insert(format!("missing-emit({missing})"));
        }
        self.record(found);
    }
}

/// Runs `ops` random events against a fresh lender, then drains it.
pub fn interleave_check(seed: u64, ops: u64, mutant: Option<Mutant>) -> InterleaveReport {
    let mut checker = Checker::new(seed, mutant);
    for _ in 0..ops {
        checker.step();
    }
    checker.drain();
    InterleaveReport {
        seed,
        violations: checker.violations,
        first_violation: checker.first_violation,
    }
}
