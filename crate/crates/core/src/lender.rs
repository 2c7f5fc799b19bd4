//! Lending of an input stream to concurrent holders, with ordered, exactly-once
//! collection of the mapped results.
//!
//! [`StreamLender`] is a plain sequential state machine. It never reads a clock
//! and never draws random numbers, so a given sequence of calls always yields
//! the same state. Everything that is concurrent (sockets, timers, simulated
//! workers) lives in the caller, which owns the lender and applies events one
//! at a time.
//!
//! Every submitted index is, at any point in time, in exactly one of three
//! places: the pending queue, one outstanding lease, or the settled set. The
//! settled set is `[0, next_emit)` plus the keys of the reorder buffer, so it
//! never grows beyond the reorder window.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

/// Default bound on how far lending may run ahead of ordered emission.
pub const DEFAULT_HIGH_WATER: u64 = 1024;

/// Identifies the holder of a lease (one worker connection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HolderId(pub u64);

impl fmt::Display for HolderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

/// Identifies a lease. Rendered on the wire as `L<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeaseId(pub u64);

impl fmt::Display for LeaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

impl std::str::FromStr for LeaseId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let digits = s.strip_prefix('L').ok_or(())?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(());
        }
        digits.parse().map(LeaseId).map_err(|_| ())
    }
}

/// An input value tagged with its position in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Item<T> {
    pub index: u64,
    pub payload: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaseState {
    Outstanding,
    Settled,
    Revoked,
}

/// A batch of items lent to one holder.
#[derive(Debug, Clone, PartialEq)]
pub struct Lease<T> {
    pub id: LeaseId,
    pub holder: HolderId,
    pub items: Vec<Item<T>>,
    pub state: LeaseState,
}

impl<T> Lease<T> {
    pub fn indices(&self) -> Vec<u64> {
        self.items.iter().map(|item| item.index).collect()
    }
}

/// Deliberately broken lending policies, used to check that the property
/// checkers actually catch the bugs they are meant to catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutant {
    /// When nothing is pending, hand out another holder's outstanding items
    /// again without revoking the original lease.
    RelendWithoutRevoke,
}

impl Mutant {
    pub const ALL: [Mutant; 1] = [Mutant::RelendWithoutRevoke];

    pub fn name(self) -> &'static str {
        match self {
            Mutant::RelendWithoutRevoke => "relent-without-revoke",
        }
    }

    pub fn from_name(name: &str) -> Option<Mutant> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LenderError {
    #[error("input is closed; no further values may be submitted")]
    InputClosed,
    #[error("index {index} is not part of lease {lease}")]
    ForeignIndex { lease: LeaseId, index: u64 },
}

/// What happened to the results handed to [`StreamLender::settle`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Settlement {
    /// Results recorded for the first time.
    pub accepted: usize,
    /// Results for indices that were already settled, discarded.
    pub duplicates: usize,
    /// The lease was unknown or already revoked (a late message from a holder
    /// that lost its lease). Nothing was recorded.
    pub stale: bool,
    /// Holder of the lease, when the lease was known.
    pub holder: Option<HolderId>,
}

#[derive(Debug, Clone)]
struct OpenLease<T> {
    holder: HolderId,
    items: Vec<Item<T>>,
    done: Vec<bool>,
    remaining: usize,
}

/// The lending and reordering state machine.
#[derive(Debug, Clone)]
pub struct StreamLender<T, R> {
    // Pending items keyed by index. Fresh submissions always carry the highest
    // index so far, and re-queued items are lower than any fresh one, so the
    // first entry is both the queue head and the lowest pending index.
    pending: BTreeMap<u64, T>,
    outstanding: BTreeMap<LeaseId, OpenLease<T>>,
    holder_load: HashMap<HolderId, usize>,
    reorder: BTreeMap<u64, R>,
    next_emit: u64,
    submitted: u64,
    next_lease: u64,
    input_closed: bool,
    high_water: u64,
    mutant: Option<Mutant>,
}

impl<T: Clone, R> Default for StreamLender<T, R> {
    fn default() -> Self {
        Self::new(DEFAULT_HIGH_WATER)
    }
}

impl<T: Clone, R> StreamLender<T, R> {
    pub fn new(high_water: u64) -> Self {
        assert!(high_water > 0, "high water mark must be positive");
        Self {
            pending: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            holder_load: HashMap::new(),
            reorder: BTreeMap::new(),
            next_emit: 0,
            submitted: 0,
            next_lease: 0,
            input_closed: false,
            high_water,
            mutant: None,
        }
    }

    /// A lender running one of the known-bad policies.
    pub fn with_mutant(high_water: u64, mutant: Option<Mutant>) -> Self {
        Self {
            mutant,
            ..Self::new(high_water)
        }
    }

    pub fn submit(&mut self, payload: T) -> Result<u64, LenderError> {
        if self.input_closed {
            return Err(LenderError::InputClosed);
        }
        let index = self.submitted;
        self.submitted += 1;
        self.pending.insert(index, payload);
        Ok(index)
    }

    /// Lends up to `capacity` items from the head of the pending queue.
    ///
    /// Returns `None` when nothing is pending or when the head index is at or
    /// beyond `next_emit + high_water`.
    pub fn lend(&mut self, holder: HolderId, capacity: usize) -> Option<Lease<T>> {
        assert!(capacity >= 1, "lend capacity must be at least 1");
        let limit = self.next_emit.saturating_add(self.high_water);
        let mut items = Vec::new();
        while items.len() < capacity {
            let Some(entry) = self.pending.first_entry() else {
                break;
            };
            if *entry.key() >= limit {
                break;
            }
            let (index, payload) = entry.remove_entry();
            items.push(Item { index, payload });
        }
        if items.is_empty() {
            if self.mutant == Some(Mutant::RelendWithoutRevoke) && self.pending.is_empty() {
                items = self.steal_outstanding(holder, capacity);
            }
            if items.is_empty() {
                return None;
            }
        }
        let id = LeaseId(self.next_lease);
        self.next_lease += 1;
        *self.holder_load.entry(holder).or_default() += items.len();
        let count = items.len();
        self.outstanding.insert(
            id,
            OpenLease {
                holder,
                items: items.clone(),
                done: vec![false; count],
                remaining: count,
            },
        );
        Some(Lease {
            id,
            holder,
            items,
            state: LeaseState::Outstanding,
        })
    }

    fn steal_outstanding(&self, holder: HolderId, capacity: usize) -> Vec<Item<T>> {
        self.outstanding
            .values()
            .filter(|lease| lease.holder != holder && lease.remaining > 0)
            .map(|lease| -> Vec<Item<T>> {
                lease
                    .items
                    .iter()
                    .zip(&lease.done)
                    .filter(|(item, done)| !**done && !self.is_settled(item.index))
                    .map(|(item, _)| item.clone())
                    .take(capacity)
                    .collect()
            })
            .find(|items| !items.is_empty())
            .unwrap_or_default()
    }

    /// Records results for items of `lease`.
    ///
    /// A lease may be settled piecewise; it leaves the outstanding set once
    /// every item has a result. The first result recorded for an index wins and
    /// later ones are counted as duplicates.
    pub fn settle(
        &mut self,
        lease: LeaseId,
        results: impl IntoIterator<Item = (u64, R)>,
    ) -> Result<Settlement, LenderError> {
        let Some(open) = self.outstanding.get_mut(&lease) else {
            let mut settlement = Settlement {
                stale: true,
                ..Settlement::default()
            };
            for (index, _) in results {
                if index < self.next_emit || self.reorder.contains_key(&index) {
                    settlement.duplicates += 1;
                }
            }
            return Ok(settlement);
        };
        let results: Vec<(u64, R)> = results.into_iter().collect();
        let mut slots = Vec::with_capacity(results.len());
        for (index, _) in &results {
            match open.items.iter().position(|item| item.index == *index) {
                Some(slot) => slots.push(slot),
                None => return Err(LenderError::ForeignIndex { lease, index: *index }),
            }
        }

        let holder = open.holder;
        let mut settlement = Settlement {
            holder: Some(holder),
            ..Settlement::default()
        };
        let mut released = 0;
        for ((index, value), slot) in results.into_iter().zip(slots) {
            if !open.done[slot] {
                open.done[slot] = true;
                open.remaining -= 1;
                released += 1;
            }
            let already = index < self.next_emit || self.reorder.contains_key(&index);
            if already {
                settlement.duplicates += 1;
            } else {
                self.reorder.insert(index, value);
                settlement.accepted += 1;
            }
        }
        let finished = open.remaining == 0;
        if finished {
            self.outstanding.remove(&lease);
        }
        if let Some(load) = self.holder_load.get_mut(&holder) {
            *load -= released;
            if *load == 0 {
                self.holder_load.remove(&holder);
            }
        }
        Ok(settlement)
    }

    /// Revokes every outstanding lease of `holder` and puts its unsettled
    /// items back at the front of the pending queue. Returns the re-queued
    /// indices in ascending order.
    pub fn revoke(&mut self, holder: HolderId) -> Vec<u64> {
        let ids: Vec<LeaseId> = self
            .outstanding
            .iter()
            .filter(|(_, lease)| lease.holder == holder)
            .map(|(id, _)| *id)
            .collect();
        let mut requeued = Vec::new();
        for id in ids {
            let lease = self.outstanding.remove(&id).expect("lease listed above");
            for (item, done) in lease.items.into_iter().zip(lease.done) {
                if done || item.index < self.next_emit || self.reorder.contains_key(&item.index) {
                    continue;
                }
                // A mutant lender may have the same index in several leases.
                if self.pending.contains_key(&item.index) || self.is_lent(item.index) {
                    continue;
                }
                requeued.push(item.index);
                self.pending.insert(item.index, item.payload);
            }
        }
        self.holder_load.remove(&holder);
        requeued.sort_unstable();
        requeued
    }

    fn is_lent(&self, index: u64) -> bool {
        self.outstanding.values().any(|lease| {
            lease
                .items
                .iter()
                .zip(&lease.done)
                .any(|(item, done)| !done && item.index == index)
        })
    }

    /// Removes and returns the contiguous run of results starting at
    /// `next_emit`.
    pub fn collect_ready(&mut self) -> Vec<(u64, R)> {
        let mut ready = Vec::new();
        while let Some(value) = self.reorder.remove(&self.next_emit) {
            ready.push((self.next_emit, value));
            self.next_emit += 1;
        }
        ready
    }

    /// Marks the end of the input. Returns whether the stream is complete.
    pub fn close_input(&mut self) -> bool {
        self.input_closed = true;
        self.is_done()
    }

    pub fn is_done(&self) -> bool {
        self.input_closed && self.pending.is_empty() && self.outstanding.is_empty() && self.next_emit == self.submitted
    }

    pub fn is_input_closed(&self) -> bool {
        self.input_closed
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn next_emit(&self) -> u64 {
        self.next_emit
    }

    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn set_high_water(&mut self, high_water: u64) {
        assert!(high_water > 0, "high water mark must be positive");
        self.high_water = high_water;
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.pending.keys().copied()
    }

    /// Whether the next index to be submitted could be lent right away.
    pub fn below_high_water(&self) -> bool {
        self.submitted < self.next_emit.saturating_add(self.high_water)
    }

    /// Number of unsettled items across all outstanding leases.
    pub fn outstanding_items(&self) -> usize {
        self.outstanding.values().map(|lease| lease.remaining).sum()
    }

    /// Number of unsettled items lent to `holder`.
    pub fn held_by(&self, holder: HolderId) -> usize {
        self.holder_load.get(&holder).copied().unwrap_or(0)
    }

    /// Indices settled so far, emitted or waiting in the reorder buffer.
    pub fn settled_count(&self) -> u64 {
        self.next_emit + self.reorder.len() as u64
    }

    pub fn is_settled(&self, index: u64) -> bool {
        index < self.next_emit || self.reorder.contains_key(&index)
    }

    pub fn reorder_len(&self) -> usize {
        self.reorder.len()
    }

    /// Outstanding leases in id order, with only their unsettled indices.
    pub fn outstanding_leases(&self) -> Vec<(LeaseId, HolderId, Vec<u64>)> {
        self.outstanding
            .iter()
            .map(|(id, lease)| {
                let open = lease
                    .items
                    .iter()
                    .zip(&lease.done)
                    .filter(|(_, done)| !**done)
                    .map(|(item, _)| item.index)
                    .collect();
                (*id, lease.holder, open)
            })
            .collect()
    }
}
