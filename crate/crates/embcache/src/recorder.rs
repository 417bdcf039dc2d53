//! Simulation-mode invariant recorder.
//!
//! Clients report every protocol event (reads, writes, fetches, evictions,
//! clock checks) together with the clocks they observed. The recorder checks
//! two families of invariants incrementally:
//!
//! * per-read validity: every served read satisfied `c_c <= c_s + s` and
//!   `c_g_observed <= c_c + s` at its validation instant;
//! * the pairwise clock bound: among reads of one key that observed the same
//!   global clock, the current clocks of any two workers may differ by at
//!   most `2s`. (Two validated replicas each sit within `s` of the global
//!   clock they observed, so replicas compared against the same observation
//!   are within `2s` of each other. Write events advance `c_c` past the
//!   validated point and are therefore excluded from the pairwise check.)
//!
//! It also keeps an independent ledger of every delta the clients pushed, so
//! a completed run can verify that each global embedding equals its
//! initialization plus the sum of all logged deltas.

use crate::embedding::{
    init_embedding, ClockValue, EmbeddingKey, EmbeddingVector, StalenessBound, UpdateDelta,
};
use serde::Serialize;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Read,
    Write,
    Evict,
    Fetch,
    ClockCheck,
}

/// One recorded protocol event. Events are totally ordered by `sim_tick`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Event {
    pub event: EventKind,
    pub worker_id: usize,
    pub key: u64,
    pub c_s: u64,
    pub c_c: u64,
    pub c_g_observed: Option<u64>,
    pub sim_tick: u64,
}

#[derive(Debug)]
pub struct Recorder {
    staleness: StalenessBound,
    keep_events: bool,
    events: Vec<Event>,
    tick: u64,
    counts: EventCounts,
    condition_violations: u64,
    lemma_violations: u64,
    /// (key, observed c_g) -> (min c_c, max c_c) over read events.
    lemma_groups: HashMap<(u64, u64), (u64, u64)>,
    /// Client-sent deltas per key, replicated with the same f32 accumulation
    /// the server performs.
    audit: HashMap<EmbeddingKey, Vec<f32>>,
    first_failures: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EventCounts {
    pub reads: u64,
    pub writes: u64,
    pub evicts: u64,
    pub fetches: u64,
    pub clock_checks: u64,
}

impl EventCounts {
    pub fn total(&self) -> u64 {
        self.reads + self.writes + self.evicts + self.fetches + self.clock_checks
    }

    pub fn read_write(&self) -> u64 {
        self.reads + self.writes
    }
}

pub type RecorderHandle = Rc<RefCell<Recorder>>;

impl Recorder {
    pub fn new(staleness: StalenessBound, keep_events: bool) -> RecorderHandle {
        Rc::new(RefCell::new(Self {
            staleness,
            keep_events,
            events: Vec::new(),
            tick: 0,
            counts: EventCounts::default(),
            condition_violations: 0,
            lemma_violations: 0,
            lemma_groups: HashMap::new(),
            audit: HashMap::new(),
            first_failures: Vec::new(),
        }))
    }

    pub fn record(
        &mut self,
        event: EventKind,
        worker_id: usize,
        key: EmbeddingKey,
        c_s: ClockValue,
        c_c: ClockValue,
        c_g_observed: Option<ClockValue>,
    ) {
        self.tick += 1;
        match event {
            EventKind::Read => self.counts.reads += 1,
            EventKind::Write => self.counts.writes += 1,
            EventKind::Evict => self.counts.evicts += 1,
            EventKind::Fetch => self.counts.fetches += 1,
            EventKind::ClockCheck => self.counts.clock_checks += 1,
        }
        if event == EventKind::Read {
            self.check_read(worker_id, key, c_s, c_c, c_g_observed);
        }
        if self.keep_events {
            self.events.push(Event {
                event,
                worker_id,
                key: key.0,
                c_s: c_s.0,
                c_c: c_c.0,
                c_g_observed: c_g_observed.map(|c| c.0),
                sim_tick: self.tick,
            });
        }
    }

    fn check_read(
        &mut self,
        worker: usize,
        key: EmbeddingKey,
        c_s: ClockValue,
        c_c: ClockValue,
        c_g_observed: Option<ClockValue>,
    ) {
        let Some(s) = self.staleness.finite() else {
            return;
        };
        let Some(c_g) = c_g_observed else {
            // Reads under a finite bound always carry an observation.
            self.condition_violations += 1;
            self.note(format!(
                "read of key {key} by worker {worker} served without an observed global clock"
            ));
            return;
        };
        if c_c.0 > c_s.0 + s || c_g.0 > c_c.0 + s {
            self.condition_violations += 1;
            self.note(format!(
                "validity conditions violated at read: key {key} worker {worker} \
                 c_s={c_s} c_c={c_c} c_g={c_g} s={s}"
            ));
        }
        let group = self.lemma_groups.entry((key.0, c_g.0)).or_insert((c_c.0, c_c.0));
        group.0 = group.0.min(c_c.0);
        group.1 = group.1.max(c_c.0);
        if group.1 - group.0 > 2 * s {
            self.lemma_violations += 1;
            let (lo, hi) = *group;
            self.note(format!(
                "clock bound violated: key {key} at observed c_g={c_g} has replica \
                 clocks spanning [{lo}, {hi}] > 2s with s={s}"
            ));
        }
    }

    fn note(&mut self, msg: String) {
        if self.first_failures.len() < 16 {
            self.first_failures.push(msg);
        }
    }

    /// Ledger a delta that a client pushed to the server (evict, sync, or
    /// flush), accumulated in the same f32 order the server applies.
    pub fn record_pushed_delta(&mut self, key: EmbeddingKey, delta: &UpdateDelta) {
        let acc = self
            .audit
            .entry(key)
            .or_insert_with(|| vec![0.0; delta.len()]);
        for (a, d) in acc.iter_mut().zip(delta.values()) {
            *a += d;
        }
    }

    pub fn counts(&self) -> EventCounts {
        self.counts
    }

    pub fn condition_violations(&self) -> u64 {
        self.condition_violations
    }

    pub fn lemma_violations(&self) -> u64 {
        self.lemma_violations
    }

    pub fn total_violations(&self) -> u64 {
        self.condition_violations + self.lemma_violations
    }

    pub fn failures(&self) -> &[String] {
        &self.first_failures
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Check that every global embedding equals its initialization plus the
    /// sum of all logged deltas, within `tol` per element. Returns the keys
    /// that fail.
    pub fn verify_conservation(
        &self,
        globals: &[(EmbeddingKey, EmbeddingVector, ClockValue)],
        dim: usize,
        init_seed: u64,
        tol: f32,
    ) -> Vec<EmbeddingKey> {
        let zero = vec![0.0f32; dim];
        let mut bad = Vec::new();
        for (key, vector, _) in globals {
            let init = init_embedding(*key, dim, init_seed);
            let pushed = self.audit.get(key).map_or(&zero, |v| v);
            let ok = vector
                .values()
                .iter()
                .zip(init.values())
                .zip(pushed)
                .all(|((&got, &i), &d)| (got - (i + d)).abs() <= tol);
            if !ok {
                bad.push(*key);
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_reads_pass_and_group_bound_holds() {
        let rec = Recorder::new(StalenessBound::Finite(1), true);
        let mut r = rec.borrow_mut();
        let k = EmbeddingKey(1);
        // Two workers validated against the same c_g=10, clocks 9 and 11: spread 2 = 2s.
        r.record(EventKind::Read, 0, k, ClockValue(9), ClockValue(9), Some(ClockValue(10)));
        r.record(EventKind::Read, 1, k, ClockValue(10), ClockValue(11), Some(ClockValue(10)));
        assert_eq!(r.total_violations(), 0);
        assert_eq!(r.counts().reads, 2);
        assert_eq!(r.events().len(), 2);
    }

    #[test]
    fn condition_violation_detected() {
        let rec = Recorder::new(StalenessBound::Finite(0), false);
        let mut r = rec.borrow_mut();
        // c_c ran ahead of c_s with s=0.
        r.record(
            EventKind::Read,
            0,
            EmbeddingKey(5),
            ClockValue(3),
            ClockValue(4),
            Some(ClockValue(4)),
        );
        assert_eq!(r.condition_violations(), 1);
    }

    #[test]
    fn lemma_violation_detected_within_group() {
        let rec = Recorder::new(StalenessBound::Finite(1), false);
        let mut r = rec.borrow_mut();
        let k = EmbeddingKey(2);
        r.record(EventKind::Read, 0, k, ClockValue(9), ClockValue(9), Some(ClockValue(10)));
        // Same observed c_g, clock 12: spread 3 > 2s=2. Also violates cond 1.
        r.record(EventKind::Read, 1, k, ClockValue(9), ClockValue(12), Some(ClockValue(10)));
        assert!(r.lemma_violations() >= 1);
    }

    #[test]
    fn infinite_staleness_checks_nothing() {
        let rec = Recorder::new(StalenessBound::Infinite, false);
        let mut r = rec.borrow_mut();
        r.record(
            EventKind::Read,
            0,
            EmbeddingKey(1),
            ClockValue(0),
            ClockValue(500),
            None,
        );
        assert_eq!(r.total_violations(), 0);
    }

    #[test]
    fn conservation_ledger_matches_server_arithmetic() {
        let rec = Recorder::new(StalenessBound::Infinite, false);
        let mut r = rec.borrow_mut();
        let k = EmbeddingKey(9);
        let d1 = UpdateDelta::from_vec(vec![0.25, -0.5]);
        let d2 = UpdateDelta::from_vec(vec![0.125, 0.75]);
        r.record_pushed_delta(k, &d1);
        r.record_pushed_delta(k, &d2);

        let mut table = crate::server::GlobalTable::new(2, 77);
        table.handle_fetch(&[k]);
        table
            .handle_evict(&[crate::cache::EvictRecord {
                key: k,
                delta: d1,
                c_c: ClockValue(1),
            }])
            .unwrap();
        table
            .handle_evict(&[crate::cache::EvictRecord {
                key: k,
                delta: d2,
                c_c: ClockValue(2),
            }])
            .unwrap();
        let bad = r.verify_conservation(&table.snapshot(), 2, 77, 1e-5);
        assert!(bad.is_empty());
    }

    #[test]
    fn conservation_detects_a_dropped_delta() {
        let rec = Recorder::new(StalenessBound::Infinite, false);
        let mut r = rec.borrow_mut();
        let k = EmbeddingKey(9);
        r.record_pushed_delta(k, &UpdateDelta::from_vec(vec![1.0]));
        let mut table = crate::server::GlobalTable::new(1, 3);
        table.handle_fetch(&[k]); // delta never applied
        let bad = r.verify_conservation(&table.snapshot(), 1, 3, 1e-5);
        assert_eq!(bad, vec![k]);
    }
}
