//! Worker-side protocol drivers.
//!
//! [`CachedClient`] implements the cached read/write protocol: reads check
//! residency, batch one clock-check round for all hits, synchronize invalid
//! entries through a fused push+pull exchange, and fetch misses in one batch;
//! writes accumulate deltas locally and tick the per-entry clock, talking to
//! the server only when capacity eviction or the final flush forces it.
//! [`DirectClient`] is the no-cache baseline: every read fetches and every
//! write pushes immediately.

use crate::cache::{CacheTable, EvictRecord};
use crate::embedding::{ClockValue, EmbeddingKey, EmbeddingVector, StalenessBound, UpdateDelta};
use crate::error::{Error, Result};
use crate::recorder::{EventKind, RecorderHandle};
use crate::transport::{ByteCounter, Endpoint, Message};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};

/// Deduplicate a key list into ascending order, with per-key multiplicities
/// for gradient aggregation.
pub fn dedup_keys(keys: &[EmbeddingKey]) -> (Vec<EmbeddingKey>, BTreeMap<EmbeddingKey, u32>) {
    let mut mult = BTreeMap::new();
    for &k in keys {
        *mult.entry(k).or_insert(0u32) += 1;
    }
    (mult.keys().copied().collect(), mult)
}

/// Protocol counters for one worker.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClientStats {
    pub reads: u64,
    pub writes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub invalid_hits: u64,
}

/// Point-in-time stats merged with the endpoint's byte counters, exported
/// into run reports.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StatsSnapshot {
    pub worker_id: usize,
    pub reads: u64,
    pub writes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub invalid_hits: u64,
    pub embedding_bytes_sent: u64,
    pub embedding_bytes_received: u64,
    pub clock_bytes: u64,
    pub total_bytes_sent: u64,
    pub total_bytes_received: u64,
    pub network_rounds: u64,
}

fn snapshot(worker_id: usize, stats: &ClientStats, bytes: &ByteCounter) -> StatsSnapshot {
    StatsSnapshot {
        worker_id,
        reads: stats.reads,
        writes: stats.writes,
        cache_hits: stats.cache_hits,
        cache_misses: stats.cache_misses,
        invalid_hits: stats.invalid_hits,
        embedding_bytes_sent: bytes.sent.embedding_payload_bytes,
        embedding_bytes_received: bytes.received.embedding_payload_bytes,
        clock_bytes: bytes.sent.clock_payload_bytes + bytes.received.clock_payload_bytes,
        total_bytes_sent: bytes.sent.total(),
        total_bytes_received: bytes.received.total(),
        network_rounds: bytes.requests,
    }
}

enum PrefetchState {
    Ready(Vec<EmbeddingKey>),
    Failed(Error),
}

/// Cache-enabled protocol driver for one worker.
pub struct CachedClient<E: Endpoint> {
    worker_id: usize,
    cache: CacheTable,
    endpoint: E,
    staleness: StalenessBound,
    fused_sync: bool,
    stats: ClientStats,
    recorder: Option<RecorderHandle>,
    prefetched: Option<PrefetchState>,
}

impl<E: Endpoint> CachedClient<E> {
    pub fn new(
        worker_id: usize,
        cache: CacheTable,
        endpoint: E,
        staleness: StalenessBound,
        fused_sync: bool,
        recorder: Option<RecorderHandle>,
    ) -> Self {
        Self {
            worker_id,
            cache,
            endpoint,
            staleness,
            fused_sync,
            stats: ClientStats::default(),
            recorder,
            prefetched: None,
        }
    }

    pub fn cache(&self) -> &CacheTable {
        &self.cache
    }

    pub fn stats(&self) -> StatsSnapshot {
        snapshot(self.worker_id, &self.stats, &self.endpoint.counters())
    }

    pub fn endpoint_mut(&mut self) -> &mut E {
        &mut self.endpoint
    }

    fn record(
        &self,
        kind: EventKind,
        key: EmbeddingKey,
        c_s: ClockValue,
        c_c: ClockValue,
        c_g: Option<ClockValue>,
    ) {
        if let Some(rec) = &self.recorder {
            rec.borrow_mut().record(kind, self.worker_id, key, c_s, c_c, c_g);
        }
    }

    fn record_pushed(&self, records: &[EvictRecord]) {
        if let Some(rec) = &self.recorder {
            let mut rec = rec.borrow_mut();
            for r in records {
                rec.record_pushed_delta(r.key, &r.delta);
            }
        }
    }

    /// Read a batch of keys, returning the local vector for each unique key.
    /// Afterwards every requested key is resident and valid.
    pub fn read(
        &mut self,
        keys: &[EmbeddingKey],
    ) -> Result<HashMap<EmbeddingKey, EmbeddingVector>> {
        let (unique, _) = dedup_keys(keys);
        self.stats.reads += 1;

        match self.prefetched.take() {
            Some(PrefetchState::Failed(e)) => return Err(e),
            Some(PrefetchState::Ready(pre))
                if pre == unique && unique.iter().all(|&k| self.cache.find(k)) =>
            {
                // The full read path already ran at prefetch time; serve
                // locally with zero network rounds.
                return self.serve(&unique, &HashMap::new(), false);
            }
            _ => {}
        }

        let observed = self.run_read_protocol(&unique)?;
        self.serve(&unique, &observed, true)
    }

    /// Issue the read-path network rounds for the next batch now, so the next
    /// `read` of exactly these keys completes without touching the network.
    /// Failures surface at that next read.
    pub fn prefetch(&mut self, next_keys: &[EmbeddingKey]) -> Result<()> {
        let (unique, _) = dedup_keys(next_keys);
        if unique.is_empty() {
            self.prefetched = None;
            return Ok(());
        }
        self.stats.reads += 1;
        match self.run_read_protocol(&unique) {
            Ok(observed) => {
                // Emit the read events at the validation instant.
                for &k in &unique {
                    let e = self.cache.entry(k).ok_or(Error::KeyNotCached(k.0))?;
                    self.record(EventKind::Read, k, e.c_s, e.c_c, observed.get(&k).copied());
                }
                self.prefetched = Some(PrefetchState::Ready(unique));
            }
            Err(e) => self.prefetched = Some(PrefetchState::Failed(e)),
        }
        Ok(())
    }

    /// The network half of the read path: clock-check hits, sync invalid
    /// entries, fetch misses, then restore capacity. Returns the global clock
    /// observed per key, for keys where one was observed.
    fn run_read_protocol(
        &mut self,
        unique: &[EmbeddingKey],
    ) -> Result<HashMap<EmbeddingKey, ClockValue>> {
        let (hits, misses): (Vec<_>, Vec<_>) =
            unique.iter().copied().partition(|&k| self.cache.find(k));
        self.stats.cache_hits += hits.len() as u64;
        self.stats.cache_misses += misses.len() as u64;

        let mut observed: HashMap<EmbeddingKey, ClockValue> = HashMap::new();
        let mut invalid: Vec<EmbeddingKey> = Vec::new();

        // One clock-check round covers every hit; skipped entirely when the
        // bound is infinite (every hit is then valid by definition).
        if !self.staleness.is_infinite() && !hits.is_empty() {
            let pairs: Vec<(EmbeddingKey, ClockValue)> = hits
                .iter()
                .map(|&k| (k, self.cache.entry(k).expect("hit is resident").c_c))
                .collect();
            let resp = self.endpoint.request(&Message::ClockCheckReq { pairs })?;
            let Message::ClockCheckResp { pairs } = resp else {
                return Err(Error::UnexpectedResponse {
                    expected: "ClockCheckResp",
                    got: resp.kind_name(),
                });
            };
            for (k, c_g) in pairs {
                let e = self.cache.entry(k).ok_or(Error::KeyNotCached(k.0))?;
                self.record(EventKind::ClockCheck, k, e.c_s, e.c_c, Some(c_g));
                observed.insert(k, c_g);
                if !self.cache.check_valid(k, self.staleness, c_g)? {
                    invalid.push(k);
                }
            }
            self.stats.invalid_hits += invalid.len() as u64;
        }

        // All request payloads are assembled (and, in the literal two-message
        // mode, the push is acknowledged) before any entry is touched, so a
        // transport failure leaves the cache unmodified.
        let sync_records: Vec<EvictRecord> = invalid
            .iter()
            .map(|&k| {
                let e = self.cache.entry(k).expect("invalid hit is resident");
                EvictRecord {
                    key: k,
                    delta: e.pending.clone(),
                    c_c: e.c_c,
                }
            })
            .collect();

        let mut installs: Vec<(EmbeddingKey, EmbeddingVector, ClockValue)> = Vec::new();
        if !sync_records.is_empty() {
            let entries = if self.fused_sync {
                let resp = self.endpoint.request(&Message::SyncReq {
                    records: sync_records.clone(),
                })?;
                match resp {
                    Message::SyncResp { entries } => entries,
                    other => {
                        return Err(Error::UnexpectedResponse {
                            expected: "SyncResp",
                            got: other.kind_name(),
                        })
                    }
                }
            } else {
                // Literal evict-then-fetch, two round trips.
                let ack = self.endpoint.request(&Message::EvictReq {
                    records: sync_records.clone(),
                })?;
                if !matches!(ack, Message::EvictAck) {
                    return Err(Error::UnexpectedResponse {
                        expected: "EvictAck",
                        got: ack.kind_name(),
                    });
                }
                let resp = self.endpoint.request(&Message::FetchReq {
                    keys: invalid.clone(),
                })?;
                match resp {
                    Message::FetchResp { entries } => entries,
                    other => {
                        return Err(Error::UnexpectedResponse {
                            expected: "FetchResp",
                            got: other.kind_name(),
                        })
                    }
                }
            };
            self.record_pushed(&sync_records);
            for r in &sync_records {
                self.record(EventKind::Evict, r.key, ClockValue::ZERO, r.c_c, None);
            }
            installs.extend(entries);
        }

        if !misses.is_empty() {
            let resp = self.endpoint.request(&Message::FetchReq {
                keys: misses.clone(),
            })?;
            match resp {
                Message::FetchResp { entries } => installs.extend(entries),
                other => {
                    return Err(Error::UnexpectedResponse {
                        expected: "FetchResp",
                        got: other.kind_name(),
                    })
                }
            }
        }

        for (k, vector, c_g) in installs {
            self.cache.fetch_install(k, vector, c_g)?;
            observed.insert(k, c_g);
            self.record(EventKind::Fetch, k, c_g, c_g, Some(c_g));
        }

        // Restore capacity without evicting anything from the current batch.
        let pins: HashSet<EmbeddingKey> = unique.iter().copied().collect();
        let evicted = self.cache.evict_overflow_pinned(&pins)?;
        self.push_evictions(evicted)?;
        Ok(observed)
    }

    /// Serve the batch from the cache, emitting read events when requested.
    fn serve(
        &mut self,
        unique: &[EmbeddingKey],
        observed: &HashMap<EmbeddingKey, ClockValue>,
        emit_events: bool,
    ) -> Result<HashMap<EmbeddingKey, EmbeddingVector>> {
        let mut out = HashMap::with_capacity(unique.len());
        for &k in unique {
            let e = self.cache.entry(k).ok_or(Error::KeyNotCached(k.0))?;
            let (c_s, c_c) = (e.c_s, e.c_c);
            if emit_events {
                self.record(EventKind::Read, k, c_s, c_c, observed.get(&k).copied());
            }
            out.insert(k, self.cache.get(k)?.clone());
        }
        Ok(out)
    }

    /// Write back a batch of gradients: per unique key, apply the pre-scaled
    /// delta locally and tick the clock once, then restore capacity. Nothing
    /// reaches the server unless eviction forces it.
    pub fn write(
        &mut self,
        keys: &[EmbeddingKey],
        grads: &HashMap<EmbeddingKey, UpdateDelta>,
        eta: f32,
    ) -> Result<()> {
        let (unique, _) = dedup_keys(keys);
        self.stats.writes += 1;
        for &k in &unique {
            if !self.cache.find(k) {
                return Err(Error::WriteWithoutRead(k.0));
            }
            let grad = grads
                .get(&k)
                .ok_or_else(|| Error::RunAborted(format!("missing gradient for key {k}")))?;
            let delta = grad.scaled(-eta);
            self.cache.update(k, &delta)?;
            self.cache.clock(k)?;
            let e = self.cache.entry(k).expect("updated entry");
            self.record(EventKind::Write, k, e.c_s, e.c_c, None);
        }
        let evicted = self.cache.evict_overflow();
        self.push_evictions(evicted)
    }

    /// Send capacity-eviction records, dropping all-zero deltas.
    fn push_evictions(&mut self, evicted: Vec<EvictRecord>) -> Result<()> {
        for r in &evicted {
            self.record(EventKind::Evict, r.key, ClockValue::ZERO, r.c_c, None);
        }
        let records: Vec<EvictRecord> = evicted.into_iter().filter(|r| !r.delta.is_zero()).collect();
        if records.is_empty() {
            return Ok(());
        }
        let ack = self.endpoint.request(&Message::EvictReq {
            records: records.clone(),
        })?;
        if !matches!(ack, Message::EvictAck) {
            return Err(Error::UnexpectedResponse {
                expected: "EvictAck",
                got: ack.kind_name(),
            });
        }
        self.record_pushed(&records);
        Ok(())
    }

    /// Evict every entry and push all dirty deltas to the server. Clean
    /// evictions are dropped rather than sent as zero-delta records.
    pub fn flush(&mut self) -> Result<()> {
        let all = self.cache.drain_all();
        for r in &all {
            self.record(EventKind::Evict, r.key, ClockValue::ZERO, r.c_c, None);
        }
        let dirty: Vec<EvictRecord> = all.into_iter().filter(|r| !r.delta.is_zero()).collect();
        if dirty.is_empty() {
            return Ok(());
        }
        let ack = self.endpoint.request(&Message::FlushReq {
            records: dirty.clone(),
        })?;
        if !matches!(ack, Message::FlushAck) {
            return Err(Error::UnexpectedResponse {
                expected: "FlushAck",
                got: ack.kind_name(),
            });
        }
        self.record_pushed(&dirty);
        Ok(())
    }
}

/// No-cache baseline driver: reads fetch every key from the server, writes
/// push every delta immediately.
pub struct DirectClient<E: Endpoint> {
    worker_id: usize,
    endpoint: E,
    stats: ClientStats,
    recorder: Option<RecorderHandle>,
    last_read: HashSet<EmbeddingKey>,
}

impl<E: Endpoint> DirectClient<E> {
    pub fn new(worker_id: usize, endpoint: E, recorder: Option<RecorderHandle>) -> Self {
        Self {
            worker_id,
            endpoint,
            stats: ClientStats::default(),
            recorder,
            last_read: HashSet::new(),
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        snapshot(self.worker_id, &self.stats, &self.endpoint.counters())
    }

    pub fn endpoint_mut(&mut self) -> &mut E {
        &mut self.endpoint
    }

    pub fn read(
        &mut self,
        keys: &[EmbeddingKey],
    ) -> Result<HashMap<EmbeddingKey, EmbeddingVector>> {
        let (unique, _) = dedup_keys(keys);
        self.stats.reads += 1;
        self.stats.cache_misses += unique.len() as u64;
        let resp = self.endpoint.request(&Message::FetchReq {
            keys: unique.clone(),
        })?;
        let Message::FetchResp { entries } = resp else {
            return Err(Error::UnexpectedResponse {
                expected: "FetchResp",
                got: resp.kind_name(),
            });
        };
        if let Some(rec) = &self.recorder {
            let mut rec = rec.borrow_mut();
            for (k, _, c_g) in &entries {
                rec.record(EventKind::Fetch, self.worker_id, *k, *c_g, *c_g, Some(*c_g));
            }
        }
        self.last_read = unique.into_iter().collect();
        Ok(entries.into_iter().map(|(k, v, _)| (k, v)).collect())
    }

    pub fn write(
        &mut self,
        keys: &[EmbeddingKey],
        grads: &HashMap<EmbeddingKey, UpdateDelta>,
        eta: f32,
    ) -> Result<()> {
        let (unique, _) = dedup_keys(keys);
        self.stats.writes += 1;
        let mut records = Vec::with_capacity(unique.len());
        for &k in &unique {
            if !self.last_read.contains(&k) {
                return Err(Error::WriteWithoutRead(k.0));
            }
            let grad = grads
                .get(&k)
                .ok_or_else(|| Error::RunAborted(format!("missing gradient for key {k}")))?;
            records.push(EvictRecord {
                key: k,
                delta: grad.scaled(-eta),
                c_c: ClockValue::ZERO,
            });
        }
        if records.is_empty() {
            return Ok(());
        }
        let ack = self.endpoint.request(&Message::EvictReq {
            records: records.clone(),
        })?;
        if !matches!(ack, Message::EvictAck) {
            return Err(Error::UnexpectedResponse {
                expected: "EvictAck",
                got: ack.kind_name(),
            });
        }
        if let Some(rec) = &self.recorder {
            let mut rec = rec.borrow_mut();
            for r in &records {
                rec.record_pushed_delta(r.key, &r.delta);
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// A worker's frontend: either the cached protocol or the no-cache baseline.
pub enum Frontend<E: Endpoint> {
    Cached(CachedClient<E>),
    Direct(DirectClient<E>),
}

impl<E: Endpoint> Frontend<E> {
    pub fn read(
        &mut self,
        keys: &[EmbeddingKey],
    ) -> Result<HashMap<EmbeddingKey, EmbeddingVector>> {
        match self {
            Frontend::Cached(c) => c.read(keys),
            Frontend::Direct(d) => d.read(keys),
        }
    }

    pub fn write(
        &mut self,
        keys: &[EmbeddingKey],
        grads: &HashMap<EmbeddingKey, UpdateDelta>,
        eta: f32,
    ) -> Result<()> {
        match self {
            Frontend::Cached(c) => c.write(keys, grads, eta),
            Frontend::Direct(d) => d.write(keys, grads, eta),
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        match self {
            Frontend::Cached(c) => c.flush(),
            Frontend::Direct(d) => d.flush(),
        }
    }

    /// Prefetch is a cache-mode optimization; the baseline ignores it.
    pub fn prefetch(&mut self, next_keys: &[EmbeddingKey]) -> Result<()> {
        match self {
            Frontend::Cached(c) => c.prefetch(next_keys),
            Frontend::Direct(_) => Ok(()),
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        match self {
            Frontend::Cached(c) => c.stats(),
            Frontend::Direct(d) => d.stats(),
        }
    }

    pub fn endpoint_mut(&mut self) -> &mut E {
        match self {
            Frontend::Cached(c) => c.endpoint_mut(),
            Frontend::Direct(d) => d.endpoint_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CachePolicy;
    use crate::server::ServerCore;
    use crate::transport::sim::{SimEndpoint, SimNet};
    use std::cell::RefCell;
    use std::rc::Rc;

    const DIM: usize = 4;

    fn client(
        staleness: StalenessBound,
        capacity: usize,
    ) -> (CachedClient<SimEndpoint>, Rc<RefCell<SimNet>>) {
        let net = SimNet::new(ServerCore::new(DIM, 42, 1), 1);
        let cache = CacheTable::new(capacity, DIM, CachePolicy::Lru);
        let ep = SimEndpoint::new(net.clone(), 0);
        (
            CachedClient::new(0, cache, ep, staleness, true, None),
            net,
        )
    }

    fn keys(ids: &[u64]) -> Vec<EmbeddingKey> {
        ids.iter().map(|&i| EmbeddingKey(i)).collect()
    }

    fn grads_of(ks: &[EmbeddingKey], val: f32) -> HashMap<EmbeddingKey, UpdateDelta> {
        ks.iter()
            .map(|&k| (k, UpdateDelta::from_vec(vec![val; DIM])))
            .collect()
    }

    #[test]
    fn dedup_ascending_with_multiplicities() {
        let (unique, mult) = dedup_keys(&keys(&[5, 3, 5, 7]));
        assert_eq!(unique, keys(&[3, 5, 7]));
        assert_eq!(mult[&EmbeddingKey(3)], 1);
        assert_eq!(mult[&EmbeddingKey(5)], 2);
        assert_eq!(mult[&EmbeddingKey(7)], 1);
        assert!(dedup_keys(&[]).0.is_empty());
    }

    #[test]
    fn cold_read_installs_with_matching_clocks() {
        let (mut c, _net) = client(StalenessBound::ZERO, 8);
        let out = c.read(&keys(&[1, 2])).unwrap();
        assert_eq!(out.len(), 2);
        for id in [1u64, 2] {
            let e = c.cache().entry(EmbeddingKey(id)).unwrap();
            assert_eq!(e.c_s, e.c_c);
            assert_eq!(e.c_s, ClockValue::ZERO);
        }
        let s = c.stats();
        assert_eq!((s.cache_hits, s.cache_misses), (0, 2));
    }

    #[test]
    fn warm_valid_hit_moves_clock_bytes_only() {
        let (mut c, _net) = client(StalenessBound::Finite(5), 8);
        c.read(&keys(&[1])).unwrap();
        let before = c.stats();
        c.read(&keys(&[1])).unwrap();
        let after = c.stats();
        assert_eq!(after.embedding_bytes_received, before.embedding_bytes_received);
        assert_eq!(after.embedding_bytes_sent, before.embedding_bytes_sent);
        assert!(after.clock_bytes > before.clock_bytes);
        assert_eq!(after.cache_hits, before.cache_hits + 1);
    }

    #[test]
    fn infinite_staleness_skips_the_clock_round() {
        let (mut c, _net) = client(StalenessBound::Infinite, 8);
        c.read(&keys(&[1])).unwrap();
        let before = c.stats();
        c.read(&keys(&[1])).unwrap();
        let after = c.stats();
        assert_eq!(after.network_rounds, before.network_rounds);
        assert_eq!(after.clock_bytes, 0);
    }

    #[test]
    fn zero_staleness_local_update_forces_one_sync_round() {
        let (mut c, _net) = client(StalenessBound::ZERO, 8);
        let ks = keys(&[1]);
        c.read(&ks).unwrap();
        c.write(&ks, &grads_of(&ks, 1.0), 0.1).unwrap();
        let e = c.cache().entry(EmbeddingKey(1)).unwrap();
        assert_eq!(e.c_c.0, e.c_s.0 + 1);

        let before = c.stats();
        c.read(&ks).unwrap();
        let after = c.stats();
        assert_eq!(after.invalid_hits, before.invalid_hits + 1);
        // clock check + fused sync
        assert_eq!(after.network_rounds, before.network_rounds + 2);
        // The sync delivered the freshly synchronized vector.
        assert!(after.embedding_bytes_received > before.embedding_bytes_received);
        let e = c.cache().entry(EmbeddingKey(1)).unwrap();
        assert_eq!(e.c_s, e.c_c);
        assert!(e.pending.is_zero());
    }

    #[test]
    fn fused_and_literal_sync_agree_on_state() {
        let run = |fused: bool| {
            let net = SimNet::new(ServerCore::new(DIM, 42, 1), 1);
            let cache = CacheTable::new(8, DIM, CachePolicy::Lru);
            let ep = SimEndpoint::new(net.clone(), 0);
            let mut c = CachedClient::new(0, cache, ep, StalenessBound::ZERO, fused, None);
            let ks = keys(&[1, 2]);
            for _ in 0..3 {
                c.read(&ks).unwrap();
                c.write(&ks, &grads_of(&ks, 0.5), 0.1).unwrap();
            }
            c.flush().unwrap();
            let snap = net.borrow().core().table.snapshot();
            snap
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn pure_stale_write_sends_nothing() {
        let (mut c, _net) = client(StalenessBound::Finite(100), 8);
        let ks = keys(&[1, 2]);
        c.read(&ks).unwrap();
        let before = c.stats();
        c.write(&ks, &grads_of(&ks, 1.0), 0.1).unwrap();
        let after = c.stats();
        assert_eq!(after.embedding_bytes_sent, before.embedding_bytes_sent);
        assert_eq!(after.network_rounds, before.network_rounds);
    }

    #[test]
    fn duplicate_key_gets_one_clock_tick() {
        let (mut c, _net) = client(StalenessBound::Finite(100), 8);
        let batch = keys(&[1, 1, 1]);
        c.read(&batch).unwrap();
        // Aggregated gradient for the unique key; one tick regardless of the
        // three occurrences.
        let mut grads = HashMap::new();
        grads.insert(EmbeddingKey(1), UpdateDelta::from_vec(vec![2.0; DIM]));
        c.write(&batch, &grads, 0.5).unwrap();
        let e = c.cache().entry(EmbeddingKey(1)).unwrap();
        assert_eq!(e.c_c.0, e.c_s.0 + 1);
        assert_eq!(e.pending.values(), &[-1.0; DIM]);
    }

    #[test]
    fn write_without_read_is_rejected() {
        let (mut c, _net) = client(StalenessBound::Finite(1), 8);
        let ks = keys(&[9]);
        let err = c.write(&ks, &grads_of(&ks, 1.0), 0.1).unwrap_err();
        assert!(matches!(err, Error::WriteWithoutRead(9)));
    }

    #[test]
    fn overflow_eviction_pushes_dirty_victim() {
        let (mut c, _net) = client(StalenessBound::Infinite, 2);
        let first = keys(&[1, 2]);
        c.read(&first).unwrap();
        c.write(&first, &grads_of(&first, 1.0), 0.1).unwrap();
        let before = c.stats();
        // Reading a third key overflows the capacity-2 cache by one victim.
        c.read(&keys(&[3])).unwrap();
        let after = c.stats();
        assert_eq!(c.cache().len(), 2);
        let pushed = after.embedding_bytes_sent - before.embedding_bytes_sent;
        assert_eq!(pushed, (DIM * 4) as u64);
    }

    #[test]
    fn flush_pushes_dirty_and_drops_clean() {
        let (mut c, net) = client(StalenessBound::Infinite, 8);
        let dirty = keys(&[1, 2, 3]);
        let clean = keys(&[4, 5]);
        c.read(&dirty).unwrap();
        c.read(&clean).unwrap();
        c.write(&dirty, &grads_of(&dirty, 1.0), 0.1).unwrap();
        let before = c.stats();
        c.flush().unwrap();
        let after = c.stats();
        assert_eq!(c.cache().len(), 0);
        assert_eq!(
            after.embedding_bytes_sent - before.embedding_bytes_sent,
            (3 * DIM * 4) as u64
        );
        // Server applied exactly the three dirty deltas.
        let snap = net.borrow().core().table.snapshot();
        for (k, v, _) in snap {
            let init = crate::embedding::init_embedding(k, DIM, 42);
            let expect = if k.0 <= 3 { init.values()[0] - 0.1 } else { init.values()[0] };
            assert!((v.values()[0] - expect).abs() < 1e-6);
        }
        // Flushing an empty cache is a no-op.
        let rounds = c.stats().network_rounds;
        c.flush().unwrap();
        assert_eq!(c.stats().network_rounds, rounds);
    }

    #[test]
    fn read_my_updates_visible_immediately() {
        let (mut c, _net) = client(StalenessBound::Infinite, 8);
        let ks = keys(&[7]);
        let v0 = c.read(&ks).unwrap()[&EmbeddingKey(7)].clone();
        c.write(&ks, &grads_of(&ks, 1.0), 0.25).unwrap();
        let v1 = c.read(&ks).unwrap()[&EmbeddingKey(7)].clone();
        for (a, b) in v0.values().iter().zip(v1.values()) {
            assert!((b - (a - 0.25)).abs() < 1e-6);
        }
    }

    #[test]
    fn prefetch_makes_next_read_round_free() {
        let (mut c, _net) = client(StalenessBound::Finite(10), 8);
        let ks = keys(&[1, 2, 3]);
        c.prefetch(&ks).unwrap();
        let before = c.stats();
        let out = c.read(&ks).unwrap();
        let after = c.stats();
        assert_eq!(out.len(), 3);
        assert_eq!(after.network_rounds, before.network_rounds);
        assert_eq!(after.total_bytes_sent, before.total_bytes_sent);
    }

    #[test]
    fn prefetch_of_valid_keys_moves_no_embedding_bytes() {
        let (mut c, _net) = client(StalenessBound::Finite(10), 8);
        let ks = keys(&[1, 2]);
        c.read(&ks).unwrap();
        let before = c.stats();
        c.prefetch(&ks).unwrap();
        let after = c.stats();
        assert_eq!(after.embedding_bytes_received, before.embedding_bytes_received);
        assert!(after.clock_bytes > before.clock_bytes);
    }

    #[test]
    fn mismatched_prefetch_falls_back_to_normal_read() {
        let (mut c, _net) = client(StalenessBound::Finite(10), 8);
        c.prefetch(&keys(&[1, 2])).unwrap();
        let out = c.read(&keys(&[1, 2, 3])).unwrap();
        assert_eq!(out.len(), 3);
        assert!(c.cache().find(EmbeddingKey(3)));
    }

    #[test]
    fn direct_client_round_trips_deltas() {
        let net = SimNet::new(ServerCore::new(DIM, 42, 1), 1);
        let mut d = DirectClient::new(0, SimEndpoint::new(net.clone(), 0), None);
        let ks = keys(&[1]);
        let v0 = d.read(&ks).unwrap()[&EmbeddingKey(1)].clone();
        d.write(&ks, &grads_of(&ks, 1.0), 0.5).unwrap();
        let v1 = d.read(&ks).unwrap()[&EmbeddingKey(1)].clone();
        assert!((v1.values()[0] - (v0.values()[0] - 0.5)).abs() < 1e-6);
        let s = d.stats();
        assert_eq!(s.cache_hits, 0);
        assert_eq!(s.cache_misses, 2);
    }

    #[test]
    fn stats_invariants_hold_across_random_traffic() {
        let (mut c, _net) = client(StalenessBound::Finite(2), 16);
        let mut rng = crate::rng::SplitMix64::new(99);
        let mut total_keys = 0u64;
        for _ in 0..200 {
            let batch: Vec<EmbeddingKey> =
                (0..4).map(|_| EmbeddingKey(1 + rng.next_u64() % 30)).collect();
            let (unique, _) = dedup_keys(&batch);
            total_keys += unique.len() as u64;
            c.read(&batch).unwrap();
            c.write(&batch, &grads_of(&unique, 0.1), 0.01).unwrap();
        }
        let s = c.stats();
        assert_eq!(s.cache_hits + s.cache_misses, total_keys);
        assert!(s.invalid_hits <= s.cache_hits);
    }
}
