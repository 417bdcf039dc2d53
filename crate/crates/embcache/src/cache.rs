//! Per-worker cache embedding table.
//!
//! Each entry stores the locally updated vector (so a worker always reads its
//! own updates), the start clock `c_s` observed at fetch, the current clock
//! `c_c` advanced by local writes, and the accumulated unsent delta. Capacity
//! eviction is driven by a pluggable policy: LRU, LFU, or a light LFU that
//! promotes sufficiently hot entries to a pinned, maintenance-free state.

use crate::embedding::{
    accumulate, ClockValue, EmbeddingKey, EmbeddingVector, StalenessBound, UpdateDelta,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};

/// Eviction policy for the cache embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachePolicy {
    Lru,
    Lfu,
    LightLfu {
        #[serde(default = "default_promote_threshold")]
        promote_threshold: u64,
    },
}

pub fn default_promote_threshold() -> u64 {
    64
}

/// Per-entry policy bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct PolicyMeta {
    /// Lookup count since install; frozen once `promoted`.
    pub freq: u64,
    /// Monotone tick of the most recent touch.
    pub last_touch: u64,
    /// Light-LFU direct-access flag; promoted entries skip frequency
    /// maintenance and are exempt from overflow eviction.
    pub promoted: bool,
}

/// One cached embedding row with its clocks and unsent delta.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub vector: EmbeddingVector,
    pub c_s: ClockValue,
    pub c_c: ClockValue,
    pub pending: UpdateDelta,
    pub meta: PolicyMeta,
}

/// What an eviction pushes to the server: the accumulated delta and the
/// entry's current clock at eviction time.
#[derive(Clone, Debug, PartialEq)]
pub struct EvictRecord {
    pub key: EmbeddingKey,
    pub delta: UpdateDelta,
    pub c_c: ClockValue,
}

/// Victim ordering index. Tuples sort by (counter, key), so ties always break
/// toward the smaller key id.
#[derive(Debug)]
enum VictimIndex {
    /// (last_touch, key)
    Lru(BTreeSet<(u64, EmbeddingKey)>),
    /// (freq, key)
    Lfu(BTreeSet<(u64, EmbeddingKey)>),
    /// Unpromoted candidates plus a fallback set of promoted entries.
    LightLfu {
        candidates: BTreeSet<(u64, EmbeddingKey)>,
        promoted: BTreeSet<(u64, EmbeddingKey)>,
    },
}

impl VictimIndex {
    fn new(policy: CachePolicy) -> Self {
        match policy {
            CachePolicy::Lru => VictimIndex::Lru(BTreeSet::new()),
            CachePolicy::Lfu => VictimIndex::Lfu(BTreeSet::new()),
            CachePolicy::LightLfu { .. } => VictimIndex::LightLfu {
                candidates: BTreeSet::new(),
                promoted: BTreeSet::new(),
            },
        }
    }

    fn insert(&mut self, key: EmbeddingKey, meta: &PolicyMeta) {
        match self {
            VictimIndex::Lru(set) => {
                set.insert((meta.last_touch, key));
            }
            VictimIndex::Lfu(set) => {
                set.insert((meta.freq, key));
            }
            VictimIndex::LightLfu { candidates, promoted } => {
                if meta.promoted {
                    promoted.insert((meta.freq, key));
                } else {
                    candidates.insert((meta.freq, key));
                }
            }
        }
    }

    fn remove(&mut self, key: EmbeddingKey, meta: &PolicyMeta) {
        match self {
            VictimIndex::Lru(set) => {
                set.remove(&(meta.last_touch, key));
            }
            VictimIndex::Lfu(set) => {
                set.remove(&(meta.freq, key));
            }
            VictimIndex::LightLfu { candidates, promoted } => {
                if meta.promoted {
                    promoted.remove(&(meta.freq, key));
                } else {
                    candidates.remove(&(meta.freq, key));
                }
            }
        }
    }

    /// Next victim, skipping pinned keys. Promoted light-LFU entries are only
    /// considered once no unpromoted candidate remains.
    fn pick(&self, pinned: &HashSet<EmbeddingKey>) -> Option<EmbeddingKey> {
        let scan = |set: &BTreeSet<(u64, EmbeddingKey)>| {
            set.iter().map(|&(_, k)| k).find(|k| !pinned.contains(k))
        };
        match self {
            VictimIndex::Lru(set) | VictimIndex::Lfu(set) => scan(set),
            VictimIndex::LightLfu { candidates, promoted } => {
                scan(candidates).or_else(|| scan(promoted))
            }
        }
    }
}

/// The cache embedding table owned by one worker.
#[derive(Debug)]
pub struct CacheTable {
    entries: HashMap<EmbeddingKey, CacheEntry>,
    capacity: usize,
    dim: usize,
    policy: CachePolicy,
    index: VictimIndex,
    tick: u64,
}

impl CacheTable {
    pub fn new(capacity: usize, dim: usize, policy: CachePolicy) -> Self {
        debug_assert!(capacity >= 1);
        Self {
            entries: HashMap::new(),
            capacity,
            dim,
            policy,
            index: VictimIndex::new(policy),
            tick: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn entry(&self, key: EmbeddingKey) -> Option<&CacheEntry> {
        self.entries.get(&key)
    }

    /// Membership test; does not touch policy metadata.
    pub fn find(&self, key: EmbeddingKey) -> bool {
        self.entries.contains_key(&key)
    }

    /// Evaluate the two validity conditions against a freshly obtained global
    /// clock. No mutation.
    pub fn check_valid(
        &self,
        key: EmbeddingKey,
        s: StalenessBound,
        c_g_latest: ClockValue,
    ) -> Result<bool> {
        let e = self.entries.get(&key).ok_or(Error::KeyNotCached(key.0))?;
        Ok(s.is_valid(e.c_s, e.c_c, c_g_latest))
    }

    /// Install a fetched embedding. Start and current clocks are both set to
    /// the global clock; any existing entry is overwritten and its metadata
    /// reset. The caller is responsible for restoring capacity afterwards via
    /// [`CacheTable::evict_overflow`].
    pub fn fetch_install(
        &mut self,
        key: EmbeddingKey,
        vector: EmbeddingVector,
        c_g: ClockValue,
    ) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if let Some(old) = self.entries.remove(&key) {
            self.index.remove(key, &old.meta);
        }
        self.tick += 1;
        let meta = PolicyMeta {
            freq: 1,
            last_touch: self.tick,
            promoted: false,
        };
        self.index.insert(key, &meta);
        self.entries.insert(
            key,
            CacheEntry {
                vector,
                c_s: c_g,
                c_c: c_g,
                pending: UpdateDelta::zeros(self.dim),
                meta,
            },
        );
        Ok(())
    }

    /// Apply a local update: the vector and the pending delta both absorb it,
    /// and recency is touched. The write path guarantees residency.
    pub fn update(&mut self, key: EmbeddingKey, delta: &UpdateDelta) -> Result<()> {
        let e = self
            .entries
            .get_mut(&key)
            .ok_or(Error::WriteWithoutRead(key.0))?;
        e.vector.apply(delta)?;
        accumulate(&mut e.pending, delta)?;
        self.tick += 1;
        let old = e.meta;
        e.meta.last_touch = self.tick;
        let meta = e.meta;
        if matches!(self.policy, CachePolicy::Lru) {
            self.index.remove(key, &old);
            self.index.insert(key, &meta);
        }
        Ok(())
    }

    /// Advance the current clock by one. Called exactly once per key per
    /// write, after key deduplication.
    pub fn clock(&mut self, key: EmbeddingKey) -> Result<()> {
        let e = self
            .entries
            .get_mut(&key)
            .ok_or(Error::KeyNotCached(key.0))?;
        e.c_c = e.c_c.incremented();
        Ok(())
    }

    /// Read the local vector (including local updates) and bump policy
    /// metadata. Light-LFU promotes the entry once it reaches the threshold,
    /// after which its frequency is no longer maintained.
    pub fn get(&mut self, key: EmbeddingKey) -> Result<&EmbeddingVector> {
        let e = self
            .entries
            .get_mut(&key)
            .ok_or(Error::KeyNotCached(key.0))?;
        self.tick += 1;
        let old = e.meta;
        e.meta.last_touch = self.tick;
        if !e.meta.promoted {
            e.meta.freq += 1;
            if let CachePolicy::LightLfu { promote_threshold } = self.policy {
                if e.meta.freq >= promote_threshold {
                    e.meta.promoted = true;
                }
            }
        }
        let meta = e.meta;
        self.index.remove(key, &old);
        self.index.insert(key, &meta);
        Ok(&self.entries[&key].vector)
    }

    /// Remove one entry, returning its accumulated delta and current clock.
    pub fn evict(&mut self, key: EmbeddingKey) -> Result<EvictRecord> {
        let e = self.entries.remove(&key).ok_or(Error::KeyNotCached(key.0))?;
        self.index.remove(key, &e.meta);
        Ok(EvictRecord {
            key,
            delta: e.pending,
            c_c: e.c_c,
        })
    }

    /// Evict per policy until the table fits its capacity.
    pub fn evict_overflow(&mut self) -> Vec<EvictRecord> {
        static NO_PINS: std::sync::OnceLock<HashSet<EmbeddingKey>> = std::sync::OnceLock::new();
        self.evict_overflow_pinned(NO_PINS.get_or_init(HashSet::new))
            .expect("unpinned overflow eviction cannot fail")
    }

    /// Evict per policy until the table fits its capacity, never selecting a
    /// pinned key. The read path pins the current batch so every requested key
    /// stays resident until the matching write.
    pub fn evict_overflow_pinned(
        &mut self,
        pinned: &HashSet<EmbeddingKey>,
    ) -> Result<Vec<EvictRecord>> {
        let mut records = Vec::new();
        while self.entries.len() > self.capacity {
            let victim = self.index.pick(pinned).ok_or(Error::CapacityTooSmall {
                capacity: self.capacity,
                required: pinned.len(),
            })?;
            records.push(self.evict(victim)?);
        }
        Ok(records)
    }

    /// Remove every entry, in key order, returning all records. Used by the
    /// end-of-run flush.
    pub fn drain_all(&mut self) -> Vec<EvictRecord> {
        let mut keys: Vec<EmbeddingKey> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|k| self.evict(k).expect("key listed from entries"))
            .collect()
    }
}
