//! Global embedding table and cache coordinator.
//!
//! The server owns the authoritative copy of every embedding together with
//! its global clock `c_g` (the total number of update batches applied). It
//! serves fetches, applies write-back deltas, answers clock-check queries,
//! and fuses evict+fetch into a single sync exchange. Entries are created
//! lazily on first fetch and never removed.

use crate::cache::EvictRecord;
use crate::embedding::{init_embedding, ClockValue, EmbeddingKey, EmbeddingVector};
use crate::error::{Error, Result};
use crate::transport::Message;
use std::collections::HashMap;

/// An embedding row plus its global Lamport clock.
#[derive(Clone, Debug)]
pub struct GlobalEntry {
    pub vector: EmbeddingVector,
    pub c_g: ClockValue,
}

/// The global embedding table. All entries share one dimension.
#[derive(Debug)]
pub struct GlobalTable {
    entries: HashMap<EmbeddingKey, GlobalEntry>,
    dim: usize,
    init_seed: u64,
}

impl GlobalTable {
    pub fn new(dim: usize, init_seed: u64) -> Self {
        Self {
            entries: HashMap::new(),
            dim,
            init_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry_mut(&mut self, key: EmbeddingKey) -> &mut GlobalEntry {
        let (dim, seed) = (self.dim, self.init_seed);
        self.entries.entry(key).or_insert_with(|| GlobalEntry {
            vector: init_embedding(key, dim, seed),
            c_g: ClockValue::ZERO,
        })
    }

    pub fn entry(&self, key: EmbeddingKey) -> Option<&GlobalEntry> {
        self.entries.get(&key)
    }

    /// Snapshot of every entry, sorted by key.
    pub fn snapshot(&self) -> Vec<(EmbeddingKey, EmbeddingVector, ClockValue)> {
        let mut rows: Vec<_> = self
            .entries
            .iter()
            .map(|(k, e)| (*k, e.vector.clone(), e.c_g))
            .collect();
        rows.sort_unstable_by_key(|r| r.0);
        rows
    }

    /// Serve a batch of fetches. Each key's vector and clock come from the
    /// same version; unseen keys are initialized lazily with `c_g = 0`.
    pub fn handle_fetch(
        &mut self,
        keys: &[EmbeddingKey],
    ) -> Vec<(EmbeddingKey, EmbeddingVector, ClockValue)> {
        keys.iter()
            .map(|&k| {
                let e = self.entry_mut(k);
                (k, e.vector.clone(), e.c_g)
            })
            .collect()
    }

    /// Apply a batch of write-back records: per key, the vector absorbs the
    /// delta and the global clock rises to `max(c_g, reported c_c)`.
    /// Application is atomic per key; cross-key order follows the batch.
    pub fn handle_evict(&mut self, records: &[EvictRecord]) -> Result<()> {
        for r in records {
            if r.delta.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: r.delta.len(),
                });
            }
            let e = self.entry_mut(r.key);
            let before = e.c_g;
            e.vector.apply(&r.delta)?;
            e.c_g = e.c_g.max(r.c_c);
            debug_assert!(e.c_g >= before, "global clock must be non-decreasing");
        }
        Ok(())
    }

    /// Answer clock queries. Read-only; response order preserves query order.
    /// Querying a key that was never fetched indicates a client bug.
    pub fn handle_clock_check(
        &self,
        queries: &[(EmbeddingKey, ClockValue)],
    ) -> Result<Vec<(EmbeddingKey, ClockValue)>> {
        queries
            .iter()
            .map(|&(k, _c_c)| {
                let e = self.entries.get(&k).ok_or(Error::UnknownKey(k.0))?;
                Ok((k, e.c_g))
            })
            .collect()
    }

    /// Fused evict + fetch: apply each record, then return the fresh vector
    /// and clock for its key, atomically per key.
    pub fn handle_sync(
        &mut self,
        records: &[EvictRecord],
    ) -> Result<Vec<(EmbeddingKey, EmbeddingVector, ClockValue)>> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            self.handle_evict(std::slice::from_ref(r))?;
            let e = self.entry_mut(r.key);
            out.push((r.key, e.vector.clone(), e.c_g));
        }
        Ok(out)
    }
}

/// Coordinator-side mean reduction of dense gradients: collects one
/// contribution per worker, then releases the element-wise mean to all of
/// them at once.
#[derive(Debug)]
pub struct DenseReducer {
    expected: usize,
    contributions: Vec<Option<Vec<f32>>>,
}

impl DenseReducer {
    pub fn new(expected: usize) -> Self {
        Self {
            expected,
            contributions: vec![None; expected],
        }
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    /// Add one worker's contribution. Returns the mean once all workers have
    /// contributed, clearing the round.
    pub fn contribute(&mut self, worker_id: usize, grads: Vec<f32>) -> Result<Option<Vec<f32>>> {
        if worker_id >= self.expected {
            return Err(Error::Transport(format!(
                "dense contribution from worker {worker_id}, expected {} workers",
                self.expected
            )));
        }
        if self.contributions[worker_id].is_some() {
            return Err(Error::Transport(format!(
                "duplicate dense contribution from worker {worker_id} in one round"
            )));
        }
        self.contributions[worker_id] = Some(grads);
        if self.contributions.iter().any(|c| c.is_none()) {
            return Ok(None);
        }
        let dim = self.contributions[0].as_ref().map_or(0, |g| g.len());
        let mut mean = vec![0.0f64; dim];
        for c in &self.contributions {
            let g = c.as_ref().expect("round complete");
            if g.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: g.len(),
                });
            }
            for (m, &v) in mean.iter_mut().zip(g) {
                *m += v as f64;
            }
        }
        let n = self.expected as f64;
        for c in &mut self.contributions {
            *c = None;
        }
        Ok(Some(mean.into_iter().map(|m| (m / n) as f32).collect()))
    }
}

/// Outcome of handling one request message.
#[derive(Debug)]
pub enum HandleOutcome {
    /// Immediate reply to the sender.
    Reply(Message),
    /// Dense round still incomplete; the reply is released when the round
    /// closes, via the mean returned to the final contributor's handler.
    DensePending,
    /// Dense round closed: every waiting worker (including the sender)
    /// receives this mean.
    DenseComplete(Vec<f32>),
}

/// The full server: global table plus the dense reduction round. Both
/// transport backends drive the same core, which keeps their observable
/// behavior identical.
#[derive(Debug)]
pub struct ServerCore {
    pub table: GlobalTable,
    pub reducer: DenseReducer,
}

impl ServerCore {
    pub fn new(dim: usize, init_seed: u64, workers: usize) -> Self {
        Self {
            table: GlobalTable::new(dim, init_seed),
            reducer: DenseReducer::new(workers),
        }
    }

    pub fn handle(&mut self, msg: Message) -> Result<HandleOutcome> {
        match msg {
            Message::FetchReq { keys } => Ok(HandleOutcome::Reply(Message::FetchResp {
                entries: self.table.handle_fetch(&keys),
            })),
            Message::EvictReq { records } => {
                self.table.handle_evict(&records)?;
                Ok(HandleOutcome::Reply(Message::EvictAck))
            }
            Message::ClockCheckReq { pairs } => Ok(HandleOutcome::Reply(Message::ClockCheckResp {
                pairs: self.table.handle_clock_check(&pairs)?,
            })),
            Message::SyncReq { records } => Ok(HandleOutcome::Reply(Message::SyncResp {
                entries: self.table.handle_sync(&records)?,
            })),
            Message::FlushReq { records } => {
                self.table.handle_evict(&records)?;
                Ok(HandleOutcome::Reply(Message::FlushAck))
            }
            Message::DenseReduceReq { worker_id, grads } => {
                match self.reducer.contribute(worker_id as usize, grads)? {
                    Some(mean) => Ok(HandleOutcome::DenseComplete(mean)),
                    None => Ok(HandleOutcome::DensePending),
                }
            }
            other => Err(Error::UnexpectedResponse {
                expected: "request",
                got: other.kind_name(),
            }),
        }
    }
}
