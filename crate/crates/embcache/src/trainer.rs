//! Mini-batch SGD training loop over a single-dense-layer logistic scorer.
//!
//! The model is deliberately minimal: a sample's score is
//! `sigmoid(b + u . sum_k x_k)` over sum-pooled embeddings, which is the
//! smallest model that exercises the full read/write protocol. Dense
//! parameters are replicated per worker and synchronized by mean reduction;
//! embeddings flow through the cached (or direct) client protocol.

use crate::cache::CachePolicy;
use crate::client::{CachedClient, DirectClient, Frontend, StatsSnapshot};
use crate::embedding::{
    init_embedding, ClockValue, EmbeddingKey, EmbeddingVector, StalenessBound, UpdateDelta,
};
use crate::error::{Error, Result};
use crate::recorder::RecorderHandle;
use crate::rng::{domain, SplitMix64};
use crate::server::ServerCore;
use crate::transport::sim::{SimEndpoint, SimNet};
use crate::transport::tcp::{spawn_server, TcpEndpoint};
use crate::transport::{Endpoint, Message};
use crate::cache::CacheTable;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

/// One training sample: categorical feature keys (duplicates allowed) and a
/// binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub keys: Vec<EmbeddingKey>,
    pub label: bool,
}

/// Dense model parameters, replicated on every worker.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub u: Vec<f32>,
    pub b: f32,
}

impl DenseParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[domain::DENSE_INIT]);
        let scale = 1.0 / (dim as f32).sqrt();
        Self {
            u: (0..dim).map(|_| rng.symmetric_f32(scale)).collect(),
            b: 0.0,
        }
    }

    fn flatten(&self) -> Vec<f32> {
        let mut out = self.u.clone();
        out.push(self.b);
        out
    }

    fn assign(&mut self, flat: &[f32]) {
        let d = self.u.len();
        self.u.copy_from_slice(&flat[..d]);
        self.b = flat[d];
    }

    fn step(&mut self, grad: &[f32], eta: f32) {
        for (u, g) in self.u.iter_mut().zip(grad) {
            *u -= eta * g;
        }
        self.b -= eta * grad[self.u.len()];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RoundRobin,
    AsyncRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PsNoCache,
    Cache,
}

/// Transport backend selection. The TCP backend binds an in-process server
/// and connects one framed socket per worker.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Sim,
    Tcp { host: String, port: u16 },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Sim
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub workers: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub eta: f32,
    pub staleness: StalenessBound,
    pub dim: usize,
    pub cache_fraction: f64,
    pub policy: CachePolicy,
    pub schedule: ScheduleKind,
    pub mode: TrainMode,
    pub seed: u64,
    #[serde(default)]
    pub prefetch: bool,
    #[serde(default = "default_true")]
    pub fused_sync: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.cache_fraction > 0.0 && self.cache_fraction <= 1.0) {
            return Err(Error::Config("cache_fraction must be in (0, 1]".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Byte totals across all workers, by category.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ByteTotals {
    pub embedding_bytes_sent: u64,
    pub embedding_bytes_received: u64,
    pub clock_bytes: u64,
    pub total_bytes: u64,
}

/// Per-run metrics. Wall time is deliberately not part of the report so that
/// identical configurations reproduce identical report files.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub loss_curve: Vec<f32>,
    pub final_auc: Option<f64>,
    pub per_worker: Vec<StatsSnapshot>,
    pub totals: ByteTotals,
    pub clock_violations: u64,
    pub conservation_violations: u64,
    pub recorded_events: u64,
}

/// Everything a run produces: the serializable report plus the final model
/// state for oracle comparisons.
pub struct RunOutcome {
    pub report: RunReport,
    pub dense: DenseParams,
    pub globals: Vec<(EmbeddingKey, EmbeddingVector, ClockValue)>,
    pub wall_time: Duration,
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn pooled_sum(sample: &Sample, embeddings: &HashMap<EmbeddingKey, EmbeddingVector>, dim: usize) -> Result<Vec<f32>> {
    let mut pooled = vec![0.0f32; dim];
    for k in &sample.keys {
        let v = embeddings
            .get(k)
            .ok_or(Error::KeyNotCached(k.0))?;
        for (p, x) in pooled.iter_mut().zip(v.values()) {
            *p += x;
        }
    }
    Ok(pooled)
}

/// Per-sample predictions `sigmoid(b + u . sum_k x_k)`, duplicates counted
/// with multiplicity.
pub fn forward(
    batch: &[Sample],
    embeddings: &HashMap<EmbeddingKey, EmbeddingVector>,
    dense: &DenseParams,
) -> Result<Vec<f32>> {
    batch
        .iter()
        .map(|sample| {
            let pooled = pooled_sum(sample, embeddings, dense.u.len())?;
            let z = dense.b + dense.u.iter().zip(&pooled).map(|(u, p)| u * p).sum::<f32>();
            Ok(sigmoid(z))
        })
        .collect()
}

/// Mean binary cross-entropy of a batch.
pub fn bce_loss(preds: &[f32], batch: &[Sample]) -> f32 {
    let eps = 1e-7f32;
    let total: f32 = preds
        .iter()
        .zip(batch)
        .map(|(&p, s)| {
            let p = p.clamp(eps, 1.0 - eps);
            if s.label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / batch.len() as f32
}

/// Gradient of mean BCE. Dense gradients are `[dL/du..., dL/db]`; embedding
/// gradients are summed per key over the batch (duplicates contribute with
/// multiplicity) then scaled by `1/batch_size`.
pub fn backward(
    batch: &[Sample],
    preds: &[f32],
    embeddings: &HashMap<EmbeddingKey, EmbeddingVector>,
    dense: &DenseParams,
) -> Result<(Vec<f32>, HashMap<EmbeddingKey, UpdateDelta>)> {
    let dim = dense.u.len();
    let mut du = vec![0.0f32; dim + 1];
    let mut egrads: HashMap<EmbeddingKey, Vec<f32>> = HashMap::new();
    for (sample, &p) in batch.iter().zip(preds) {
        let e = p - f32::from(u8::from(sample.label));
        let pooled = pooled_sum(sample, embeddings, dim)?;
        for (d, pl) in du.iter_mut().zip(&pooled) {
            *d += e * pl;
        }
        du[dim] += e;
        for k in &sample.keys {
            let g = egrads.entry(*k).or_insert_with(|| vec![0.0; dim]);
            for (gi, ui) in g.iter_mut().zip(&dense.u) {
                *gi += e * ui;
            }
        }
    }
    let inv_b = 1.0 / batch.len() as f32;
    for d in du.iter_mut() {
        *d *= inv_b;
    }
    let egrads = egrads
        .into_iter()
        .map(|(k, mut g)| {
            for gi in g.iter_mut() {
                *gi *= inv_b;
            }
            (k, UpdateDelta::from_vec(g))
        })
        .collect();
    Ok((du, egrads))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied
/// predictions contribute 1/2 through average ranks.
pub fn auc(preds: &[f32], labels: &[bool]) -> Result<f64> {
    assert_eq!(preds.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && preds[order[j]] == preds[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group [i, j) shares the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Score a sample set against a global-table snapshot plus dense parameters.
/// Keys absent from the snapshot score with their deterministic init value,
/// exactly as a lazy fetch would return them.
pub fn evaluate_auc(
    eval: &[Sample],
    globals: &[(EmbeddingKey, EmbeddingVector, ClockValue)],
    dense: &DenseParams,
    dim: usize,
    init_seed: u64,
) -> Result<f64> {
    let table: HashMap<EmbeddingKey, &EmbeddingVector> =
        globals.iter().map(|(k, v, _)| (*k, v)).collect();
    let mut preds = Vec::with_capacity(eval.len());
    let mut labels = Vec::with_capacity(eval.len());
    for sample in eval {
        let mut pooled = vec![0.0f32; dim];
        for k in &sample.keys {
            match table.get(k) {
                Some(v) => {
                    for (p, x) in pooled.iter_mut().zip(v.values()) {
                        *p += x;
                    }
                }
                None => {
                    let v = init_embedding(*k, dim, init_seed);
                    for (p, x) in pooled.iter_mut().zip(v.values()) {
                        *p += x;
                    }
                }
            }
        }
        let z = dense.b + dense.u.iter().zip(&pooled).map(|(u, p)| u * p).sum::<f32>();
        preds.push(sigmoid(z));
        labels.push(sample.label);
    }
    auc(&preds, &labels)
}

/// Deterministic batch sampling: the batch for `(worker, step)` is a pure
/// function of the seed, so schedules can look one batch ahead for prefetch.
fn batch_indices(seed: u64, worker: usize, step: u64, part_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = SplitMix64::derive(seed, &[domain::BATCH, worker as u64, step]);
    (0..batch_size).map(|_| rng.next_index(part_len)).collect()
}

struct WorkerCtx<E: Endpoint> {
    frontend: Frontend<E>,
    dense: DenseParams,
    part_start: usize,
    part_len: usize,
    steps_done: u64,
}

struct StepOutput {
    keys: Vec<EmbeddingKey>,
    egrads: HashMap<EmbeddingKey, UpdateDelta>,
    dense_grad: Vec<f32>,
    loss: f32,
}

fn run_step<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    dataset: &[Sample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutput> {
    let idxs = batch_indices(cfg.seed, ctx_worker_tag(ctx), step, ctx.part_len, cfg.batch_size);
    let batch: Vec<Sample> = idxs
        .iter()
        .map(|&i| dataset[ctx.part_start + i].clone())
        .collect();
    let keys: Vec<EmbeddingKey> = batch.iter().flat_map(|s| s.keys.iter().copied()).collect();
    let embeddings = ctx.frontend.read(&keys)?;
    let preds = forward(&batch, &embeddings, &ctx.dense)?;
    let loss = bce_loss(&preds, &batch);
    if !loss.is_finite() {
        return Err(Error::RunAborted(format!(
            "loss diverged at step {step}; eta {} is outside the stability range",
            cfg.eta
        )));
    }
    let (dense_grad, egrads) = backward(&batch, &preds, &embeddings, &ctx.dense)?;
    Ok(StepOutput {
        keys,
        egrads,
        dense_grad,
        loss,
    })
}

fn ctx_worker_tag<E: Endpoint>(ctx: &WorkerCtx<E>) -> usize {
    // Worker identity doubles as the batch-stream tag.
    ctx.frontend.stats().worker_id
}

/// Pipelined mean reduction: send every worker's vector before collecting any
/// response, so the round closes without deadlock on both backends.
fn reduce_all<E: Endpoint>(workers: &mut [WorkerCtx<E>], payloads: Vec<Vec<f32>>) -> Result<Vec<f32>> {
    for (w, payload) in workers.iter_mut().zip(payloads) {
        let id = ctx_worker_tag(w) as u32;
        w.frontend.endpoint_mut().send(&Message::DenseReduceReq {
            worker_id: id,
            grads: payload,
        })?;
    }
    let mut mean = None;
    for w in workers.iter_mut() {
        let resp = w.frontend.endpoint_mut().recv()?;
        let Message::DenseReduceResp { grads } = resp else {
            return Err(Error::UnexpectedResponse {
                expected: "DenseReduceResp",
                got: resp.kind_name(),
            });
        };
        mean = Some(grads);
    }
    mean.ok_or_else(|| Error::Transport("dense reduction over zero workers".into()))
}

fn run_loop<E: Endpoint>(
    cfg: &TrainConfig,
    dataset: &[Sample],
    mut workers: Vec<WorkerCtx<E>>,
) -> Result<(Vec<f32>, Vec<WorkerCtx<E>>)> {
    let n = workers.len();
    let mut loss_curve = Vec::new();
    match cfg.schedule {
        ScheduleKind::RoundRobin => {
            // Bulk-synchronous: every worker reads and computes against the
            // same iteration state, gradients are mean-reduced, then all
            // workers write back.
            for t in 0..cfg.iterations {
                let mut outs = Vec::with_capacity(n);
                for w in workers.iter_mut() {
                    outs.push(run_step(w, dataset, cfg, t)?);
                }
                let payloads: Vec<Vec<f32>> = outs.iter().map(|o| o.dense_grad.clone()).collect();
                let mean = reduce_all(&mut workers, payloads)?;
                for w in workers.iter_mut() {
                    w.dense.step(&mean, cfg.eta);
                }
                let mut loss_sum = 0.0f32;
                for (w, out) in workers.iter_mut().zip(&outs) {
                    w.frontend.write(&out.keys, &out.egrads, cfg.eta)?;
                    w.steps_done += 1;
                    loss_sum += out.loss;
                }
                if cfg.prefetch && t + 1 < cfg.iterations {
                    for w in workers.iter_mut() {
                        let next = batch_indices(
                            cfg.seed,
                            ctx_worker_tag(w),
                            t + 1,
                            w.part_len,
                            cfg.batch_size,
                        );
                        let keys: Vec<EmbeddingKey> = next
                            .iter()
                            .flat_map(|&i| dataset[w.part_start + i].keys.iter().copied())
                            .collect();
                        w.frontend.prefetch(&keys)?;
                    }
                }
                loss_curve.push(loss_sum / n as f32);
            }
        }
        ScheduleKind::AsyncRandom => {
            // One whole iteration per scheduled worker; dense parameters are
            // updated locally and averaged across workers every N steps.
            let mut sched = SplitMix64::derive(cfg.seed, &[domain::SCHEDULE]);
            let total_steps = cfg.iterations * n as u64;
            for step in 0..total_steps {
                let wi = sched.next_index(n);
                let w = &mut workers[wi];
                let my_step = w.steps_done;
                let out = run_step(w, dataset, cfg, my_step)?;
                w.dense.step(&out.dense_grad, cfg.eta);
                w.frontend.write(&out.keys, &out.egrads, cfg.eta)?;
                w.steps_done += 1;
                if cfg.prefetch {
                    let next = batch_indices(
                        cfg.seed,
                        ctx_worker_tag(w),
                        w.steps_done,
                        w.part_len,
                        cfg.batch_size,
                    );
                    let keys: Vec<EmbeddingKey> = next
                        .iter()
                        .flat_map(|&i| dataset[w.part_start + i].keys.iter().copied())
                        .collect();
                    w.frontend.prefetch(&keys)?;
                }
                loss_curve.push(out.loss);
                if (step + 1) % n as u64 == 0 {
                    let payloads: Vec<Vec<f32>> =
                        workers.iter().map(|w| w.dense.flatten()).collect();
                    let mean = reduce_all(&mut workers, payloads)?;
                    for w in workers.iter_mut() {
                        w.dense.assign(&mean);
                    }
                }
            }
            // Converge the replicas once more before evaluation.
            let payloads: Vec<Vec<f32>> = workers.iter().map(|w| w.dense.flatten()).collect();
            let mean = reduce_all(&mut workers, payloads)?;
            for w in workers.iter_mut() {
                w.dense.assign(&mean);
            }
        }
    }
    Ok((loss_curve, workers))
}

fn build_frontend<E: Endpoint>(
    cfg: &TrainConfig,
    worker: usize,
    endpoint: E,
    capacity: usize,
    recorder: Option<RecorderHandle>,
) -> Frontend<E> {
    match cfg.mode {
        TrainMode::Cache => Frontend::Cached(CachedClient::new(
            worker,
            CacheTable::new(capacity, cfg.dim, cfg.policy),
            endpoint,
            cfg.staleness,
            cfg.fused_sync,
            recorder,
        )),
        TrainMode::PsNoCache => Frontend::Direct(DirectClient::new(worker, endpoint, recorder)),
    }
}

fn distinct_keys(dataset: &[Sample]) -> usize {
    let mut seen: HashSet<EmbeddingKey> = HashSet::new();
    for s in dataset {
        seen.extend(s.keys.iter().copied());
    }
    seen.len()
}

/// Run a full training job: `iterations` rounds per worker, a final flush,
/// and a held-out AUC evaluation against the resulting global table.
pub fn train(
    cfg: &TrainConfig,
    dataset: &[Sample],
    eval_set: &[Sample],
    backend: &BackendConfig,
    recorder: Option<RecorderHandle>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if dataset.iter().any(|s| s.keys.is_empty()) {
        return Err(Error::Config("samples must have at least one key".into()));
    }
    let part_len = dataset.len() / cfg.workers;
    if part_len == 0 {
        return Err(Error::Config(format!(
            "dataset of {} samples cannot be partitioned across {} workers",
            dataset.len(),
            cfg.workers
        )));
    }
    // Cache capacity is a fraction of the realized global table: the distinct
    // keys the run can touch.
    let capacity = ((distinct_keys(dataset) as f64 * cfg.cache_fraction).ceil() as usize).max(1);

    let start = Instant::now();
    let dense0 = DenseParams::init(cfg.dim, cfg.seed);
    fn make_workers<E: Endpoint>(
        cfg: &TrainConfig,
        endpoints: Vec<E>,
        capacity: usize,
        recorder: &Option<RecorderHandle>,
        dense0: &DenseParams,
        part_len: usize,
    ) -> Vec<WorkerCtx<E>> {
        endpoints
            .into_iter()
            .enumerate()
            .map(|(w, ep)| WorkerCtx {
                frontend: build_frontend(cfg, w, ep, capacity, recorder.clone()),
                dense: dense0.clone(),
                part_start: w * part_len,
                part_len,
                steps_done: 0,
            })
            .collect()
    }

    fn finish<E: Endpoint>(
        cfg: &TrainConfig,
        dataset: &[Sample],
        workers: Vec<WorkerCtx<E>>,
    ) -> Result<(Vec<f32>, Vec<StatsSnapshot>, DenseParams)> {
        let (curve, mut workers) = run_loop(cfg, dataset, workers)?;
        for w in workers.iter_mut() {
            w.frontend.flush()?;
        }
        let stats = workers.iter().map(|w| w.frontend.stats()).collect();
        Ok((curve, stats, workers[0].dense.clone()))
    }

    let (loss_curve, per_worker, dense, globals) = match backend {
        BackendConfig::Sim => {
            let net = SimNet::new(ServerCore::new(cfg.dim, cfg.seed, cfg.workers), cfg.workers);
            let endpoints: Vec<SimEndpoint> = (0..cfg.workers)
                .map(|w| SimEndpoint::new(net.clone(), w))
                .collect();
            let workers = make_workers(cfg, endpoints, capacity, &recorder, &dense0, part_len);
            let (curve, stats, dense) = finish(cfg, dataset, workers)?;
            let globals = net.borrow().core().table.snapshot();
            (curve, stats, dense, globals)
        }
        BackendConfig::Tcp { host, port } => {
            if recorder.is_some() {
                return Err(Error::Config(
                    "the invariant recorder is simulation-only; use the sim backend".into(),
                ));
            }
            let server = spawn_server(
                &format!("{host}:{port}"),
                ServerCore::new(cfg.dim, cfg.seed, cfg.workers),
            )?;
            let endpoints = (0..cfg.workers)
                .map(|_| TcpEndpoint::connect(server.addr()))
                .collect::<Result<Vec<_>>>()?;
            let workers = make_workers(cfg, endpoints, capacity, &recorder, &dense0, part_len);
            let (curve, stats, dense) = finish(cfg, dataset, workers)?;
            let globals = server
                .core()
                .lock()
                .expect("server core poisoned")
                .table
                .snapshot();
            (curve, stats, dense, globals)
        }
    };

    let mut totals = ByteTotals::default();
    for s in &per_worker {
        totals.embedding_bytes_sent += s.embedding_bytes_sent;
        totals.embedding_bytes_received += s.embedding_bytes_received;
        totals.clock_bytes += s.clock_bytes;
        totals.total_bytes += s.total_bytes_sent + s.total_bytes_received;
    }

    let final_auc = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate_auc(eval_set, &globals, &dense, cfg.dim, cfg.seed)?)
    };

    let (clock_violations, conservation_violations, recorded_events) = match &recorder {
        Some(rec) => {
            let rec = rec.borrow();
            let bad = rec.verify_conservation(&globals, cfg.dim, cfg.seed, 1e-5);
            (rec.total_violations(), bad.len() as u64, rec.counts().total())
        }
        None => (0, 0, 0),
    };

    Ok(RunOutcome {
        report: RunReport {
            schema_version: 1,
            config: cfg.clone(),
            loss_curve,
            final_auc,
            per_worker,
            totals,
            clock_violations,
            conservation_violations,
            recorded_events,
        },
        dense,
        globals,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(keys: &[u64], label: bool) -> Sample {
        Sample {
            keys: keys.iter().map(|&k| EmbeddingKey(k)).collect(),
            label,
        }
    }

    fn embeddings_of(pairs: &[(u64, Vec<f32>)]) -> HashMap<EmbeddingKey, EmbeddingVector> {
        pairs
            .iter()
            .map(|(k, v)| (EmbeddingKey(*k), EmbeddingVector::from_vec(v.clone())))
            .collect()
    }

    #[test]
    fn forward_sigmoid_values() {
        let dense = DenseParams {
            u: vec![1.0, 0.0],
            b: 0.0,
        };
        // Pooled sum [0, 0] -> 0.5
        let emb = embeddings_of(&[(1, vec![0.0, 0.0])]);
        let preds = forward(&[sample(&[1], true)], &emb, &dense).unwrap();
        assert!((preds[0] - 0.5).abs() < 1e-7);

        // Pooled sum [ln 3, 5] with u=[1,0] -> sigmoid(ln 3) = 3/4
        let emb = embeddings_of(&[(1, vec![3.0f32.ln(), 5.0])]);
        let preds = forward(&[sample(&[1], true)], &emb, &dense).unwrap();
        assert!((preds[0] - 0.75).abs() < 1e-6);

        // Key appearing twice counts with multiplicity: z = 2.
        let emb = embeddings_of(&[(1, vec![1.0, 0.0])]);
        let preds = forward(&[sample(&[1, 1], true)], &emb, &dense).unwrap();
        assert!((preds[0] - sigmoid(2.0)).abs() < 1e-7);
    }

    #[test]
    fn forward_missing_key_errors() {
        let dense = DenseParams {
            u: vec![0.0],
            b: 0.0,
        };
        let emb = embeddings_of(&[]);
        assert!(forward(&[sample(&[3], false)], &emb, &dense).is_err());
    }

    #[test]
    fn backward_logistic_gradient() {
        let dense = DenseParams {
            u: vec![1.0, 0.0],
            b: 0.0,
        };
        let emb = embeddings_of(&[(1, vec![0.0, 0.0])]);
        let batch = vec![sample(&[1], true)];
        let preds = vec![0.5f32];
        let (_du, eg) = backward(&batch, &preds, &emb, &dense).unwrap();
        assert_eq!(eg[&EmbeddingKey(1)].values(), &[-0.5, 0.0]);
    }

    #[test]
    fn backward_zero_when_prediction_matches() {
        let dense = DenseParams {
            u: vec![0.5, -0.5],
            b: 0.1,
        };
        let emb = embeddings_of(&[(1, vec![0.3, 0.4])]);
        let batch = vec![sample(&[1], true)];
        let (du, eg) = backward(&batch, &[1.0], &emb, &dense).unwrap();
        assert!(du.iter().all(|&g| g == 0.0));
        assert!(eg[&EmbeddingKey(1)].values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Central-difference oracle in f64 over random small instances.
        let mut rng = SplitMix64::new(17);
        for case in 0..100 {
            let dim = 2 + rng.next_index(3);
            let n_keys = 1 + rng.next_index(4);
            let batch: Vec<Sample> = (0..1 + rng.next_index(3))
                .map(|_| {
                    let keys: Vec<u64> =
                        (0..1 + rng.next_index(4)).map(|_| 1 + rng.next_index(n_keys) as u64).collect();
                    sample(&keys, rng.next_bool(0.5))
                })
                .collect();
            let emb_pairs: Vec<(u64, Vec<f32>)> = (1..=n_keys as u64)
                .map(|k| (k, (0..dim).map(|_| rng.symmetric_f32(0.8)).collect()))
                .collect();
            let embeddings = embeddings_of(&emb_pairs);
            let dense = DenseParams {
                u: (0..dim).map(|_| rng.symmetric_f32(0.8)).collect(),
                b: rng.symmetric_f32(0.2),
            };

            let preds = forward(&batch, &embeddings, &dense).unwrap();
            let (du, eg) = backward(&batch, &preds, &embeddings, &dense).unwrap();

            // f64 replica of the mean BCE loss as a function of any parameter.
            let loss_f64 = |emb: &HashMap<EmbeddingKey, EmbeddingVector>, dense: &DenseParams| -> f64 {
                let mut total = 0.0f64;
                for s in &batch {
                    let mut pooled = vec![0.0f64; dim];
                    for k in &s.keys {
                        for (p, &x) in pooled.iter_mut().zip(emb[k].values()) {
                            *p += x as f64;
                        }
                    }
                    let z: f64 = dense.b as f64
                        + dense
                            .u
                            .iter()
                            .zip(&pooled)
                            .map(|(&u, &p)| u as f64 * p)
                            .sum::<f64>();
                    let p = 1.0 / (1.0 + (-z).exp());
                    total += if s.label { -p.ln() } else { -(1.0 - p).ln() };
                }
                total / batch.len() as f64
            };

            let h = 1e-3f32;
            let check = |analytic: f32, plus: f64, minus: f64, what: &str| {
                let fd = (plus - minus) / (2.0 * h as f64);
                let denom = (analytic as f64).abs().max(fd.abs()).max(1e-4);
                let rel = ((analytic as f64) - fd).abs() / denom;
                assert!(
                    rel <= 1e-4,
                    "case {case} {what}: analytic {analytic} vs fd {fd} (rel {rel:.2e})"
                );
            };

            for i in 0..dim {
                let mut dp = dense.clone();
                dp.u[i] += h;
                let mut dm = dense.clone();
                dm.u[i] -= h;
                check(du[i], loss_f64(&embeddings, &dp), loss_f64(&embeddings, &dm), "du");
            }
            {
                let mut dp = dense.clone();
                dp.b += h;
                let mut dm = dense.clone();
                dm.b -= h;
                check(du[dim], loss_f64(&embeddings, &dp), loss_f64(&embeddings, &dm), "db");
            }
            for (k, g) in &eg {
                for i in 0..dim {
                    let perturb = |sign: f32| {
                        let mut e2: HashMap<EmbeddingKey, EmbeddingVector> = embeddings.clone();
                        let mut v = e2[k].values().to_vec();
                        v[i] += sign * h;
                        e2.insert(*k, EmbeddingVector::from_vec(v));
                        loss_f64(&e2, &dense)
                    };
                    check(g.values()[i], perturb(1.0), perturb(-1.0), "dx");
                }
            }
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn auc_with_partial_ties() {
        // preds: pos {0.8, 0.5}, neg {0.5, 0.2}: pairs = 4,
        // wins = 3, tie = 1 -> (3 + 0.5) / 4
        let a = auc(&[0.8, 0.5, 0.5, 0.2], &[true, true, false, false]).unwrap();
        assert!((a - 0.875).abs() < 1e-12);
    }

    #[test]
    fn dense_reduce_identity_all_equal() {
        let cfg = TrainConfig {
            workers: 2,
            iterations: 3,
            batch_size: 4,
            eta: 0.1,
            staleness: StalenessBound::ZERO,
            dim: 4,
            cache_fraction: 1.0,
            policy: CachePolicy::Lfu,
            schedule: ScheduleKind::RoundRobin,
            mode: TrainMode::Cache,
            seed: 5,
            prefetch: false,
            fused_sync: true,
        };
        let spec = crate::workload::DatasetSpec {
            n_samples: 64,
            features_per_sample: 3,
            vocab_size: 40,
            zipf_alpha: 1.0,
            teacher_seed: 3,
            dim: 4,
            eval_samples: 0,
        };
        let data = crate::workload::gen_dataset(&spec).unwrap();
        let out = train(&cfg, &data, &[], &BackendConfig::Sim, None).unwrap();
        assert_eq!(out.report.loss_curve.len(), 3);
        assert!(out.report.loss_curve.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig {
            workers: 0,
            iterations: 1,
            batch_size: 1,
            eta: 0.1,
            staleness: StalenessBound::Infinite,
            dim: 2,
            cache_fraction: 0.5,
            policy: CachePolicy::Lru,
            schedule: ScheduleKind::RoundRobin,
            mode: TrainMode::Cache,
            seed: 1,
            prefetch: false,
            fused_sync: true,
        };
        assert!(cfg.validate().is_err());
        cfg.workers = 1;
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        cfg.eta = 0.1;
        cfg.cache_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.cache_fraction = 1.0;
        assert!(cfg.validate().is_ok());
    }
}
