//! Experiment configuration and drivers behind the CLI: full simulated runs,
//! cache miss-rate sweeps, staleness-quality sweeps, communication-reduction
//! reports, and dataset generation. Every output file is schema-versioned
//! JSON or CSV and reproduces byte-identically for identical configurations
//! in simulation mode (wall-clock timing is reported on the console, never in
//! files).

use crate::cache::{CachePolicy, CacheTable};
use crate::embedding::{ClockValue, EmbeddingKey, EmbeddingVector, StalenessBound};
use crate::error::{Error, Result};
use crate::recorder::{Recorder, RecorderHandle};
use crate::rng::{domain, mix64};
use crate::trainer::{train, BackendConfig, RunOutcome, Sample, TrainConfig, TrainMode};
use crate::workload::{gen_dataset, gen_eval_set, DatasetSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Top-level experiment configuration, loaded from JSON. Unknown fields are
/// rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub transport: BackendConfig,
    #[serde(default)]
    pub recorder: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        if self.train.dim != self.dataset.dim {
            return Err(Error::Config(format!(
                "train.dim {} must equal dataset.dim {}",
                self.train.dim, self.dataset.dim
            )));
        }
        if self.recorder && self.transport != BackendConfig::Sim {
            return Err(Error::Config(
                "the invariant recorder is simulation-only; use the sim backend".into(),
            ));
        }
        if self.dataset.n_samples < self.train.workers {
            return Err(Error::Config(format!(
                "{} samples cannot be partitioned across {} workers",
                self.dataset.n_samples, self.train.workers
            )));
        }
        Ok(())
    }

    fn recorder_handle(&self, keep_events: bool) -> Option<RecorderHandle> {
        self.recorder
            .then(|| Recorder::new(self.train.staleness, keep_events))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Outcome of `simulate`/`verify-clocks`: the run plus where the report went.
pub struct SimulateOutput {
    pub outcome: RunOutcome,
    pub report_path: Option<PathBuf>,
    pub recorder_log_path: Option<PathBuf>,
}

impl SimulateOutput {
    pub fn violations(&self) -> u64 {
        self.outcome.report.clock_violations + self.outcome.report.conservation_violations
    }
}

/// Run one training job per the config, write `report.json` (and the
/// recorder event log when enabled) into `out`, and return the outcome.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SimulateOutput> {
    cfg.validate()?;
    let keep_events = out.is_some();
    let recorder = cfg.recorder_handle(keep_events);
    let dataset = gen_dataset(&cfg.dataset)?;
    let eval = gen_eval_set(&cfg.dataset)?;
    let outcome = train(&cfg.train, &dataset, &eval, &cfg.transport, recorder.clone())?;

    let mut report_path = None;
    let mut recorder_log_path = None;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("report.json");
        write_json(&path, &outcome.report)?;
        report_path = Some(path);
        if let Some(rec) = &recorder {
            let path = dir.join("recorder.jsonl");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            for event in rec.borrow().events() {
                serde_json::to_writer(&mut w, event)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            recorder_log_path = Some(path);
        }
    }
    Ok(SimulateOutput {
        outcome,
        report_path,
        recorder_log_path,
    })
}

/// One row of the miss-rate sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub cache_fraction: f64,
    pub capacity: usize,
    pub policy: String,
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub miss_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub zipf_alpha: f64,
    pub vocab_size: u64,
    pub trace_len: u64,
    pub distinct_keys: u64,
    pub rows: Vec<SweepRow>,
}

pub fn policy_name(policy: &CachePolicy) -> String {
    match policy {
        CachePolicy::Lru => "lru".into(),
        CachePolicy::Lfu => "lfu".into(),
        CachePolicy::LightLfu { promote_threshold } => format!("light_lfu({promote_threshold})"),
    }
}

/// Replay one fixed access trace (the dataset's raw per-sample key stream)
/// against every (size, policy) pair and report miss rates. Misses install
/// the key and evict per policy with the accessed key pinned, exactly as the
/// read path does; cold misses count.
pub fn cmd_cache_sweep(
    cfg: &ExperimentConfig,
    fractions: &[f64],
    policies: &[CachePolicy],
    out: Option<&Path>,
) -> Result<SweepTable> {
    cfg.validate()?;
    let dataset = gen_dataset(&cfg.dataset)?;
    let trace: Vec<EmbeddingKey> = dataset
        .iter()
        .flat_map(|s| s.keys.iter().copied())
        .collect();
    let distinct: HashSet<EmbeddingKey> = trace.iter().copied().collect();
    let distinct = distinct.len();

    let mut rows = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "cache fraction {fraction} out of (0, 1]"
            )));
        }
        let capacity = ((distinct as f64 * fraction).ceil() as usize).max(1);
        for policy in policies {
            let mut cache = CacheTable::new(capacity, 1, *policy);
            let mut hits = 0u64;
            let mut pin = HashSet::with_capacity(1);
            for &key in &trace {
                if cache.find(key) {
                    hits += 1;
                    cache.get(key)?;
                } else {
                    cache.fetch_install(key, EmbeddingVector::zeros(1), ClockValue::ZERO)?;
                    pin.insert(key);
                    cache.evict_overflow_pinned(&pin)?;
                    pin.clear();
                }
            }
            let accesses = trace.len() as u64;
            let misses = accesses - hits;
            rows.push(SweepRow {
                cache_fraction: fraction,
                capacity,
                policy: policy_name(policy),
                accesses,
                hits,
                misses,
                miss_rate: misses as f64 / accesses as f64,
            });
        }
    }
    let table = SweepTable {
        schema_version: 1,
        zipf_alpha: cfg.dataset.zipf_alpha,
        vocab_size: cfg.dataset.vocab_size,
        trace_len: trace.len() as u64,
        distinct_keys: distinct as u64,
        rows,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("cache_sweep.json"), &table)?;
        let mut csv = String::from("cache_fraction,capacity,policy,accesses,hits,misses,miss_rate\n");
        for r in &table.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                r.cache_fraction, r.capacity, r.policy, r.accesses, r.hits, r.misses, r.miss_rate
            ));
        }
        std::fs::write(dir.join("cache_sweep.csv"), csv)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct StalenessRow {
    pub staleness: String,
    pub auc_per_seed: Vec<f64>,
    pub mean_auc: f64,
    pub stdev_auc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StalenessTable {
    pub schema_version: u32,
    pub seeds: u64,
    pub rows: Vec<StalenessRow>,
}

/// Number of seeds each staleness point is averaged over.
pub const SWEEP_SEEDS: u64 = 5;

/// Train once per (staleness, seed) pair and report mean/stdev final AUC per
/// staleness value.
pub fn cmd_staleness_sweep(
    cfg: &ExperimentConfig,
    s_values: &[StalenessBound],
    out: Option<&Path>,
) -> Result<StalenessTable> {
    cfg.validate()?;
    let dataset = gen_dataset(&cfg.dataset)?;
    let eval = gen_eval_set(&cfg.dataset)?;
    let mut rows = Vec::new();
    for &s in s_values {
        let mut aucs = Vec::new();
        for i in 0..SWEEP_SEEDS {
            let mut tc = cfg.train.clone();
            tc.staleness = s;
            tc.seed = mix64(cfg.train.seed ^ mix64(domain::SWEEP_SEED.wrapping_add(i)));
            let outcome = train(&tc, &dataset, &eval, &cfg.transport, None)?;
            let auc = outcome
                .report
                .final_auc
                .ok_or_else(|| Error::Config("staleness sweep needs eval_samples > 0".into()))?;
            aucs.push(auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / aucs.len() as f64;
        rows.push(StalenessRow {
            staleness: s.to_string(),
            auc_per_seed: aucs,
            mean_auc: mean,
            stdev_auc: var.sqrt(),
        });
    }
    let table = StalenessTable {
        schema_version: 1,
        seeds: SWEEP_SEEDS,
        rows,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("staleness_sweep.json"), &table)?;
        let mut csv = String::from("staleness,mean_auc,stdev_auc\n");
        for r in &table.rows {
            csv.push_str(&format!("{},{:.6},{:.6}\n", r.staleness, r.mean_auc, r.stdev_auc));
        }
        std::fs::write(dir.join("staleness_sweep.csv"), csv)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct CommReport {
    pub schema_version: u32,
    pub cache_embedding_bytes: u64,
    pub nocache_embedding_bytes: u64,
    pub reduction_ratio: f64,
    pub cache_clock_bytes: u64,
    pub cache_total_bytes: u64,
    pub nocache_total_bytes: u64,
}

/// Run the cached and no-cache modes on identical data and schedule, and
/// report embedding-payload totals plus the reduction ratio. Clock bytes are
/// reported separately, not folded into the ratio.
pub fn cmd_comm_report(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<CommReport> {
    cfg.validate()?;
    let dataset = gen_dataset(&cfg.dataset)?;
    let eval: Vec<Sample> = Vec::new();

    let mut cache_cfg = cfg.train.clone();
    cache_cfg.mode = TrainMode::Cache;
    let cache_run = train(&cache_cfg, &dataset, &eval, &cfg.transport, None)?;

    let mut nocache_cfg = cfg.train.clone();
    nocache_cfg.mode = TrainMode::PsNoCache;
    let nocache_run = train(&nocache_cfg, &dataset, &eval, &cfg.transport, None)?;

    let emb = |o: &RunOutcome| {
        o.report.totals.embedding_bytes_sent + o.report.totals.embedding_bytes_received
    };
    let cache_bytes = emb(&cache_run);
    let nocache_bytes = emb(&nocache_run);
    let report = CommReport {
        schema_version: 1,
        cache_embedding_bytes: cache_bytes,
        nocache_embedding_bytes: nocache_bytes,
        reduction_ratio: 1.0 - cache_bytes as f64 / nocache_bytes as f64,
        cache_clock_bytes: cache_run.report.totals.clock_bytes,
        cache_total_bytes: cache_run.report.totals.total_bytes,
        nocache_total_bytes: nocache_run.report.totals.total_bytes,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("comm_report.json"), &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
struct DatasetSidecar<'a> {
    schema_version: u32,
    spec: &'a DatasetSpec,
    popularity_deciles: Vec<f64>,
}

/// Generate the configured dataset, write it as CSV with a JSON sidecar
/// describing the spec, and return the paths.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let dataset = gen_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let csv_path = out.join("dataset.csv");
    crate::workload::write_csv(&csv_path, &dataset)?;
    let sidecar_path = out.join("dataset.spec.json");
    write_json(
        &sidecar_path,
        &DatasetSidecar {
            schema_version: 1,
            spec: &cfg.dataset,
            popularity_deciles: crate::workload::popularity_report(&dataset),
        },
    )?;
    Ok((csv_path, sidecar_path))
}

/// Derive the per-run seed used by sweeps, exposed for tests.
pub fn sweep_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(domain::SWEEP_SEED.wrapping_add(index)))
}

/// A small default configuration, used by tests and as a starting point for
/// `--config` files.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            workers: 8,
            iterations: 500,
            batch_size: 128,
            eta: 0.05,
            staleness: StalenessBound::Finite(100),
            dim: 16,
            cache_fraction: 0.10,
            policy: CachePolicy::Lfu,
            schedule: crate::trainer::ScheduleKind::RoundRobin,
            mode: TrainMode::Cache,
            seed: 42,
            prefetch: false,
            fused_sync: true,
        },
        dataset: DatasetSpec {
            n_samples: 200_000,
            features_per_sample: 8,
            vocab_size: 100_000,
            zipf_alpha: 1.05,
            teacher_seed: 7,
            dim: 16,
            eval_samples: 20_000,
        },
        transport: BackendConfig::Sim,
        recorder: false,
        output_dir: None,
    }
}
