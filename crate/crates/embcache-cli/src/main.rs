//! Command-line entry point for the cache-enabled embedding trainer.
//!
//! Exit code is 0 iff the requested runs completed with every run-level
//! invariant intact (zero clock-bound or conservation violations).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use embcache::cache::CachePolicy;
use embcache::embedding::StalenessBound;
use embcache::harness::{
    cmd_cache_sweep, cmd_comm_report, cmd_gen_data, cmd_simulate, cmd_staleness_sweep,
    ExperimentConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "embcache", version, about = "Cache-enabled embedding model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Path to the experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for result files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset as CSV plus a JSON sidecar.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training job and write its report.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Replay the dataset's access trace across cache sizes and policies.
    CacheSweep {
        #[command(flatten)]
        common: Common,
        /// Cache sizes as fractions of the distinct key count.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.03, 0.05, 0.10, 0.15])]
        sizes: Vec<f64>,
        /// Policies: lru, lfu, light_lfu.
        #[arg(long, value_delimiter = ',', default_values_t = vec![
            "lru".to_string(), "lfu".to_string(), "light_lfu".to_string()
        ])]
        policies: Vec<String>,
    },
    /// Train across a staleness grid, five seeds per point.
    StalenessSweep {
        #[command(flatten)]
        common: Common,
        /// Staleness values: numbers or "inf".
        #[arg(long, value_delimiter = ',', default_values_t = vec![
            "0".to_string(), "100".to_string(), "10000".to_string(), "inf".to_string()
        ])]
        s_values: Vec<String>,
    },
    /// Compare embedding traffic of the cached and no-cache modes.
    CommReport {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate with the invariant recorder forced on.
    VerifyClocks {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir<'a>(common: &'a Common, cfg: &'a ExperimentConfig) -> Option<&'a std::path::Path> {
    common
        .out
        .as_deref()
        .or(cfg.output_dir.as_deref())
}

fn parse_policy(name: &str) -> Result<CachePolicy> {
    match name {
        "lru" => Ok(CachePolicy::Lru),
        "lfu" => Ok(CachePolicy::Lfu),
        "light_lfu" => Ok(CachePolicy::LightLfu {
            promote_threshold: embcache::cache::default_promote_threshold(),
        }),
        other => bail!("unknown policy {other:?} (expected lru, lfu, light_lfu)"),
    }
}

fn parse_staleness(raw: &str) -> Result<StalenessBound> {
    if raw == "inf" || raw == "infinite" {
        return Ok(StalenessBound::Infinite);
    }
    let s: u64 = raw
        .parse()
        .with_context(|| format!("staleness {raw:?} is not a number or \"inf\""))?;
    Ok(StalenessBound::Finite(s))
}

fn run_simulate(cfg: &ExperimentConfig, out: Option<&std::path::Path>) -> Result<()> {
    let result = cmd_simulate(cfg, out)?;
    let report = &result.outcome.report;
    println!(
        "finished: {} iterations x {} workers in {:.2?} (sim)",
        report.config.iterations,
        report.config.workers,
        result.outcome.wall_time
    );
    if let Some(auc) = report.final_auc {
        println!("final AUC: {auc:.4}");
    }
    println!(
        "embedding bytes: sent {} received {}; clock bytes {}",
        report.totals.embedding_bytes_sent,
        report.totals.embedding_bytes_received,
        report.totals.clock_bytes
    );
    if cfg.recorder {
        println!(
            "recorder: {} events, {} clock violations, {} conservation violations",
            report.recorded_events, report.clock_violations, report.conservation_violations
        );
    }
    if let Some(path) = &result.report_path {
        println!("report: {}", path.display());
    }
    if let Some(path) = &result.recorder_log_path {
        println!("recorder log: {}", path.display());
    }
    if result.violations() > 0 {
        bail!("{} invariant violations detected", result.violations());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg)
                .context("gen-data needs --out or output_dir in the config")?
                .to_path_buf();
            let (csv, sidecar) = cmd_gen_data(&cfg, &out)?;
            println!("dataset: {}", csv.display());
            println!("sidecar: {}", sidecar.display());
        }
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            run_simulate(&cfg, out_dir(&common, &cfg))?;
        }
        Command::VerifyClocks { common } => {
            let mut cfg = load_config(&common)?;
            cfg.recorder = true;
            run_simulate(&cfg, out_dir(&common, &cfg))?;
        }
        Command::CacheSweep {
            common,
            sizes,
            policies,
        } => {
            let cfg = load_config(&common)?;
            let policies = policies
                .iter()
                .map(|p| parse_policy(p))
                .collect::<Result<Vec<_>>>()?;
            let table = cmd_cache_sweep(&cfg, &sizes, &policies, out_dir(&common, &cfg))?;
            println!("fraction  capacity  policy           miss_rate");
            for r in &table.rows {
                println!(
                    "{:<9} {:<9} {:<16} {:.4}",
                    r.cache_fraction, r.capacity, r.policy, r.miss_rate
                );
            }
        }
        Command::StalenessSweep { common, s_values } => {
            let cfg = load_config(&common)?;
            let s_values = s_values
                .iter()
                .map(|s| parse_staleness(s))
                .collect::<Result<Vec<_>>>()?;
            let table = cmd_staleness_sweep(&cfg, &s_values, out_dir(&common, &cfg))?;
            println!("staleness  mean_auc  stdev ({} seeds)", table.seeds);
            for r in &table.rows {
                println!("{:<10} {:.4}    {:.4}", r.staleness, r.mean_auc, r.stdev_auc);
            }
        }
        Command::CommReport { common } => {
            let cfg = load_config(&common)?;
            let report = cmd_comm_report(&cfg, out_dir(&common, &cfg))?;
            println!(
                "embedding bytes: cache {} vs no-cache {}",
                report.cache_embedding_bytes, report.nocache_embedding_bytes
            );
            println!(
                "reduction: {:.1}% (clock overhead {} bytes)",
                report.reduction_ratio * 100.0,
                report.cache_clock_bytes
            );
        }
    }
    Ok(())
}
