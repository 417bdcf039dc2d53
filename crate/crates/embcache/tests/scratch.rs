//! Temporary calibration scratchpad (deleted before release).

use embcache::cache::CachePolicy;
use embcache::embedding::StalenessBound;
use embcache::trainer::{train, BackendConfig, ScheduleKind, TrainConfig, TrainMode};
use embcache::workload::{gen_disjoint_dataset, gen_eval_set, DatasetSpec};

fn rel_diff(a: f32, b: f32) -> f64 {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

#[test]
#[ignore]
fn oracle_equivalence_probe() {
    let spec = DatasetSpec {
        n_samples: 4000,
        features_per_sample: 4,
        vocab_size: 1000,
        zipf_alpha: 1.05,
        teacher_seed: 11,
        dim: 8,
        eval_samples: 0,
    };
    let workers = 4;
    let dataset = gen_disjoint_dataset(&spec, workers).unwrap();
    let mut cfg = TrainConfig {
        workers,
        iterations: 2000,
        batch_size: 16,
        eta: 0.1,
        staleness: StalenessBound::ZERO,
        dim: 8,
        cache_fraction: 0.10,
        policy: CachePolicy::Lfu,
        schedule: ScheduleKind::RoundRobin,
        mode: TrainMode::Cache,
        seed: 4242,
        prefetch: false,
        fused_sync: true,
    };
    let t0 = std::time::Instant::now();
    let cache_run = train(&cfg, &dataset, &[], &BackendConfig::Sim, None).unwrap();
    cfg.mode = TrainMode::PsNoCache;
    let ps_run = train(&cfg, &dataset, &[], &BackendConfig::Sim, None).unwrap();
    println!("two runs took {:.2?}", t0.elapsed());

    let mut max_rel = 0.0f64;
    assert_eq!(cache_run.globals.len(), ps_run.globals.len());
    for ((ka, va, _), (kb, vb, _)) in cache_run.globals.iter().zip(&ps_run.globals) {
        assert_eq!(ka, kb);
        for (a, b) in va.values().iter().zip(vb.values()) {
            max_rel = max_rel.max(rel_diff(*a, *b));
        }
    }
    let mut dense_rel = 0.0f64;
    for (a, b) in cache_run.dense.u.iter().zip(&ps_run.dense.u) {
        dense_rel = dense_rel.max(rel_diff(*a, *b));
    }
    dense_rel = dense_rel.max(rel_diff(cache_run.dense.b, ps_run.dense.b));
    println!("max embedding rel diff: {max_rel:.3e}");
    println!("max dense rel diff: {dense_rel:.3e}");
    println!(
        "cache-mode final loss {:.4}, ps {:.4}",
        cache_run.report.loss_curve.last().unwrap(),
        ps_run.report.loss_curve.last().unwrap()
    );
    let s = &cache_run.report.per_worker[0];
    println!(
        "worker0 hits {} misses {} invalid {}",
        s.cache_hits, s.cache_misses, s.invalid_hits
    );
    assert!(max_rel <= 1e-6 && dense_rel <= 1e-6);
}

#[test]
#[ignore]
fn staleness_auc_probe() {
    let spec = DatasetSpec {
        n_samples: 60_000,
        features_per_sample: 8,
        vocab_size: 10_000,
        zipf_alpha: 1.05,
        teacher_seed: 11,
        dim: 16,
        eval_samples: 20_000,
    };
    let dataset = embcache::workload::gen_dataset(&spec).unwrap();
    let eval = gen_eval_set(&spec).unwrap();
    for (eta, iters, sched) in [
        (0.01f32, 2500u64, ScheduleKind::AsyncRandom),
        (0.01, 2500, ScheduleKind::RoundRobin),
        (0.02, 1500, ScheduleKind::AsyncRandom),
    ] {
        println!("--- eta={eta} T={iters} {sched:?} ---");
        for s in [
            StalenessBound::Finite(0),
            StalenessBound::Finite(100),
            StalenessBound::Finite(10_000),
            StalenessBound::Infinite,
        ] {
            let mut aucs = Vec::new();
            let t0 = std::time::Instant::now();
            for seed in [7u64, 8, 9] {
                let cfg = TrainConfig {
                    workers: 8,
                    iterations: iters,
                    batch_size: 64,
                    eta,
                    staleness: s,
                    dim: 16,
                    cache_fraction: 0.10,
                    policy: CachePolicy::Lfu,
                    schedule: sched,
                    mode: TrainMode::Cache,
                    seed,
                    prefetch: false,
                    fused_sync: true,
                };
                let out = train(&cfg, &dataset, &eval, &BackendConfig::Sim, None).unwrap();
                aucs.push(out.report.final_auc.unwrap());
            }
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            println!(
                "s={s}: mean auc {:.4} (seeds {:?}) 3 runs in {:.2?}",
                mean,
                aucs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
                t0.elapsed()
            );
        }
    }
}
