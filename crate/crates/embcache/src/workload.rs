//! Synthetic skewed dataset generation and ingestion.
//!
//! Keys are drawn from a Zipf law over `[1, m]` so a small head of hot keys
//! dominates the access stream, and labels come from a hidden teacher model
//! so the dataset is learnable by construction. Generation is fully
//! deterministic: the Zipf inverse CDF is frozen into 63-bit fixed-point and
//! all draws come from counter-based streams keyed on the spec's seed.

use crate::embedding::EmbeddingKey;
use crate::error::{Error, Result};
use crate::rng::{domain, mix64, SplitMix64};
use crate::trainer::Sample;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Shape of a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub features_per_sample: usize,
    pub vocab_size: u64,
    pub zipf_alpha: f64,
    pub teacher_seed: u64,
    pub dim: usize,
    /// Held-out samples generated for final AUC evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    20_000
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features_per_sample < 1 {
            return Err(Error::Config("features_per_sample must be >= 1".into()));
        }
        if self.vocab_size < self.features_per_sample as u64 {
            return Err(Error::Config(format!(
                "vocab_size {} must be >= features_per_sample {}",
                self.vocab_size, self.features_per_sample
            )));
        }
        if self.zipf_alpha <= 0.0 {
            return Err(Error::Config("zipf_alpha must be > 0".into()));
        }
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF Zipf sampler: `P(rank r) = r^-alpha / H(m, alpha)`.
/// The CDF is precomputed into 63-bit fixed point, so sampling itself
/// involves no floating point.
pub struct ZipfSampler {
    cum: Vec<u64>,
}

const CDF_SCALE: f64 = (1u64 << 63) as f64;

impl ZipfSampler {
    pub fn new(alpha: f64, m: u64) -> Self {
        assert!(alpha > 0.0 && m >= 1);
        let mut weights = Vec::with_capacity(m as usize);
        let mut total = 0.0f64;
        for r in 1..=m {
            let w = (r as f64).powf(-alpha);
            total += w;
            weights.push(w);
        }
        let mut cum = Vec::with_capacity(m as usize);
        let mut acc = 0.0f64;
        for w in &weights {
            acc += w;
            cum.push(((acc / total) * CDF_SCALE) as u64);
        }
        // Guard against rounding leaving the last bucket short.
        *cum.last_mut().expect("m >= 1") = 1u64 << 63;
        Self { cum }
    }

    pub fn vocab(&self) -> u64 {
        self.cum.len() as u64
    }

    /// Analytic probability of rank `r` (1-based), as frozen into the table.
    pub fn probability(&self, r: u64) -> f64 {
        let idx = (r - 1) as usize;
        let lo = if idx == 0 { 0 } else { self.cum[idx - 1] };
        (self.cum[idx] - lo) as f64 / CDF_SCALE
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> EmbeddingKey {
        let u = rng.next_u64() >> 1; // 63-bit draw
        let idx = self.cum.partition_point(|&c| c <= u);
        EmbeddingKey(idx as u64 + 1)
    }
}

/// Hidden teacher: fixed per-key embeddings and a fixed dense head, all
/// derived from `teacher_seed`. The logit is normalized so its standard
/// deviation is roughly `LOGIT_STD` regardless of `F` and `D`, which leaves
/// headroom between good and degraded training.
pub struct Teacher {
    u: Vec<f32>,
    seed: u64,
    dim: usize,
    scale: f32,
}

const LOGIT_STD: f64 = 2.0;

impl Teacher {
    pub fn new(spec: &DatasetSpec) -> Self {
        let mut rng = SplitMix64::derive(spec.teacher_seed, &[domain::TEACHER_DENSE]);
        let u: Vec<f32> = (0..spec.dim).map(|_| rng.symmetric_f32(1.0)).collect();
        // Each (key, dim) term of u . sum(t_k) has variance 1/9.
        let raw_std = ((spec.features_per_sample * spec.dim) as f64 / 9.0).sqrt();
        Self {
            u,
            seed: spec.teacher_seed,
            dim: spec.dim,
            scale: (LOGIT_STD / raw_std) as f32,
        }
    }

    fn embed(&self, key: EmbeddingKey) -> Vec<f32> {
        let mut rng = SplitMix64::derive(self.seed, &[domain::TEACHER_EMB, key.0]);
        (0..self.dim).map(|_| rng.symmetric_f32(1.0)).collect()
    }

    pub fn logit(&self, keys: &[EmbeddingKey]) -> f32 {
        let mut z = 0.0f32;
        for &k in keys {
            let t = self.embed(k);
            for (u, t) in self.u.iter().zip(&t) {
                z += u * t;
            }
        }
        z * self.scale
    }

    pub fn label(&self, keys: &[EmbeddingKey], rng: &mut SplitMix64) -> bool {
        let z = self.logit(keys) as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        rng.next_bool(p)
    }
}

fn gen_with_domains(
    spec: &DatasetSpec,
    n: usize,
    key_domain: u64,
    label_domain: u64,
) -> Vec<Sample> {
    let zipf = ZipfSampler::new(spec.zipf_alpha, spec.vocab_size);
    let teacher = Teacher::new(spec);
    let mut key_rng = SplitMix64::derive(spec.teacher_seed, &[key_domain]);
    let mut label_rng = SplitMix64::derive(spec.teacher_seed, &[label_domain]);
    (0..n)
        .map(|_| {
            let keys: Vec<EmbeddingKey> = (0..spec.features_per_sample)
                .map(|_| zipf.sample(&mut key_rng))
                .collect();
            let label = teacher.label(&keys, &mut label_rng);
            Sample { keys, label }
        })
        .collect()
}

/// Generate the training dataset: each sample draws `F` keys i.i.d. from the
/// Zipf law (duplicates kept) and a teacher-model label.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(gen_with_domains(
        spec,
        spec.n_samples,
        domain::DATA_KEYS,
        domain::DATA_LABELS,
    ))
}

/// Held-out evaluation samples from the same law and teacher, on independent
/// streams.
pub fn gen_eval_set(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(gen_with_domains(
        spec,
        spec.eval_samples,
        domain::EVAL_KEYS,
        domain::EVAL_LABELS,
    ))
}

/// Generate a dataset whose key space is partitioned: the samples destined
/// for worker `w` (the `w`-th contiguous chunk) draw only from the `w`-th
/// slice of the vocabulary. No two workers ever touch the same key, which
/// removes cross-worker write conflicts; protocol-equivalence oracles rely on
/// this. Labels still come from the one global teacher.
pub fn gen_disjoint_dataset(spec: &DatasetSpec, workers: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let w = workers as u64;
    let span = spec.vocab_size / w;
    if span < spec.features_per_sample as u64 {
        return Err(Error::Config(format!(
            "vocab_size {} too small to split across {workers} workers",
            spec.vocab_size
        )));
    }
    let zipf = ZipfSampler::new(spec.zipf_alpha, span);
    let teacher = Teacher::new(spec);
    let per = spec.n_samples / workers;
    let mut out = Vec::with_capacity(per * workers);
    for worker in 0..w {
        let mut key_rng = SplitMix64::derive(spec.teacher_seed, &[domain::DATA_KEYS, worker]);
        let mut label_rng = SplitMix64::derive(spec.teacher_seed, &[domain::DATA_LABELS, worker]);
        let offset = worker * span;
        for _ in 0..per {
            let keys: Vec<EmbeddingKey> = (0..spec.features_per_sample)
                .map(|_| EmbeddingKey(zipf.sample(&mut key_rng).0 + offset))
                .collect();
            let label = teacher.label(&keys, &mut label_rng);
            out.push(Sample { keys, label });
        }
    }
    Ok(out)
}

/// Cumulative update-share curve: sort keys by access count descending and
/// report the share held by the top 10%, 20%, ..., 100% of keys.
pub fn popularity_report(dataset: &[Sample]) -> Vec<f64> {
    let mut counts: std::collections::HashMap<EmbeddingKey, u64> = std::collections::HashMap::new();
    let mut total = 0u64;
    for s in dataset {
        for &k in &s.keys {
            *counts.entry(k).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut by_count: Vec<u64> = counts.into_values().collect();
    by_count.sort_unstable_by(|a, b| b.cmp(a));
    let n = by_count.len();
    let mut shares = Vec::with_capacity(10);
    let mut acc = 0u64;
    let mut consumed = 0usize;
    for decile in 1..=10usize {
        let upto = (n * decile).div_ceil(10);
        while consumed < upto {
            acc += by_count[consumed];
            consumed += 1;
        }
        shares.push(acc as f64 / total as f64);
    }
    shares
}

/// Write a dataset as CSV: one line per sample, `label,key key key ...`.
pub fn write_csv(path: &Path, dataset: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in dataset {
        let keys: Vec<String> = s.keys.iter().map(|k| k.0.to_string()).collect();
        writeln!(w, "{},{}", u8::from(s.label), keys.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset from CSV. With a vocab cap, keys are hashed into `[1, m]`.
pub fn load_csv(path: &Path, vocab_cap: Option<u64>) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label_part, keys_part) = line.split_once(',').ok_or(Error::DatasetParse {
            line: lineno,
            reason: "expected `label,key key ...`".into(),
        })?;
        let label = match label_part.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::DatasetParse {
                    line: lineno,
                    reason: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let mut keys = Vec::new();
        for tok in keys_part.split_whitespace() {
            let raw: u64 = tok.parse().map_err(|_| Error::DatasetParse {
                line: lineno,
                reason: format!("invalid key {tok:?}"),
            })?;
            let key = match vocab_cap {
                Some(m) => mix64(raw) % m + 1,
                None => raw,
            };
            keys.push(EmbeddingKey(key));
        }
        if keys.is_empty() {
            return Err(Error::DatasetParse {
                line: lineno,
                reason: "sample has no keys".into(),
            });
        }
        out.push(Sample { keys, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            n_samples: 1000,
            features_per_sample: 4,
            vocab_size: 500,
            zipf_alpha: 1.05,
            teacher_seed: 7,
            dim: 8,
            eval_samples: 100,
        }
    }

    #[test]
    fn zipf_alpha_one_matches_harmonic_normalization() {
        let z = ZipfSampler::new(1.0, 3);
        // P(1) = 1 / (1 + 1/2 + 1/3) = 6/11
        assert!((z.probability(1) - 6.0 / 11.0).abs() < 1e-12);
        assert!((z.probability(2) - 3.0 / 11.0).abs() < 1e-12);
        assert!((z.probability(3) - 2.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn zipf_single_key_vocab() {
        let z = ZipfSampler::new(1.5, 1);
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            assert_eq!(z.sample(&mut rng), EmbeddingKey(1));
        }
    }

    #[test]
    fn zipf_goodness_of_fit() {
        // Chi-square over 10^6 draws at significance 0.01, tail binned so all
        // expected counts stay comfortably large.
        let m = 1000u64;
        let z = ZipfSampler::new(1.05, m);
        let mut rng = SplitMix64::derive(3, &[domain::DATA_KEYS]);
        let draws = 1_000_000usize;
        let mut counts = vec![0u64; m as usize];
        for _ in 0..draws {
            counts[(z.sample(&mut rng).0 - 1) as usize] += 1;
        }
        // Bin: ranks 1..=100 individually, the rest in geometric groups.
        let mut bins: Vec<(std::ops::Range<usize>, f64)> = Vec::new();
        for r in 0..100usize {
            bins.push((r..r + 1, z.probability(r as u64 + 1)));
        }
        let mut lo = 100usize;
        while lo < m as usize {
            let hi = (lo * 2).min(m as usize);
            let p: f64 = (lo..hi).map(|r| z.probability(r as u64 + 1)).sum();
            bins.push((lo..hi, p));
            lo = hi;
        }
        let mut chi2 = 0.0f64;
        for (range, p) in &bins {
            let observed: u64 = counts[range.clone()].iter().sum();
            let expected = p * draws as f64;
            assert!(expected >= 5.0, "bin {range:?} too small");
            chi2 += (observed as f64 - expected).powi(2) / expected;
        }
        let df = (bins.len() - 1) as f64;
        // Wilson-Hilferty approximation of the chi-square 0.99 quantile.
        let zq = 2.326_347_874_040_841;
        let crit = df * (1.0 - 2.0 / (9.0 * df) + zq * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(
            chi2 < crit,
            "chi2 {chi2:.1} exceeds the 0.99 critical value {crit:.1} with {df} df"
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&spec()).unwrap();
        let b = gen_dataset(&spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_teacher_head_gives_balanced_labels() {
        // With u* = 0 every logit is 0 and labels are Bernoulli(1/2).
        let mut s = spec();
        s.n_samples = 20_000;
        let zipf = ZipfSampler::new(s.zipf_alpha, s.vocab_size);
        let teacher = Teacher {
            u: vec![0.0; s.dim],
            seed: s.teacher_seed,
            dim: s.dim,
            scale: 1.0,
        };
        let mut key_rng = SplitMix64::derive(1, &[domain::DATA_KEYS]);
        let mut label_rng = SplitMix64::derive(1, &[domain::DATA_LABELS]);
        let mut positives = 0usize;
        for _ in 0..s.n_samples {
            let keys: Vec<EmbeddingKey> = (0..s.features_per_sample)
                .map(|_| zipf.sample(&mut key_rng))
                .collect();
            if teacher.label(&keys, &mut label_rng) {
                positives += 1;
            }
        }
        let rate = positives as f64 / s.n_samples as f64;
        assert!((rate - 0.5).abs() < 0.02, "positive rate {rate}");
    }

    #[test]
    fn labels_have_both_classes() {
        let data = gen_dataset(&spec()).unwrap();
        assert!(data.iter().any(|s| s.label));
        assert!(data.iter().any(|s| !s.label));
    }

    #[test]
    fn popularity_uniform_and_monotone() {
        // One access per key: top 10% of keys hold 10% of accesses.
        let data: Vec<Sample> = (1..=1000u64)
            .map(|k| Sample {
                keys: vec![EmbeddingKey(k)],
                label: false,
            })
            .collect();
        let shares = popularity_report(&data);
        assert!((shares[0] - 0.1).abs() < 1e-9);
        assert!((shares[9] - 1.0).abs() < 1e-9);
        for w in shares.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn skewed_popularity_concentrates() {
        let mut s = spec();
        s.vocab_size = 10_000;
        s.n_samples = 50_000;
        s.features_per_sample = 8;
        let data = gen_dataset(&s).unwrap();
        let shares = popularity_report(&data);
        assert!(shares[0] > 0.5, "top decile share {}", shares[0]);
        assert!((shares[9] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = gen_dataset(&spec()).unwrap();
        write_csv(&path, &data).unwrap();
        let back = load_csv(&path, None).unwrap();
        assert_eq!(back, data);

        std::fs::write(&path, "1,5 7 5\n").unwrap();
        let one = load_csv(&path, None).unwrap();
        assert_eq!(one[0].keys, vec![EmbeddingKey(5), EmbeddingKey(7), EmbeddingKey(5)]);
        assert!(one[0].label);

        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path, None).unwrap().is_empty());

        std::fs::write(&path, "2,5\n").unwrap();
        let err = load_csv(&path, None).unwrap_err();
        assert!(matches!(err, Error::DatasetParse { line: 1, .. }));
    }

    #[test]
    fn csv_vocab_cap_hashes_into_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "0,999999999 123456789\n").unwrap();
        let data = load_csv(&path, Some(100)).unwrap();
        for k in &data[0].keys {
            assert!((1..=100).contains(&k.0));
        }
    }

    #[test]
    fn disjoint_dataset_splits_key_ranges() {
        let mut s = spec();
        s.n_samples = 400;
        s.vocab_size = 400;
        let workers = 4;
        let data = gen_disjoint_dataset(&s, workers).unwrap();
        let per = data.len() / workers;
        let span = s.vocab_size / workers as u64;
        for (w, chunk) in data.chunks(per).enumerate() {
            let lo = w as u64 * span + 1;
            let hi = (w as u64 + 1) * span;
            for sample in chunk {
                for k in &sample.keys {
                    assert!((lo..=hi).contains(&k.0), "worker {w} key {k}");
                }
            }
        }
    }
}
