//! Counter-based deterministic random number generation.
//!
//! Everything random in this crate (embedding initialization, dataset
//! generation, batch sampling, schedules) flows through [`SplitMix64`] streams
//! derived from a seed plus domain tags. Streams keyed on the same inputs
//! produce identical output on every platform, which is what makes runs and
//! generated datasets reproducible byte for byte.

/// Domain tags used to derive independent streams from one seed.
pub mod domain {
    pub const EMBED_INIT: u64 = 0x01;
    pub const TEACHER_EMB: u64 = 0x02;
    pub const TEACHER_DENSE: u64 = 0x03;
    pub const DATA_KEYS: u64 = 0x04;
    pub const DATA_LABELS: u64 = 0x05;
    pub const EVAL_KEYS: u64 = 0x06;
    pub const EVAL_LABELS: u64 = 0x07;
    pub const BATCH: u64 = 0x08;
    pub const DENSE_INIT: u64 = 0x09;
    pub const SCHEDULE: u64 = 0x0a;
    pub const SWEEP_SEED: u64 = 0x0b;
    pub const MESSAGE_FUZZ: u64 = 0x0c;
}

/// SplitMix64 finalizer; also used standalone as a 64-bit mixing function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 generator (Steele, Lea, Flood 2014).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: mix64(seed) }
    }

    /// Derive a stream from a seed and a sequence of domain/index parts.
    /// The same `(seed, parts)` always yields the same stream.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let mut state = mix64(seed);
        for &p in parts {
            state = mix64(state ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        Self { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, +scale]`.
    #[inline]
    pub fn symmetric_f32(&mut self, scale: f32) -> f32 {
        (2.0 * self.next_f32() - 1.0) * scale
    }

    /// Uniform index in `[0, n)` via the multiply-shift reduction.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
