//! Core value types: embedding keys, vectors, update deltas, clocks, and the
//! staleness bound.

use crate::error::{Error, Result};
use crate::rng::{domain, SplitMix64};
use serde::{Deserialize, Serialize};

/// Opaque feature identifier. Equality and hashing only, no arithmetic
/// meaning; the ordering is used solely for deterministic tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingKey(pub u64);

impl std::fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One embedding table row: `dim` 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn from_vec(values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// `self += delta`, element-wise.
    pub fn apply(&mut self, delta: &UpdateDelta) -> Result<()> {
        if delta.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: delta.len(),
            });
        }
        for (v, d) in self.0.iter_mut().zip(delta.values()) {
            *v += d;
        }
        Ok(())
    }
}

/// Additive change to one embedding row, already scaled by `-eta` on the
/// client so the server applies it by pure addition.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDelta(Vec<f32>);

impl UpdateDelta {
    pub fn from_vec(values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Scaled copy, `factor * self`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }
}

/// `acc += delta`, element-wise. Accumulation happens in arrival order so a
/// fixed schedule reproduces bit-identical results.
pub fn accumulate(acc: &mut UpdateDelta, delta: &UpdateDelta) -> Result<()> {
    if acc.len() != delta.len() {
        return Err(Error::DimensionMismatch {
            expected: acc.len(),
            got: delta.len(),
        });
    }
    for (a, d) in acc.0.iter_mut().zip(delta.values()) {
        *a += d;
    }
    Ok(())
}

/// Lamport clock: a monotonically non-decreasing tick counter. Used for the
/// server's global clock `c_g` and the cache's start/current clocks
/// `c_s`/`c_c`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClockValue(pub u64);

impl ClockValue {
    pub const ZERO: ClockValue = ClockValue(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    #[must_use]
    pub fn incremented(self) -> Self {
        ClockValue(self.0 + 1)
    }

    #[must_use]
    pub fn max(self, other: Self) -> Self {
        ClockValue(self.0.max(other.0))
    }
}

impl std::fmt::Display for ClockValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// User-defined staleness threshold `s`, fixed for the duration of a run.
/// `Infinite` disables the validity conditions entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StalenessBound {
    Finite(u64),
    Infinite,
}

impl StalenessBound {
    pub const ZERO: StalenessBound = StalenessBound::Finite(0);

    pub fn is_infinite(self) -> bool {
        matches!(self, StalenessBound::Infinite)
    }

    pub fn finite(self) -> Option<u64> {
        match self {
            StalenessBound::Finite(s) => Some(s),
            StalenessBound::Infinite => None,
        }
    }

    /// The two validity conditions: the current clock must not run more than
    /// `s` ahead of the start clock, and the global clock must not run more
    /// than `s` ahead of the current clock.
    pub fn is_valid(self, c_s: ClockValue, c_c: ClockValue, c_g: ClockValue) -> bool {
        match self {
            StalenessBound::Infinite => true,
            StalenessBound::Finite(s) => c_c.0 <= c_s.0 + s && c_g.0 <= c_c.0 + s,
        }
    }
}

impl std::fmt::Display for StalenessBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StalenessBound::Finite(s) => write!(f, "{s}"),
            StalenessBound::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for StalenessBound {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StalenessBound::Finite(s) => ser.serialize_u64(*s),
            StalenessBound::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for StalenessBound {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(s) => Ok(StalenessBound::Finite(s)),
            Raw::Text(t) if t == "inf" || t == "infinite" => Ok(StalenessBound::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "staleness must be a number, \"inf\" or \"infinite\", got {t:?}"
            ))),
        }
    }
}

/// Range of the deterministic embedding initialization, `[-0.01, +0.01]`.
pub const INIT_RANGE: f32 = 0.01;

/// Deterministic initial value for an embedding row: a pure function of
/// `(key, seed)`, identical across all processes. Uniform in
/// `[-INIT_RANGE, +INIT_RANGE]`.
pub fn init_embedding(key: EmbeddingKey, dim: usize, seed: u64) -> EmbeddingVector {
    debug_assert!(dim >= 1);
    let mut rng = SplitMix64::derive(seed, &[domain::EMBED_INIT, key.0]);
    EmbeddingVector::from_vec((0..dim).map(|_| rng.symmetric_f32(INIT_RANGE)).collect())
}
