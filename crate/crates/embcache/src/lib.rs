//! Cache-enabled parameter server for embedding model training.
//!
//! Workers keep hot embedding rows in a local write-back cache governed by
//! per-embedding Lamport clocks: every cached row carries a start clock (the
//! global clock observed at fetch) and a current clock (start clock plus local
//! updates). A user-chosen staleness bound `s` limits how far a replica may
//! run ahead of its start clock and how far it may lag the server, which keeps
//! any two replicas of the same row within `2s` clock ticks of each other.
//! Reads and writes both tolerate staleness: local updates accumulate in the
//! cache and reach the server only on eviction, synchronization, or flush.
//!
//! The crate bundles the server, cache, and client protocol together with a
//! binary wire codec (deterministic in-process simulator plus a framed TCP
//! backend), a mini-batch SGD trainer over a logistic scorer, a skewed
//! workload generator, and the experiment drivers behind the `embcache` CLI.

pub mod cache;
pub mod client;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod recorder;
pub mod rng;
pub mod server;
pub mod trainer;
pub mod transport;
pub mod workload;

pub use error::{Error, Result};
