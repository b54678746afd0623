//! Reversible soft-freeze KV-cache management.
//!
//! Tokens that the current query barely attends to are moved out of the
//! active attention set for a bounded number of steps instead of being
//! evicted. Freeze durations grow as the floor of `sqrt(c) / k`, where `c` is
//! the number of low-importance detections inside a sliding history window,
//! so a persistently irrelevant token is re-examined every few steps and
//! never lost.
//!
//! The crate is `no_std` (with `alloc`) and contains the whole policy:
//!
//! * [`cache`] owns token KV data and the two-tier residency ledger.
//! * [`relevance`] scores active tokens from query/key interaction.
//! * [`scheduler`] counts detections and computes freeze durations.
//! * [`engine`] is a small deterministic transformer used to drive the policy
//!   with real attention arithmetic, plus sampling and entropy.
//! * [`controller`] runs one generation step end to end.
//! * [`recovery`] watches entropy and applies the SR/WR/FR/RR ladder.
//! * [`trace`] replays externally supplied scores through the same policy.
//! * [`reference`] is a monolithic full-cache generator used as a baseline.
//!
//! File formats, the CLI and metrics persistence live in the `kvfreeze`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cache;
pub mod controller;
pub mod engine;
pub mod error;
pub mod recovery;
pub mod reference;
pub mod relevance;
pub mod scheduler;
pub mod trace;

pub use cache::{CacheLedger, FrozenTier, KvPair, KvShape, MemoryTier, Residency, TokenRecord};
pub use controller::{PolicyEvent, Session, SessionConfig, StepMetrics};
pub use engine::{Model, ModelConfig, Sampler, SamplerConfig};
pub use error::{Error, PolicyError, Result};
pub use recovery::{RecoveryAction, RecoveryConfig};
pub use relevance::{RelevanceScore, ScaleMode};
pub use scheduler::{freeze_duration, PolicyParams, ProtectedSet};
pub use trace::{
    replay, synth_trace, NeedleLayout, Replayer, ScoreTrace, SynthKind, TraceStats, TraceStep,
};
