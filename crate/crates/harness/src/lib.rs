//! Experiment harness for the `kvfreeze-core` soft-freeze KV-cache policy:
//! configuration, CLI, metrics files, SVG charts, score-trace files, a
//! file-backed frozen tier, the synthetic passkey scenario and sweeps.

pub mod chart;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics_file;
pub mod passkey;
pub mod spill;
pub mod sweep;
pub mod trace_file;

pub use config::{Mode, RunConfig};
pub use error::{HarnessError, Result};
