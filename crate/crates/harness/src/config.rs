//! Run configuration, loaded from TOML.
//!
//! ```toml
//! [run]
//! mode = "generate"
//! steps = 500
//! seed = 0
//!
//! [policy]
//! window_size = 32
//! tau = 0.5
//! softness = 2.0
//! history_window = 128    # or "inf"
//!
//! [sampler]
//! temperature = 0.7
//! top_k = 40
//! top_p = 0.9
//! ```
//!
//! Every key is optional; missing keys take their defaults and unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use kvfreeze_core::{
    ModelConfig, PolicyParams, RecoveryConfig, SamplerConfig, SessionConfig, SynthKind,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Generate,
    Replay,
    Passkey,
    ScheduleTable,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub steps: usize,
    /// Seeds the sampler and synthetic traces. Model weights use `[model] seed`.
    pub seed: u64,
    /// Prompt length for generate mode.
    pub prompt_len: usize,
    /// Entropy monitoring and the recovery ladder during generation.
    pub recovery: bool,
    /// Trace to replay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Synthetic trace to replay when no trace file is given.
    pub synth: SynthKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg: Option<PathBuf>,
    /// Writes the replayed or recorded score trace here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit_trace: Option<PathBuf>,
    /// Keeps frozen KV pairs in this file instead of memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill: Option<PathBuf>,
    /// Largest count listed by schedule-table.
    pub max_c: u64,
    /// Adds wall-clock time to the metrics summary.
    pub timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Generate,
            steps: 500,
            seed: 0,
            prompt_len: 14,
            recovery: true,
            trace: None,
            synth: SynthKind::Stress,
            out: None,
            svg: None,
            emit_trace: None,
            spill: None,
            max_c: 16,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasskeySection {
    /// Filler tokens in the prompt; the passkey sits at the midpoint.
    pub filler_len: usize,
    /// Free-running steps before the query phase.
    pub generate_steps: usize,
}

impl Default for PasskeySection {
    fn default() -> Self {
        Self {
            filler_len: 256,
            generate_steps: 100,
        }
    }
}

/// Axes of a sweep; an empty axis uses the base policy's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub tau: Vec<f64>,
    pub window_size: Vec<usize>,
    pub softness: Vec<f64>,
    #[serde(with = "history_list")]
    pub history_window: Vec<u64>,
    /// Run generation in each cell instead of replaying a trace.
    pub generate: bool,
}

/// History windows with the unbounded value spelled `"inf"`.
mod history_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Window {
        Steps(u64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&w| {
                if w == u64::MAX {
                    Window::Word("inf".into())
                } else {
                    Window::Steps(w)
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        Vec::<Window>::deserialize(d)?
            .into_iter()
            .map(|w| match w {
                Window::Steps(n) => Ok(n),
                Window::Word(s) if s == "inf" => Ok(u64::MAX),
                Window::Word(s) => Err(serde::de::Error::custom(format!(
                    "bad history window {s:?}"
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub policy: PolicyParams,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub recovery: RecoveryConfig,
    pub passkey: PasskeySection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        self.recovery.validate()?;
        if self.run.steps == 0 {
            return Err(HarnessError::Config("steps: must be at least 1".into()));
        }
        if self.run.prompt_len == 0 {
            return Err(HarnessError::Config(
                "prompt_len: must be at least 1".into(),
            ));
        }
        if self.sweep.tau.iter().any(|t| t.is_nan()) {
            return Err(HarnessError::Config("sweep.tau: must be numbers".into()));
        }
        Ok(())
    }

    /// The session configuration for generate mode.
    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            policy: self.policy,
            sampler: SamplerConfig {
                seed: self.run.seed,
                ..self.sampler
            },
            recovery: self.run.recovery.then_some(self.recovery),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_default_and_edited() {
        let mut c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        c.run.mode = Mode::Sweep;
        c.run.trace = Some("a.trace".into());
        c.policy.tau = f64::INFINITY;
        c.policy.history_window = u64::MAX;
        c.sampler.top_k = None;
        c.recovery.window_reset_span = Some(7);
        c.sweep.softness = vec![1.0, 2.0];
        c.sweep.history_window = vec![64, u64::MAX];
        c.run.synth = SynthKind::TopicShift;
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::from_toml("[policy]\nwindow = 3\n").unwrap_err();
        assert!(err.to_string().contains("window"), "{err}");
    }

    #[test]
    fn unbounded_history_spelled_inf() {
        let c = RunConfig::from_toml("[policy]\nhistory_window = \"inf\"\n").unwrap();
        assert_eq!(c.policy.history_window, u64::MAX);
        assert!(RunConfig::from_toml("[policy]\nhistory_window = \"forever\"\n").is_err());
    }

    #[test]
    fn session_uses_master_seed() {
        let mut c = RunConfig::default();
        c.run.seed = 9;
        c.run.recovery = false;
        let s = c.session();
        assert_eq!(s.sampler.seed, 9);
        assert!(s.recovery.is_none());
    }
}
