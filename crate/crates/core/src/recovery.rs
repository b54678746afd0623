//! Entropy-guided recovery.
//!
//! A spike is an entropy reading above `mean + spike_z * sigma` of the
//! preceding `baseline_window` readings (population sigma, floored at
//! [`SIGMA_FLOOR`]). Spikes drive a four-level ladder:
//!
//! * SR restores every frozen token whose timer is above 1;
//! * WR restores every token frozen within the last N steps;
//! * FR restores everything and clears all detection history;
//! * RR performs FR, then rewinds and regenerates the newest ids.
//!
//! After an action, further spikes are ignored for `cooldown_steps` steps.
//! A spike at or after that point escalates to the next level. The ladder
//! drops back to SR once `cooldown_steps` consecutive steps pass without any
//! spike, counted from the latest one (acted on or ignored). Once RR has been
//! applied, spikes are ignored until that reset.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::cache::{CacheLedger, FrozenTier, Restored};
use crate::error::{Error, Result};

/// Minimum standard deviation used by the spike detector.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum RecoveryAction {
    #[default]
    None,
    SoftReset,
    WindowReset,
    FullReset,
    Rewalk,
}

impl RecoveryAction {
    const LADDER: [RecoveryAction; 4] = [
        Self::SoftReset,
        Self::WindowReset,
        Self::FullReset,
        Self::Rewalk,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "None",
            Self::SoftReset => "SR",
            Self::WindowReset => "WR",
            Self::FullReset => "FR",
            Self::Rewalk => "RR",
        }
    }
}

impl fmt::Display for RecoveryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RecoveryAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "None" => Self::None,
            "SR" => Self::SoftReset,
            "WR" => Self::WindowReset,
            "FR" => Self::FullReset,
            "RR" => Self::Rewalk,
            other => {
                return Err(Error::Input(alloc::format!(
                    "unknown recovery label {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RecoveryConfig {
    /// Readings that form the rolling baseline.
    pub baseline_window: usize,
    pub spike_z: f64,
    /// N for WR; `None` uses the policy's sliding window size.
    pub window_reset_span: Option<u64>,
    /// Ids regenerated by RR.
    pub rr_regen_count: usize,
    pub cooldown_steps: u64,
    /// Threshold of the optional confidence-drop detector, which applies the
    /// same test to `-max(probs)`. `None` disables it.
    pub confidence_z: Option<f64>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            baseline_window: 64,
            spike_z: 3.0,
            window_reset_span: None,
            rr_regen_count: 8,
            cooldown_steps: 16,
            confidence_z: None,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_window < 2 {
            return Err(Error::config("baseline_window", "must be at least 2"));
        }
        if !(self.spike_z.is_finite() && self.spike_z > 0.0) {
            return Err(Error::config("spike_z", "must be finite and > 0"));
        }
        if self.window_reset_span == Some(0) {
            return Err(Error::config("window_reset_span", "must be at least 1"));
        }
        if self.rr_regen_count == 0 {
            return Err(Error::config("rr_regen_count", "must be at least 1"));
        }
        if self.cooldown_steps == 0 {
            return Err(Error::config("cooldown_steps", "must be at least 1"));
        }
        if matches!(self.confidence_z, Some(z) if !(z.is_finite() && z > 0.0)) {
            return Err(Error::config("confidence_z", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// True iff `current` exceeds the baseline mean by more than `z` standard
/// deviations. Needs at least two baseline readings.
pub fn detect(baseline: &[f64], current: f64, z: f64) -> bool {
    if baseline.len() < 2 {
        return false;
    }
    let n = baseline.len() as f64;
    let mean = baseline.iter().sum::<f64>() / n;
    let var = baseline
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    let sigma = libm::sqrt(var).max(SIGMA_FLOOR);
    current > mean + z * sigma
}

/// Escalation state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ladder {
    level: usize,
    last_action: Option<u64>,
    last_trigger: Option<u64>,
}

impl Ladder {
    /// Feeds one step's detector verdict and returns the action to apply.
    pub fn observe(&mut self, step: u64, triggered: bool, cooldown: u64) -> RecoveryAction {
        if !triggered {
            if self.level > 0 && self.last_trigger.is_some_and(|t| step - t >= cooldown) {
                self.level = 0;
                self.last_action = None;
            }
            return RecoveryAction::None;
        }
        self.last_trigger = Some(step);
        let gate_open = self.last_action.is_none_or(|a| step - a >= cooldown);
        if gate_open && self.level < RecoveryAction::LADDER.len() {
            let action = RecoveryAction::LADDER[self.level];
            self.level += 1;
            self.last_action = Some(step);
            return action;
        }
        RecoveryAction::None
    }

    /// Index of the next level to apply (0 = SR, 4 = exhausted).
    pub fn level(&self) -> usize {
        self.level
    }
}

/// Rolling detectors plus the ladder.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: RecoveryConfig,
    entropy: VecDeque<f64>,
    confidence: VecDeque<f64>,
    ladder: Ladder,
}

impl Monitor {
    pub fn new(config: RecoveryConfig) -> Self {
        Self {
            config,
            entropy: VecDeque::with_capacity(config.baseline_window),
            confidence: VecDeque::with_capacity(config.baseline_window),
            ladder: Ladder::default(),
        }
    }

    pub fn ladder(&self) -> &Ladder {
        &self.ladder
    }

    /// Tests the step's readings against the baseline, then adds them to it.
    pub fn observe(&mut self, step: u64, entropy: f64, confidence: f64) -> RecoveryAction {
        let cfg = self.config;
        let spike = detect(self.entropy.make_contiguous(), entropy, cfg.spike_z);
        let drop = cfg
            .confidence_z
            .is_some_and(|z| detect(self.confidence.make_contiguous(), -confidence, z));
        push_bounded(&mut self.entropy, entropy, cfg.baseline_window);
        push_bounded(&mut self.confidence, -confidence, cfg.baseline_window);
        self.ladder.observe(step, spike || drop, cfg.cooldown_steps)
    }
}

fn push_bounded(q: &mut VecDeque<f64>, x: f64, cap: usize) {
    if q.len() == cap {
        q.pop_front();
    }
    q.push_back(x);
}

/// SR: restores frozen tokens whose remaining timer exceeds 1.
pub fn soft_reset<T: FrozenTier>(ledger: &mut CacheLedger<T>) -> Result<Vec<Restored>> {
    let due: Vec<usize> = ledger
        .frozen_positions()
        .filter(|&p| ledger.record(p).is_some_and(|r| r.freeze_timer > 1))
        .collect();
    due.into_iter().map(|p| ledger.restore(p)).collect()
}

/// WR: restores tokens frozen at or after `step - span`.
pub fn window_reset<T: FrozenTier>(
    ledger: &mut CacheLedger<T>,
    step: u64,
    span: u64,
) -> Result<Vec<Restored>> {
    let since = step.saturating_sub(span);
    let due: Vec<usize> = ledger
        .frozen_positions()
        .filter(|&p| {
            ledger
                .record(p)
                .and_then(|r| r.frozen_at)
                .is_some_and(|f| f >= since)
        })
        .collect();
    due.into_iter().map(|p| ledger.restore(p)).collect()
}

/// FR: restores every frozen token and clears all detection history.
pub fn full_reset<T: FrozenTier>(ledger: &mut CacheLedger<T>) -> Result<Vec<Restored>> {
    let due: Vec<usize> = ledger.frozen_positions().collect();
    let restored = due
        .into_iter()
        .map(|p| ledger.restore(p))
        .collect::<Result<Vec<_>>>()?;
    ledger.clear_detections();
    Ok(restored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{KvPair, KvShape};
    use alloc::vec;

    #[test]
    fn constant_series_never_triggers() {
        let base = [1.25; 64];
        assert!(!detect(&base, 1.25, 3.0));
    }

    #[test]
    fn spike_after_flat_baseline() {
        let base: Vec<f64> = (0..64)
            .map(|i| 1.0 + 0.01 * ((i % 5) as f64 - 2.0))
            .collect();
        assert!(detect(&base, 5.0, 3.0));
        assert!(!detect(&base, 1.02, 3.0));
    }

    #[test]
    fn warm_up_never_triggers() {
        assert!(!detect(&[], 100.0, 3.0));
        assert!(!detect(&[1.0], 100.0, 3.0));
    }

    fn ledger_with_timers(timers: &[(usize, u64)]) -> CacheLedger {
        let mut l = CacheLedger::new(KvShape::empty(), 1, 0);
        for i in 0..10 {
            l.insert_token(
                i,
                KvPair {
                    keys: vec![],
                    values: vec![],
                },
            )
            .unwrap();
        }
        for &(p, d) in timers {
            l.freeze(p, d).unwrap();
        }
        l
    }

    #[test]
    fn soft_reset_keeps_last_tick_tokens() {
        let mut l = ledger_with_timers(&[(1, 1), (2, 2), (3, 5)]);
        let r: Vec<usize> = soft_reset(&mut l)
            .unwrap()
            .iter()
            .map(|r| r.position)
            .collect();
        assert_eq!(r, vec![2, 3]);
        assert_eq!(l.frozen_positions().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn window_reset_uses_freeze_step() {
        let mut l = ledger_with_timers(&[]);
        l.advance_to(3).unwrap();
        l.freeze(0, 5).unwrap();
        l.advance_to(20).unwrap();
        l.freeze(1, 5).unwrap();
        l.advance_to(22).unwrap();
        let r: Vec<usize> = window_reset(&mut l, 22, 4)
            .unwrap()
            .iter()
            .map(|r| r.position)
            .collect();
        assert_eq!(r, vec![1]);
    }

    #[test]
    fn full_reset_clears_everything() {
        let mut l = ledger_with_timers(&[(1, 1), (4, 3)]);
        crate::scheduler::record_detection(l.record_mut(2).unwrap(), 1, 100).unwrap();
        full_reset(&mut l).unwrap();
        assert_eq!(l.frozen_count(), 0);
        assert!(l.records().iter().all(|r| r.detection_log.is_empty()));
    }

    #[test]
    fn ladder_escalates_then_resets() {
        let mut ladder = Ladder::default();
        let mut applied = Vec::new();
        for step in 1..=200u64 {
            let spike = [10, 12, 26, 42, 58, 74, 150].contains(&step);
            let a = ladder.observe(step, spike, 16);
            if a != RecoveryAction::None {
                applied.push((step, a));
            }
        }
        use RecoveryAction::*;
        assert_eq!(
            applied,
            vec![
                (10, SoftReset),
                (26, WindowReset),
                (42, FullReset),
                (58, Rewalk),
                (150, SoftReset)
            ]
        );
    }

    #[test]
    fn isolated_spikes_stay_at_soft_reset() {
        let mut ladder = Ladder::default();
        for s in [5u64, 40, 80] {
            for step in s - 4..s {
                ladder.observe(step, false, 16);
            }
            assert_eq!(ladder.observe(s, true, 16), RecoveryAction::SoftReset);
        }
    }

    #[test]
    fn labels_roundtrip() {
        for a in [
            RecoveryAction::None,
            RecoveryAction::SoftReset,
            RecoveryAction::WindowReset,
            RecoveryAction::FullReset,
            RecoveryAction::Rewalk,
        ] {
            assert_eq!(a.label().parse::<RecoveryAction>().unwrap(), a);
        }
    }
}
