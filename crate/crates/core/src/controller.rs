//! One generation step, end to end.
//!
//! Order within step `t`:
//!
//! 1. forward the input token over the active view (it joins the ledger);
//! 2. score every active token against the step's queries;
//! 3. for each flagged, unprotected token record a detection and compute its
//!    duration `d`;
//! 4. tick the frozen tier, restoring tokens whose timer reaches zero;
//! 5. freeze the tokens from (3) with `d > 0`;
//! 6. sample the next token and run the recovery monitor.
//!
//! Tokens frozen at step `t` are first decremented by the tick of step
//! `t + 1`, so a duration `d` keeps a token out of exactly the next `d`
//! forward passes. A token restored by the tick of step `t` missed step `t`'s
//! attention and is scored again from step `t + 1`.
//!
//! Worked trace, window 2, every eligible token flagged, `k = 2`: token 0
//! leaves the window at step 2 and collects `c = 1, 2, 3` at steps 2..4
//! (`d = 0`); at step 5 `c = 4` gives `d = 1`, so it is frozen after step 5,
//! absent from step 6, restored by step 6's tick and scored again at step 7.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use crate::cache::{CacheLedger, FrozenTier, KvPair, MemoryTier};
use crate::engine::{confidence, Model, Sampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::recovery::{self, Monitor, RecoveryAction, RecoveryConfig};
use crate::relevance::{flag_low_importance, score_layers, RelevanceScore};
use crate::scheduler::{freeze_duration, protected_set, record_detection, PolicyParams};
use crate::trace::{ScoreTrace, TraceStep};

/// Why a frozen token came back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreCause {
    Timer,
    Recovery(RecoveryAction),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyEvent {
    Freeze {
        step: u64,
        position: usize,
        duration: u64,
        count: u64,
    },
    Restore {
        step: u64,
        position: usize,
        /// Forward passes the token missed during this episode.
        absent: u64,
        assigned: u64,
        cause: RestoreCause,
    },
    Recovery {
        step: u64,
        action: RecoveryAction,
    },
    /// RR dropped the ledger from `from_len` to `to_len` tokens and
    /// regenerated `regenerated` ids.
    Rewind {
        step: u64,
        from_len: usize,
        to_len: usize,
        regenerated: usize,
    },
}

/// Per-step snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: usize,
    pub active: usize,
    pub frozen: usize,
    pub frozen_this_step: usize,
    pub restored_this_step: usize,
    pub compression: f64,
    /// `None` in trace replay, where there is no model.
    pub entropy: Option<f64>,
    pub recovery: RecoveryAction,
}

/// `1 - active / total`; zero for an empty context.
pub fn compression_ratio(total: usize, active: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    1.0 - active as f64 / total as f64
}

/// Counts of one policy application.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PolicyOutcome {
    pub frozen: usize,
    pub restored: usize,
}

/// Flag, count, tick and freeze for the ledger's current step, given scores
/// for the active tokens. Shared by live generation and trace replay.
pub fn policy_step<T: FrozenTier>(
    ledger: &mut CacheLedger<T>,
    scores: &[RelevanceScore],
    params: &PolicyParams,
    events: &mut Vec<PolicyEvent>,
) -> Result<PolicyOutcome> {
    let step = ledger.step();
    let protected = protected_set(ledger.len(), params);
    let flagged = flag_low_importance(scores, params.tau, &protected);

    let mut plan = Vec::new();
    for position in flagged {
        let record = ledger.record_mut(position)?;
        let count = record_detection(record, step, params.history_window)?;
        let duration = freeze_duration(count, params.softness);
        if duration > 0 {
            plan.push((position, duration, count));
        }
    }

    let restored = ledger.tick_and_restore()?;
    for r in &restored {
        events.push(PolicyEvent::Restore {
            step,
            position: r.position,
            absent: step - r.frozen_at,
            assigned: r.assigned_duration,
            cause: RestoreCause::Timer,
        });
    }
    for &(position, duration, count) in &plan {
        ledger.freeze(position, duration)?;
        events.push(PolicyEvent::Freeze {
            step,
            position,
            duration,
            count,
        });
    }
    Ok(PolicyOutcome {
        frozen: plan.len(),
        restored: restored.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SessionConfig {
    pub policy: PolicyParams,
    pub sampler: SamplerConfig,
    /// `None` disables entropy monitoring and recovery.
    pub recovery: Option<RecoveryConfig>,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.sampler.validate()?;
        if let Some(r) = &self.recovery {
            r.validate()?;
        }
        Ok(())
    }
}

/// State saved before each step so RR can rewind.
#[derive(Debug, Clone)]
struct Checkpoint {
    input: u32,
    ledger_len: usize,
    generated_len: usize,
    sampler: Sampler,
}

/// A generation session: owns its ledger exclusively.
#[derive(Debug)]
pub struct Session<'m, T = MemoryTier> {
    model: &'m Model,
    config: SessionConfig,
    ledger: CacheLedger<T>,
    sampler: Sampler,
    prompt_len: usize,
    /// Sampled ids; the first comes from the prompt's last position.
    generated: Vec<u32>,
    step: u64,
    checkpoints: VecDeque<Checkpoint>,
    monitor: Option<Monitor>,
    events: Vec<PolicyEvent>,
    injections: BTreeMap<u64, f64>,
    recorded: Option<Vec<TraceStep>>,
}

impl<'m> Session<'m, MemoryTier> {
    pub fn new(model: &'m Model, prompt: &[u32], config: SessionConfig) -> Result<Self> {
        Self::with_tier(model, prompt, config, MemoryTier::default())
    }
}

impl<'m, T: FrozenTier> Session<'m, T> {
    /// Prefills `prompt` with every token active; freezing starts with the
    /// first generation step.
    pub fn with_tier(
        model: &'m Model,
        prompt: &[u32],
        config: SessionConfig,
        tier: T,
    ) -> Result<Self> {
        config.validate()?;
        if prompt.is_empty() {
            return Err(Error::Input(
                "prompt must contain at least one token".into(),
            ));
        }
        let p = &config.policy;
        let mut ledger = CacheLedger::with_tier(
            model.config().kv_shape(),
            p.window_size,
            p.pinned_prefix,
            tier,
        );
        let mut sampler = Sampler::new(config.sampler);
        let mut last = None;
        for &t in prompt {
            last = Some(model.forward_step(&mut ledger, t)?);
        }
        let first = sampler.sample(&last.expect("prompt is non-empty").logits);
        Ok(Self {
            model,
            config,
            ledger,
            sampler,
            prompt_len: prompt.len(),
            generated: alloc::vec![first],
            step: 0,
            checkpoints: VecDeque::new(),
            monitor: config.recovery.map(Monitor::new),
            events: Vec::new(),
            injections: BTreeMap::new(),
            recorded: None,
        })
    }

    pub fn ledger(&self) -> &CacheLedger<T> {
        &self.ledger
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Sampled ids so far, including the one sampled after prefill.
    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    /// The most recently sampled id, which is the default next input.
    pub fn pending(&self) -> u32 {
        *self.generated.last().expect("at least one sampled id")
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &[PolicyEvent] {
        &self.events
    }

    /// Adds `delta` to the observed entropy at `step`; used to script
    /// recovery scenarios.
    pub fn inject_entropy(&mut self, step: u64, delta: f64) {
        *self.injections.entry(step).or_insert(0.0) += delta;
    }

    /// Starts recording every step's scores as a replayable trace. Frozen
    /// tokens are not scored and appear with score 0.
    pub fn record_scores(&mut self) {
        self.recorded.get_or_insert_with(Vec::new);
    }

    pub fn recorded_trace(&self) -> Option<ScoreTrace> {
        self.recorded.as_ref().map(|steps| ScoreTrace {
            steps: steps.clone(),
        })
    }

    /// Runs one step with `input` as the token fed to the model.
    pub fn run_step(&mut self, input: u32) -> Result<StepMetrics> {
        let step = self.step + 1;
        self.ledger.advance_to(step)?;
        self.step = step;
        if let Some(r) = &self.config.recovery {
            if self.checkpoints.len() == r.rr_regen_count {
                self.checkpoints.pop_front();
            }
            self.checkpoints.push_back(Checkpoint {
                input,
                ledger_len: self.ledger.len(),
                generated_len: self.generated.len(),
                sampler: self.sampler.clone(),
            });
        }

        let out = self.model.forward_step(&mut self.ledger, input)?;
        let shape = self.ledger.shape();
        let scores = score_layers(
            &out.queries,
            shape,
            self.ledger.active_view(),
            self.config.policy.scale_mode,
        )?;
        if let Some(rec) = &mut self.recorded {
            let mut all: Vec<(usize, f64)> = (0..self.ledger.len()).map(|p| (p, 0.0)).collect();
            for s in &scores {
                all[s.position].1 = s.score;
            }
            rec.push(TraceStep {
                step,
                new_token: true,
                scores: all,
            });
        }

        let outcome = policy_step(
            &mut self.ledger,
            &scores,
            &self.config.policy,
            &mut self.events,
        )?;
        let mut restored = outcome.restored;

        let next = self.sampler.sample(&out.logits);
        self.generated.push(next);

        let entropy = out.entropy + self.injections.get(&step).copied().unwrap_or(0.0);
        let action = match &mut self.monitor {
            Some(m) => m.observe(step, entropy, confidence(&out.probs)),
            None => RecoveryAction::None,
        };
        if action != RecoveryAction::None {
            restored += self.apply_recovery(action)?;
        }

        self.ledger.check_invariants()?;
        let (total, active) = (self.ledger.len(), self.ledger.active_count());
        Ok(StepMetrics {
            step,
            total,
            active,
            frozen: self.ledger.frozen_count(),
            frozen_this_step: outcome.frozen,
            restored_this_step: restored,
            compression: compression_ratio(total, active),
            entropy: Some(entropy),
            recovery: action,
        })
    }

    /// Runs a step on the pending sampled token.
    pub fn advance(&mut self) -> Result<StepMetrics> {
        self.run_step(self.pending())
    }

    fn apply_recovery(&mut self, action: RecoveryAction) -> Result<usize> {
        let step = self.step;
        let cfg = self.config.recovery.expect("monitor implies config");
        self.events.push(PolicyEvent::Recovery { step, action });
        let restored = match action {
            RecoveryAction::None => Vec::new(),
            RecoveryAction::SoftReset => recovery::soft_reset(&mut self.ledger)?,
            RecoveryAction::WindowReset => {
                let span = cfg
                    .window_reset_span
                    .unwrap_or(self.config.policy.window_size as u64);
                recovery::window_reset(&mut self.ledger, step, span)?
            }
            RecoveryAction::FullReset | RecoveryAction::Rewalk => {
                recovery::full_reset(&mut self.ledger)?
            }
        };
        for r in &restored {
            self.events.push(PolicyEvent::Restore {
                step,
                position: r.position,
                absent: step - r.frozen_at,
                assigned: r.assigned_duration,
                cause: RestoreCause::Recovery(action),
            });
        }
        if action == RecoveryAction::Rewalk {
            self.rewind_and_regenerate()?;
        }
        Ok(restored.len())
    }

    /// Rewinds to the oldest checkpoint (at most `rr_regen_count` steps back,
    /// never past the prompt) and regenerates the same number of ids with
    /// the full cache active and the checkpointed sampler state.
    fn rewind_and_regenerate(&mut self) -> Result<()> {
        let Some(start) = self.checkpoints.front().cloned() else {
            return Ok(());
        };
        let count = self.checkpoints.len();
        let from_len = self.ledger.len();
        self.ledger.truncate(start.ledger_len)?;
        self.generated.truncate(start.generated_len);
        self.sampler = start.sampler.clone();
        self.checkpoints.clear();

        let mut input = start.input;
        for _ in 0..count {
            self.checkpoints.push_back(Checkpoint {
                input,
                ledger_len: self.ledger.len(),
                generated_len: self.generated.len(),
                sampler: self.sampler.clone(),
            });
            let out = self.model.forward_step(&mut self.ledger, input)?;
            input = self.sampler.sample(&out.logits);
            self.generated.push(input);
        }
        if self.ledger.len() != from_len {
            return Err(Error::Invariant(format!(
                "rewind restored {} tokens, expected {from_len}",
                self.ledger.len()
            )));
        }
        self.events.push(PolicyEvent::Rewind {
            step: self.step,
            from_len,
            to_len: start.ledger_len,
            regenerated: count,
        });
        Ok(())
    }

    /// KV payloads of every token, from whichever tier holds them.
    pub fn kv_snapshot(&self) -> Result<Vec<KvPair>> {
        (0..self.ledger.len())
            .map(|p| self.ledger.kv_snapshot(p))
            .collect()
    }
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt_len: usize,
    pub generated: Vec<u32>,
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<PolicyEvent>,
}

/// Prefill then `n_steps` steps, each consuming the previously sampled id.
pub fn run_generation(
    model: &Model,
    prompt: &[u32],
    n_steps: usize,
    config: SessionConfig,
) -> Result<Generation> {
    if n_steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    let mut session = Session::new(model, prompt, config)?;
    let metrics = (0..n_steps)
        .map(|_| session.advance())
        .collect::<Result<Vec<_>>>()?;
    Ok(Generation {
        prompt_len: prompt.len(),
        generated: session.generated,
        metrics,
        events: session.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::KvShape;
    use crate::relevance::RelevanceScore;
    use alloc::vec;

    #[test]
    fn compression_arithmetic() {
        assert!((compression_ratio(514, 170) - 0.669261).abs() < 1e-6);
        assert!((compression_ratio(269, 119) - 0.557621).abs() < 1e-6);
        assert_eq!(compression_ratio(7, 7), 0.0);
    }

    /// Scripted policy run on a payload-free ledger: window 2, every
    /// eligible token scores 0.
    #[test]
    fn four_token_script() {
        let params = PolicyParams {
            window_size: 2,
            tau: 0.5,
            softness: 2.0,
            ..Default::default()
        };
        let mut ledger = CacheLedger::new(KvShape::empty(), 2, 0);
        let empty = || KvPair {
            keys: vec![],
            values: vec![],
        };
        ledger.insert_token(0, empty()).unwrap();
        let mut events = Vec::new();
        let mut absent_steps = Vec::new();
        for step in 1..=8u64 {
            ledger.advance_to(step).unwrap();
            ledger.insert_token(step as u32, empty()).unwrap();
            if ledger.residency(0) == Some(crate::Residency::Frozen) {
                absent_steps.push(step);
            }
            let scores: Vec<RelevanceScore> = ledger
                .active_view()
                .map(|(position, _)| RelevanceScore {
                    position,
                    score: if position == 0 { 0.0 } else { 1.0 },
                })
                .collect();
            policy_step(&mut ledger, &scores, &params, &mut events).unwrap();
        }
        // Token 0 leaves the window at step 2; its 4th detection is at step 5.
        let freezes: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                PolicyEvent::Freeze {
                    step,
                    position: 0,
                    count,
                    duration,
                } => Some((*step, *count, *duration)),
                _ => None,
            })
            .collect();
        assert_eq!(freezes[0], (5, 4, 1));
        assert_eq!(absent_steps[0], 6);
        assert!(!absent_steps.contains(&7));
        // c = 5 at step 7 still gives d = 1
        assert_eq!(freezes[1], (7, 5, 1));
    }
}
