//! Trace replay: the freeze policy driven by precomputed relevance scores.
//!
//! A trace lists, for every step, a score for every token that exists at
//! that step. Replay consults only the scores of tokens that are active at
//! the time, exactly as live generation would, so one trace can be replayed
//! under different parameters on identical inputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cache::{CacheLedger, KvPair, KvShape};
use crate::controller::{compression_ratio, policy_step, PolicyEvent, StepMetrics};
use crate::error::{Error, Result};
use crate::recovery::RecoveryAction;
use crate::relevance::RelevanceScore;
use crate::scheduler::PolicyParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: u64,
    /// Whether the last listed position was appended at this step.
    pub new_token: bool,
    /// `(position, score)` pairs in ascending position order.
    pub scores: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTrace {
    pub steps: Vec<TraceStep>,
}

/// What a replay produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceStats {
    pub rows: Vec<StepMetrics>,
    pub events: Vec<PolicyEvent>,
    /// Absence of every completed freeze episode, per position.
    pub absences: BTreeMap<usize, Vec<u64>>,
}

impl TraceStats {
    pub fn mean_compression(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.compression).sum::<f64>() / self.rows.len() as f64
    }

    pub fn min_compression(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.compression)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_compression(&self) -> f64 {
        self.rows.iter().map(|r| r.compression).fold(0.0, f64::max)
    }

    /// Longest completed freeze episode.
    pub fn max_absence(&self) -> u64 {
        self.absences.values().flatten().copied().max().unwrap_or(0)
    }

    /// Episode length -> number of episodes, for one position.
    pub fn absence_histogram(&self, position: usize) -> BTreeMap<u64, usize> {
        let mut h = BTreeMap::new();
        for &a in self.absences.get(&position).into_iter().flatten() {
            *h.entry(a).or_insert(0) += 1;
        }
        h
    }

    pub fn freeze_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, PolicyEvent::Freeze { .. }))
            .count()
    }

    pub fn restore_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, PolicyEvent::Restore { .. }))
            .count()
    }
}

fn empty_kv() -> KvPair {
    KvPair {
        keys: Vec::new(),
        values: Vec::new(),
    }
}

fn trace_err(
    step: u64,
    position: Option<usize>,
    reason: impl Into<alloc::string::String>,
) -> Error {
    Error::Trace {
        step,
        position,
        reason: reason.into(),
    }
}

/// Checks one step against the number of tokens that existed before it.
fn validate_step(st: &TraceStep, prior_len: Option<usize>, prev_step: Option<u64>) -> Result<()> {
    if prev_step.is_some_and(|p| st.step <= p) {
        return Err(trace_err(st.step, None, "step indices must increase"));
    }
    for (i, &(p, s)) in st.scores.iter().enumerate() {
        if p != i {
            return Err(trace_err(st.step, Some(i), "missing score"));
        }
        if !(s.is_finite() && s >= 0.0) {
            return Err(trace_err(st.step, Some(p), "score must be finite and >= 0"));
        }
    }
    let n = st.scores.len();
    if n == 0 {
        return Err(trace_err(st.step, None, "no scores"));
    }
    if let Some(prior) = prior_len {
        let expect = prior + usize::from(st.new_token);
        if n < expect {
            return Err(trace_err(st.step, Some(n), "missing score"));
        }
        if n > expect {
            return Err(trace_err(st.step, Some(expect), "unexpected position"));
        }
    }
    Ok(())
}

/// Step-by-step replay, exposing the ledger between steps.
#[derive(Debug)]
pub struct Replayer {
    params: PolicyParams,
    ledger: CacheLedger,
    stats: TraceStats,
    prev_step: Option<u64>,
}

impl Replayer {
    pub fn new(params: PolicyParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            ledger: CacheLedger::new(KvShape::empty(), params.window_size, params.pinned_prefix),
            params,
            stats: TraceStats::default(),
            prev_step: None,
        })
    }

    pub fn ledger(&self) -> &CacheLedger {
        &self.ledger
    }

    pub fn stats(&self) -> &TraceStats {
        &self.stats
    }

    pub fn push(&mut self, st: &TraceStep) -> Result<StepMetrics> {
        let ledger = &mut self.ledger;
        let prior = (!ledger.is_empty()).then(|| ledger.len());
        validate_step(st, prior, self.prev_step)?;
        self.prev_step = Some(st.step);
        if prior.is_none() {
            for p in 0..st.scores.len() {
                ledger.insert_token(p as u32, empty_kv())?;
            }
        } else if st.new_token {
            ledger.insert_token(ledger.len() as u32, empty_kv())?;
        }
        ledger.advance_to(st.step)?;

        let scores: Vec<RelevanceScore> = ledger
            .active_view()
            .map(|(position, _)| RelevanceScore {
                position,
                score: st.scores[position].1,
            })
            .collect();
        let first_event = self.stats.events.len();
        let outcome = policy_step(ledger, &scores, &self.params, &mut self.stats.events)?;
        for e in &self.stats.events[first_event..] {
            if let PolicyEvent::Restore {
                position, absent, ..
            } = *e
            {
                self.stats
                    .absences
                    .entry(position)
                    .or_default()
                    .push(absent);
            }
        }
        ledger.check_invariants()?;
        let (total, active) = (ledger.len(), ledger.active_count());
        let row = StepMetrics {
            step: st.step,
            total,
            active,
            frozen: ledger.frozen_count(),
            frozen_this_step: outcome.frozen,
            restored_this_step: outcome.restored,
            compression: compression_ratio(total, active),
            entropy: None,
            recovery: RecoveryAction::None,
        };
        self.stats.rows.push(row);
        Ok(row)
    }

    pub fn finish(self) -> TraceStats {
        self.stats
    }
}

/// Runs the freeze policy over a trace.
pub fn replay(trace: &ScoreTrace, params: &PolicyParams) -> Result<TraceStats> {
    let mut r = Replayer::new(*params)?;
    for st in &trace.steps {
        r.push(st)?;
    }
    Ok(r.finish())
}

/// Families of synthetic traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SynthKind {
    /// Heavy-tailed scores: a log-normal per-token level times log-normal
    /// per-step noise, median below the default threshold.
    Stress,
    /// Every score is zero: all out-of-window tokens are always cold.
    Cold,
    /// One token scores zero until the query step, then far above threshold.
    Needle,
    /// Even positions are cold and odd ones hot until the midpoint, then
    /// the roles swap.
    TopicShift,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stress => "stress",
            Self::Cold => "cold",
            Self::Needle => "needle",
            Self::TopicShift => "topic-shift",
        }
    }
}

impl core::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stress" => Self::Stress,
            "cold" => Self::Cold,
            "needle" => Self::Needle,
            "topic-shift" | "topic_shift" => Self::TopicShift,
            other => return Err(Error::Input(format!("unknown trace kind {other:?}"))),
        })
    }
}

/// Tokens present before the first step of a synthetic trace.
pub const SYNTH_PROMPT_LEN: usize = 14;
/// Score used for "hot" tokens, ten times the default threshold.
pub const HOT_SCORE: f64 = 5.0;
/// Score used for "cold" tokens, a tenth of the default threshold.
pub const COLD_SCORE: f64 = 0.05;

/// Layout of a needle trace of a given length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeedleLayout {
    pub position: usize,
    pub query_step: u64,
}

impl NeedleLayout {
    pub fn for_length(length: usize) -> Self {
        Self {
            position: SYNTH_PROMPT_LEN / 2,
            query_step: (length as u64 * 4 / 5).max(1),
        }
    }
}

/// Generates a deterministic synthetic trace with steps `1..=length`; step
/// `t` covers positions `0..SYNTH_PROMPT_LEN + t`.
pub fn synth_trace(kind: SynthKind, length: usize, seed: u64) -> ScoreTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = SYNTH_PROMPT_LEN + length;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    // Per-token level for stress; ln(0.3) median.
    let levels: Vec<f64> = (0..total)
        .map(|_| libm::exp(libm::log(0.3) + 1.0 * normal(&mut rng)))
        .collect();
    let needle = NeedleLayout::for_length(length);
    let midpoint = (length as u64 / 2).max(1);

    let steps = (1..=length as u64)
        .map(|t| {
            let n = SYNTH_PROMPT_LEN + t as usize;
            let scores = (0..n)
                .map(|p| {
                    let s = match kind {
                        SynthKind::Stress => levels[p] * libm::exp(0.75 * normal(&mut rng)),
                        SynthKind::Cold => 0.0,
                        SynthKind::Needle if p == needle.position => {
                            if t >= needle.query_step {
                                HOT_SCORE * 2.0
                            } else {
                                0.0
                            }
                        }
                        SynthKind::Needle => HOT_SCORE * (0.2 + rng.random::<f64>()),
                        SynthKind::TopicShift => {
                            let cold_before = p % 2 == 0;
                            let cold = if t < midpoint {
                                cold_before
                            } else {
                                !cold_before
                            };
                            if cold {
                                COLD_SCORE
                            } else {
                                HOT_SCORE
                            }
                        }
                    };
                    (p, s)
                })
                .collect();
            TraceStep {
                step: t,
                new_token: true,
                scores,
            }
        })
        .collect();
    ScoreTrace { steps }
}
