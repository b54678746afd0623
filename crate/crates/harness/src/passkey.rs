//! Synthetic passkey retrieval on the toy model.
//!
//! This is a constructed analogue, not natural-language retrieval. A
//! designated passkey id sits in the middle of a seeded filler prompt, and
//! the model carries a planted head that makes a designated query id attend
//! to the passkey and promote it in the output. After a stretch of free
//! greedy generation, the query id is fed for `floor(sqrt(W) / k) + 1`
//! steps. The run passes if the passkey takes part in the last query step's
//! attention and that step's argmax is the passkey.

use std::fmt;

use kvfreeze_core::engine::RetrievalCircuit;
use kvfreeze_core::{Model, PolicyEvent, Residency, SamplerConfig, Session, StepMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyReport {
    pub pass: bool,
    pub passkey_id: u32,
    pub passkey_position: usize,
    pub prompt_len: usize,
    /// First and last query step.
    pub query_steps: (u64, u64),
    /// The passkey was active for the last query step's forward pass.
    pub active_at_query: bool,
    pub predicted: u32,
    /// Inclusive step ranges of forward passes the passkey missed.
    pub absences: Vec<(u64, u64)>,
    pub max_consecutive_absence: u64,
    /// `floor(sqrt(W) / k)`, if the history window is bounded.
    pub bound: Option<u64>,
    pub metrics: Vec<StepMetrics>,
}

impl fmt::Display for PasskeyReport {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        writeln!(f, "synthetic passkey scenario (constructed retrieval head on the toy model, not natural language)")?;
        writeln!(
            f,
            "passkey id {} at position {} of a {}-token prompt",
            self.passkey_id, self.passkey_position, self.prompt_len
        )?;
        writeln!(
            f,
            "query steps {}..={}",
            self.query_steps.0, self.query_steps.1
        )?;
        writeln!(f, "active at query: {}", self.active_at_query)?;
        writeln!(f, "argmax at query: {}", self.predicted)?;
        let intervals: Vec<String> = self
            .absences
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        writeln!(f, "absence intervals: [{}]", intervals.join(", "))?;
        match self.bound {
            Some(b) => writeln!(
                f,
                "max consecutive absence: {} (bound {b})",
                self.max_consecutive_absence
            )?,
            None => writeln!(
                f,
                "max consecutive absence: {}",
                self.max_consecutive_absence
            )?,
        }
        write!(f, "result: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Merges absence episodes into maximal runs of consecutive missed steps.
fn merge(mut episodes: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    episodes.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (a, b) in episodes {
        match out.last_mut() {
            Some(last) if a <= last.1 + 1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

pub fn run_passkey(cfg: &RunConfig) -> Result<PasskeyReport> {
    cfg.validate()?;
    let vocab = cfg.model.vocab_size as u32;
    if vocab < 3 {
        return Err(kvfreeze_core::Error::Config {
            key: "vocab_size",
            reason: "passkey scenario needs at least 3 ids".into(),
        }
        .into());
    }
    let (passkey, query) = (vocab - 2, vocab - 1);
    let model = Model::with_retrieval(cfg.model, RetrievalCircuit::new(query, passkey))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let filler = cfg.passkey.filler_len;
    let mut prompt: Vec<u32> = (0..filler).map(|_| rng.random_range(0..passkey)).collect();
    let position = filler / 2;
    prompt.insert(position, passkey);

    let mut session_cfg = cfg.session();
    session_cfg.sampler = SamplerConfig {
        seed: cfg.run.seed,
        ..SamplerConfig::greedy()
    };
    let mut session = Session::new(&model, &prompt, session_cfg)?;
    let mut metrics = Vec::new();
    for _ in 0..cfg.passkey.generate_steps {
        metrics.push(session.advance()?);
    }

    let bound = cfg.policy.max_duration();
    let query_len = bound.unwrap_or(0) + 1;
    let first_query = session.step() + 1;
    let mut active_at_query = false;
    for _ in 0..query_len {
        active_at_query = session.ledger().residency(position) == Some(Residency::Active);
        metrics.push(session.run_step(query)?);
    }
    let predicted = session.pending();

    let last = session.step();
    let episodes = session
        .events()
        .iter()
        .filter_map(|e| match *e {
            PolicyEvent::Freeze {
                step,
                position: p,
                duration,
                ..
            } if p == position && step < last => Some((step + 1, (step + duration).min(last))),
            _ => None,
        })
        .collect();
    let absences = merge(episodes);
    let max_consecutive_absence = absences.iter().map(|(a, b)| b - a + 1).max().unwrap_or(0);
    Ok(PasskeyReport {
        pass: active_at_query && predicted == passkey,
        passkey_id: passkey,
        passkey_position: position,
        prompt_len: prompt.len(),
        query_steps: (first_query, last),
        active_at_query,
        predicted,
        absences,
        max_consecutive_absence,
        bound,
        metrics,
    })
}
