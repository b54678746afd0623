use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Decoding parameters. A temperature of zero selects greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    pub temperature: f64,
    /// `None` keeps the whole vocabulary; written as `0` in config files.
    #[cfg_attr(feature = "serde", serde(with = "top_k_serde"))]
    pub top_k: Option<usize>,
    pub top_p: f64,
    /// Set by the run's master seed rather than the config file.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
}

#[cfg(feature = "serde")]
mod top_k_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(k.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let k = usize::deserialize(d)?;
        Ok((k > 0).then_some(k))
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: Some(40),
            top_p: 0.9,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::config("temperature", "must be finite and >= 0"));
        }
        if self.top_k == Some(0) {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Seeded sampler. Cloning snapshots the generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Draws a token id: temperature, then top-k, then top-p, then a seeded
    /// draw from the renormalized survivors. Ties rank the lower id first.
    pub fn sample(&mut self, logits: &[f64]) -> u32 {
        if self.config.temperature == 0.0 {
            return argmax(logits);
        }
        let t = self.config.temperature;
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        if let Some(k) = self.config.top_k {
            order.truncate(k.max(1));
        }
        let max = logits[order[0]] / t;
        let mut probs: Vec<f64> = order
            .iter()
            .map(|&i| libm::exp(logits[i] / t - max))
            .collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);

        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= self.config.top_p {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
        probs.truncate(keep);
        let mass: f64 = probs.iter().sum();

        let u: f64 = self.rng.random::<f64>() * mass;
        let mut acc = 0.0;
        for (&id, p) in order.iter().zip(&probs) {
            acc += p;
            if u < acc {
                return id as u32;
            }
        }
        order[order.len() - 1] as u32
    }
}

/// Index of the largest logit, lowest id on ties.
pub(crate) fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    super::softmax_in_place(&mut p);
    p
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// Probability of the most likely token.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}
