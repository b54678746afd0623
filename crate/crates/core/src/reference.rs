//! Monolithic full-cache generation, kept independent of the ledger so it
//! can serve as the baseline the freeze policy is compared against.

use alloc::vec::Vec;

use crate::cache::KvPair;
use crate::engine::{Model, Sampler, SamplerConfig};
use crate::error::{Error, Result};

/// Prefills `prompt` and generates `n_steps` further ids with every token
/// always visible. Returns all sampled ids, starting with the one sampled
/// after prefill.
pub fn generate_full_cache(
    model: &Model,
    prompt: &[u32],
    n_steps: usize,
    sampler: SamplerConfig,
) -> Result<Vec<u32>> {
    let (cache, mut sampler, first) = prefill(model, prompt, sampler)?;
    let mut cache = cache;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(first);
    for _ in 0..n_steps {
        let input = *out.last().expect("non-empty");
        let next = step(model, &mut cache, &mut sampler, input)?;
        out.push(next);
    }
    Ok(out)
}

fn prefill(
    model: &Model,
    prompt: &[u32],
    config: SamplerConfig,
) -> Result<(Vec<KvPair>, Sampler, u32)> {
    if prompt.is_empty() {
        return Err(Error::Input(
            "prompt must contain at least one token".into(),
        ));
    }
    let mut cache: Vec<KvPair> = Vec::with_capacity(prompt.len());
    let mut logits = Vec::new();
    for &t in prompt {
        let context: Vec<&KvPair> = cache.iter().collect();
        let out = model.forward(t, cache.len(), &context)?;
        cache.push(out.kv);
        logits = out.logits;
    }
    let mut sampler = Sampler::new(config);
    let first = sampler.sample(&logits);
    Ok((cache, sampler, first))
}

fn step(model: &Model, cache: &mut Vec<KvPair>, sampler: &mut Sampler, input: u32) -> Result<u32> {
    let context: Vec<&KvPair> = cache.iter().collect();
    let out = model.forward(input, cache.len(), &context)?;
    cache.push(out.kv);
    Ok(sampler.sample(&out.logits))
}
