use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attend::attend;
use super::sampling::{entropy, softmax};
use crate::cache::{CacheLedger, FrozenTier, KvPair, KvShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_shape(&self) -> KvShape {
        KvShape::new(self.n_layers, self.n_heads, self.head_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "d_model",
                "must be a positive multiple of n_heads",
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.vocab_size < 2 || self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        Ok(())
    }
}

/// Projection matrices of one layer, each `d_model x d_model`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

/// A planted retrieval head for the synthetic passkey scenario.
///
/// On head 0 of the last layer, the query and key projections lose their
/// component along a seeded unit vector `u`; the query token then receives
/// `query_gain * u` and the key token `key_gain * u`. Only the query token can
/// therefore single out the key token. The value projection likewise loses
/// its component along `w`, the key token's value gains `value_gain * w`, and
/// the key token's logit gains `readout_gain * (context . w)`, which copies
/// the attended key token to the output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalCircuit {
    pub query_token: u32,
    pub key_token: u32,
    pub query_gain: f64,
    pub key_gain: f64,
    pub value_gain: f64,
    pub readout_gain: f64,
}

impl RetrievalCircuit {
    pub fn new(query_token: u32, key_token: u32) -> Self {
        Self {
            query_token,
            key_token,
            query_gain: 8.0,
            key_gain: 8.0,
            value_gain: 4.0,
            readout_gain: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Planted {
    circuit: RetrievalCircuit,
    u: Vec<f64>,
    w: Vec<f64>,
}

/// Result of running one token through the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Layer-major query vectors, `[layer][head][dim]`.
    pub queries: Vec<f64>,
    /// The token's own keys and values.
    pub kv: KvPair,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub queries: Vec<f64>,
    pub logits: Vec<f64>,
    /// Softmax of the raw logits, before any sampling truncation.
    pub probs: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f64>,
    unembed: Vec<f64>,
    layers: Vec<LayerWeights>,
    planted: Option<Planted>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + 1e-6);
    x.iter().map(|v| v * inv).collect()
}

/// Sinusoidal absolute-position code.
pub(crate) fn position_code(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = libm::pow(10_000.0, -((i / 2 * 2) as f64) / d as f64);
            let angle = position as f64 * freq;
            if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            }
        })
        .collect()
}

/// Removes the component along unit vector `u` from rows `rows` of `m`
/// (a `rows.len() x cols` block), i.e. `M <- (I - u u^T) M`.
fn project_out(m: &mut [f64], rows: core::ops::Range<usize>, cols: usize, u: &[f64]) {
    for c in 0..cols {
        let along: f64 = rows
            .clone()
            .zip(u)
            .map(|(r, ui)| m[r * cols + c] * ui)
            .sum();
        for (r, ui) in rows.clone().zip(u) {
            m[r * cols + c] -= along * ui;
        }
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal_vec(rng, n, 1.0);
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / norm).collect()
}

impl Model {
    /// Seeded synthetic weights: embeddings with unit variance, projections
    /// and the output head with variance `1 / d_model`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / libm::sqrt(d as f64);
        let embed = normal_vec(&mut rng, config.vocab_size * d, 1.0);
        let unembed = normal_vec(&mut rng, config.vocab_size * d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: normal_vec(&mut rng, d * d, std),
                wk: normal_vec(&mut rng, d * d, std),
                wv: normal_vec(&mut rng, d * d, std),
                wo: normal_vec(&mut rng, d * d, std),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            unembed,
            layers,
            planted: None,
        })
    }

    /// Model with explicit weights.
    pub fn from_parts(
        config: ModelConfig,
        embed: Vec<f64>,
        unembed: Vec<f64>,
        layers: Vec<LayerWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let table = config.vocab_size * d;
        if embed.len() != table || unembed.len() != table || layers.len() != config.n_layers {
            return Err(Error::config(
                "model",
                "weight tables do not match the configuration",
            ));
        }
        if layers.iter().any(|l| {
            [&l.wq, &l.wk, &l.wv, &l.wo]
                .iter()
                .any(|m| m.len() != d * d)
        }) {
            return Err(Error::config(
                "model",
                "projection matrices must be d_model x d_model",
            ));
        }
        Ok(Self {
            config,
            embed,
            unembed,
            layers,
            planted: None,
        })
    }

    /// Seeded model with a planted [`RetrievalCircuit`].
    pub fn with_retrieval(config: ModelConfig, circuit: RetrievalCircuit) -> Result<Self> {
        let mut model = Self::new(config)?;
        let vocab = config.vocab_size as u32;
        if circuit.query_token >= vocab || circuit.key_token >= vocab {
            return Err(Error::config(
                "retrieval",
                "token ids must be below vocab_size",
            ));
        }
        let dk = config.head_dim();
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7265_7472_6965_7665);
        let u = unit(&mut rng, dk);
        let w = unit(&mut rng, dk);
        let last = model.layers.last_mut().expect("validated n_layers >= 1");
        project_out(&mut last.wq, 0..dk, d, &u);
        project_out(&mut last.wk, 0..dk, d, &u);
        project_out(&mut last.wv, 0..dk, d, &w);
        model.planted = Some(Planted { circuit, u, w });
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn retrieval(&self) -> Option<&RetrievalCircuit> {
        self.planted.as_ref().map(|p| &p.circuit)
    }

    /// Runs `token` at `position` attending to `context` plus itself.
    ///
    /// `context` is whatever the caller keeps visible, in position order. The
    /// arithmetic depends only on that list, so a ledger's active view and a
    /// monolithic cache holding the same tokens give bit-identical output.
    pub fn forward(
        &self,
        token: u32,
        position: usize,
        context: &[&KvPair],
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let shape = cfg.kv_shape();
        let (d, dk, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
        if context
            .iter()
            .any(|kv| kv.keys.len() != shape.len() || kv.values.len() != shape.len())
        {
            return Err(Error::config(
                "model",
                "context kv shape differs from model",
            ));
        }

        let t = token as usize;
        let mut h: Vec<f64> = self.embed[t * d..(t + 1) * d]
            .iter()
            .zip(position_code(position, d))
            .map(|(e, p)| e + p)
            .collect();
        let mut kv = KvPair::zeros(shape);
        let mut queries = vec![0.0; shape.len()];
        let mut readout = 0.0;
        let mut proj = vec![0.0; d];

        for (l, layer) in self.layers.iter().enumerate() {
            let x = rms_norm(&h);
            let range = shape.layer_range(l);
            let mut q = vec![0.0; d];
            matvec(&layer.wq, &x, &mut q);
            matvec(&layer.wk, &x, &mut kv.keys[range.clone()]);
            matvec(&layer.wv, &x, &mut kv.values[range.clone()]);

            let planted = self.planted.as_ref().filter(|_| l + 1 == cfg.n_layers);
            if let Some(p) = planted {
                let c = &p.circuit;
                if token == c.query_token {
                    q[..dk]
                        .iter_mut()
                        .zip(&p.u)
                        .for_each(|(a, u)| *a += c.query_gain * u);
                }
                if token == c.key_token {
                    let k = &mut kv.keys[range.start..range.start + dk];
                    k.iter_mut()
                        .zip(&p.u)
                        .for_each(|(a, u)| *a += c.key_gain * u);
                    let v = &mut kv.values[range.start..range.start + dk];
                    v.iter_mut()
                        .zip(&p.w)
                        .for_each(|(a, w)| *a += c.value_gain * w);
                }
            }
            queries[range.clone()].copy_from_slice(&q);

            let own_k = &kv.keys[range.clone()];
            let own_v = &kv.values[range.clone()];
            let mut keys: Vec<&[f64]> = context.iter().map(|c| &c.keys[range.clone()]).collect();
            let mut values: Vec<&[f64]> =
                context.iter().map(|c| &c.values[range.clone()]).collect();
            keys.push(own_k);
            values.push(own_v);
            let ctx = attend(&q, heads, &keys, &values)?;

            if let Some(p) = planted {
                readout = ctx[..dk].iter().zip(&p.w).map(|(a, b)| a * b).sum();
            }
            matvec(&layer.wo, &ctx, &mut proj);
            h.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }

        let x = rms_norm(&h);
        let mut logits = vec![0.0; cfg.vocab_size];
        matvec(&self.unembed, &x, &mut logits);
        if let Some(p) = &self.planted {
            logits[p.circuit.key_token as usize] += p.circuit.readout_gain * readout;
        }
        Ok(ForwardOutput {
            queries,
            kv,
            logits,
        })
    }

    /// Forward pass over the ledger's active view; appends the new token.
    pub fn forward_step<T: FrozenTier>(
        &self,
        ledger: &mut CacheLedger<T>,
        token: u32,
    ) -> Result<StepOutput> {
        if ledger.shape() != self.config.kv_shape() {
            return Err(Error::config("model", "ledger kv shape differs from model"));
        }
        let position = ledger.len();
        let context: Vec<&KvPair> = ledger.active_view().map(|(_, kv)| kv).collect();
        let out = self.forward(token, position, &context)?;
        ledger.insert_token(token, out.kv)?;
        let probs = softmax(&out.logits);
        let entropy = entropy(&probs);
        Ok(StepOutput {
            position,
            queries: out.queries,
            logits: out.logits,
            probs,
            entropy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig::default()).unwrap();
        let b = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(
            Model::new(bad),
            Err(Error::Config { key: "d_model", .. })
        ));
    }

    #[test]
    fn token_outside_vocab() {
        let m = Model::new(ModelConfig::default()).unwrap();
        assert!(matches!(m.forward(512, 0, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn projection_removes_direction() {
        let cfg = ModelConfig::default();
        let m = Model::with_retrieval(cfg, RetrievalCircuit::new(1, 2)).unwrap();
        let p = m.planted.as_ref().unwrap();
        let last = m.layers.last().unwrap();
        let dk = cfg.head_dim();
        for c in 0..cfg.d_model {
            let along: f64 = (0..dk).map(|r| last.wq[r * cfg.d_model + c] * p.u[r]).sum();
            assert!(along.abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_within_bounds() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg).unwrap();
        let mut ledger = CacheLedger::new(cfg.kv_shape(), 4, 0);
        for t in 0..20 {
            let out = m.forward_step(&mut ledger, t * 7).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(out.entropy >= 0.0 && out.entropy <= libm::log(cfg.vocab_size as f64) + 1e-12);
        }
    }
}
