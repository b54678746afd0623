//! A small deterministic transformer that drives the cache policy with real
//! attention arithmetic.
//!
//! Weights are drawn from a seeded generator; nothing is trained. The model
//! exists so that relevance scores, attention outputs and entropy all come
//! from genuine softmax attention over whatever the ledger currently keeps
//! active.

mod attend;
mod model;
mod sampling;

pub use attend::{attend, attend_weights, softmax_in_place};
pub use model::{ForwardOutput, LayerWeights, Model, ModelConfig, RetrievalCircuit, StepOutput};
pub use sampling::{confidence, entropy, softmax, Sampler, SamplerConfig};
