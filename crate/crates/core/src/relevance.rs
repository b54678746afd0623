//! Query/key relevance scores.
//!
//! A token's score is the head-averaged absolute dot product between the
//! current query and that token's key. Scores below the threshold mark the
//! token as a freeze candidate.

use alloc::format;
use alloc::vec::Vec;

use crate::cache::{KvPair, KvShape};
use crate::error::{Error, Result};
use crate::scheduler::ProtectedSet;

/// Whether dot products are divided by `sqrt(head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ScaleMode {
    #[default]
    Scaled,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceScore {
    pub position: usize,
    pub score: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score of one key against one query, both `heads * head_dim` long.
fn head_mean(query: &[f64], key: &[f64], heads: usize, scale: f64) -> f64 {
    let d = query.len() / heads;
    let total: f64 = query
        .chunks_exact(d)
        .zip(key.chunks_exact(d))
        .map(|(q, k)| libm::fabs(dot(q, k)))
        .sum();
    total / heads as f64 * scale
}

fn scale_for(mode: ScaleMode, head_dim: usize) -> f64 {
    match mode {
        ScaleMode::Scaled => 1.0 / libm::sqrt(head_dim as f64),
        ScaleMode::Raw => 1.0,
    }
}

/// Scores each `(position, key)` against `query` for a single layer.
/// `query` and every key hold `heads` consecutive head vectors.
pub fn score_tokens<'a>(
    query: &[f64],
    heads: usize,
    keys: impl IntoIterator<Item = (usize, &'a [f64])>,
    mode: ScaleMode,
) -> Result<Vec<RelevanceScore>> {
    if heads == 0 || query.is_empty() || !query.len().is_multiple_of(heads) {
        return Err(Error::Input(format!(
            "query of length {} cannot be split into {heads} heads",
            query.len()
        )));
    }
    let scale = scale_for(mode, query.len() / heads);
    keys.into_iter()
        .map(|(position, key)| {
            if key.len() != query.len() {
                return Err(Error::Input(format!(
                    "key of token {position} has length {}, query has {}",
                    key.len(),
                    query.len()
                )));
            }
            Ok(RelevanceScore {
                position,
                score: head_mean(query, key, heads, scale),
            })
        })
        .collect()
}

/// Layer-averaged scores for a multi-layer model. `queries` is layer-major,
/// one `heads * head_dim` block per layer.
pub fn score_layers<'a>(
    queries: &[f64],
    shape: KvShape,
    active: impl IntoIterator<Item = (usize, &'a KvPair)>,
    mode: ScaleMode,
) -> Result<Vec<RelevanceScore>> {
    if queries.len() != shape.len() || shape.is_empty() {
        return Err(Error::Input(format!(
            "queries have {} scalars, shape expects {}",
            queries.len(),
            shape.len()
        )));
    }
    let scale = scale_for(mode, shape.head_dim);
    active
        .into_iter()
        .map(|(position, kv)| {
            if kv.keys.len() != shape.len() {
                return Err(Error::Input(format!(
                    "key of token {position} has wrong length"
                )));
            }
            let sum: f64 = (0..shape.layers)
                .map(|l| {
                    let r = shape.layer_range(l);
                    head_mean(&queries[r.clone()], &kv.keys[r], shape.heads, scale)
                })
                .sum();
            Ok(RelevanceScore {
                position,
                score: sum / shape.layers as f64,
            })
        })
        .collect()
}

/// Positions scoring strictly below `tau` that are not protected, ascending.
pub fn flag_low_importance(
    scores: &[RelevanceScore],
    tau: f64,
    protected: &ProtectedSet,
) -> Vec<usize> {
    let mut flagged: Vec<usize> = scores
        .iter()
        .filter(|s| s.score < tau && !protected.contains(s.position))
        .map(|s| s.position)
        .collect();
    flagged.sort_unstable();
    flagged.dedup();
    flagged
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn one(query: &[f64], key: &[f64], heads: usize, mode: ScaleMode) -> f64 {
        score_tokens(query, heads, [(0, key)], mode).unwrap()[0].score
    }

    #[test]
    fn orthogonal_is_zero() {
        assert_eq!(one(&[1.0, 0.0], &[0.0, 1.0], 1, ScaleMode::Raw), 0.0);
    }

    #[test]
    fn unit_alignment_is_one() {
        assert_eq!(one(&[1.0, 0.0], &[1.0, 0.0], 1, ScaleMode::Raw), 1.0);
    }

    #[test]
    fn head_mean_of_absolute_dots() {
        // head 0: 3, head 1: -1
        let q = [1.0, 1.0, 1.0, 0.0];
        let k = [1.0, 2.0, -1.0, 5.0];
        assert_eq!(one(&q, &k, 2, ScaleMode::Raw), 2.0);
        assert_eq!(one(&q, &k, 2, ScaleMode::Scaled), 2.0 / libm::sqrt(2.0));
    }

    #[test]
    fn mismatched_key_rejected() {
        assert!(matches!(
            score_tokens(&[1.0, 0.0], 1, [(3, &[1.0][..])], ScaleMode::Raw),
            Err(Error::Input(_))
        ));
        assert!(score_tokens(&[1.0, 0.0, 1.0], 2, [], ScaleMode::Raw).is_err());
    }

    #[test]
    fn layer_average() {
        let shape = KvShape::new(2, 1, 1);
        let kv = KvPair {
            keys: vec![2.0, 4.0],
            values: vec![0.0, 0.0],
        };
        let s = score_layers(&[1.0, 1.0], shape, [(0, &kv)], ScaleMode::Raw).unwrap();
        assert_eq!(s[0].score, 3.0);
    }

    fn scores(pairs: &[(usize, f64)]) -> Vec<RelevanceScore> {
        pairs
            .iter()
            .map(|&(position, score)| RelevanceScore { position, score })
            .collect()
    }

    #[test]
    fn threshold_semantics() {
        let none = ProtectedSet::new(10, 0, 0);
        assert!(flag_low_importance(&scores(&[(1, 0.6), (2, 0.9)]), 0.5, &none).is_empty());
        assert_eq!(
            flag_low_importance(&scores(&[(1, 0.2), (2, 0.7)]), 0.5, &none),
            vec![1]
        );
        assert!(flag_low_importance(&scores(&[(1, 0.5)]), 0.5, &none).is_empty());
    }

    #[test]
    fn protected_never_flagged() {
        let p = ProtectedSet::new(6, 2, 1);
        let s = scores(&[(5, 0.0), (0, 0.0), (3, 0.0), (1, 0.0)]);
        assert_eq!(flag_low_importance(&s, 0.5, &p), vec![1, 3]);
    }

    proptest! {
        #[test]
        fn head_permutation_invariant(
            q in prop::collection::vec(-3.0f64..3.0, 12),
            k in prop::collection::vec(-3.0f64..3.0, 12),
            rot in 0usize..4,
        ) {
            // 4 heads of dim 3; rotate head order in both vectors
            let rotate = |v: &[f64]| -> Vec<f64> {
                let mut out = v[rot * 3..].to_vec();
                out.extend_from_slice(&v[..rot * 3]);
                out
            };
            let a = one(&q, &k, 4, ScaleMode::Scaled);
            let b = one(&rotate(&q), &rotate(&k), 4, ScaleMode::Scaled);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn homogeneous_in_query(
            q in prop::collection::vec(-3.0f64..3.0, 8),
            keys in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..12),
            alpha in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0]),
            tau in 0.01f64..4.0,
        ) {
            let scaled_q: Vec<f64> = q.iter().map(|x| x * alpha).collect();
            let kv: Vec<(usize, &[f64])> = keys.iter().enumerate().map(|(i, k)| (i, &k[..])).collect();
            let base = score_tokens(&q, 2, kv.clone(), ScaleMode::Scaled).unwrap();
            let scaled = score_tokens(&scaled_q, 2, kv, ScaleMode::Scaled).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert_eq!(a.score * alpha, b.score);
            }
            let none = ProtectedSet::new(keys.len(), 0, 0);
            prop_assert_eq!(
                flag_low_importance(&base, tau, &none),
                flag_low_importance(&scaled, tau * alpha, &none)
            );
        }

        #[test]
        fn flagged_subset_of_unprotected(
            raw in prop::collection::vec(0.0f64..1.0, 1..40),
            window in 0usize..10,
            pinned in 0usize..5,
            tau in 0.0f64..1.0,
        ) {
            let s: Vec<RelevanceScore> = raw.iter().enumerate()
                .map(|(position, &score)| RelevanceScore { position, score }).collect();
            let p = ProtectedSet::new(raw.len(), window, pinned);
            let flagged = flag_low_importance(&s, tau, &p);
            prop_assert!(flagged.windows(2).all(|w| w[0] < w[1]));
            for f in flagged {
                prop_assert!(!p.contains(f));
                prop_assert!(raw[f] < tau);
            }
        }
    }
}
