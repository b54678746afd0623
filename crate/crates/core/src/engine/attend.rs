use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Max-subtracted softmax. An all `-inf` input is left as zeros.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn check(query: &[f64], heads: usize, keys: &[&[f64]]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::Invariant(
            "attention over an empty active set".into(),
        ));
    }
    if heads == 0 || !query.len().is_multiple_of(heads) {
        return Err(Error::Input(format!(
            "query of length {} cannot be split into {heads} heads",
            query.len()
        )));
    }
    if keys.iter().any(|k| k.len() != query.len()) {
        return Err(Error::Input("key length differs from query".into()));
    }
    Ok(query.len() / heads)
}

/// Per-head attention weights, `heads` rows of `keys.len()` entries.
pub fn attend_weights(query: &[f64], heads: usize, keys: &[&[f64]]) -> Result<Vec<f64>> {
    let d = check(query, heads, keys)?;
    let scale = 1.0 / libm::sqrt(d as f64);
    let n = keys.len();
    let mut weights = vec![0.0; heads * n];
    for h in 0..heads {
        let q = &query[h * d..(h + 1) * d];
        let row = &mut weights[h * n..(h + 1) * n];
        for (w, k) in row.iter_mut().zip(keys) {
            let k = &k[h * d..(h + 1) * d];
            *w = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(row);
    }
    Ok(weights)
}

/// Scaled dot-product attention of one query over the given tokens.
///
/// `query`, every key and every value hold `heads` consecutive head vectors.
/// The result has the same layout as `query`.
pub fn attend(query: &[f64], heads: usize, keys: &[&[f64]], values: &[&[f64]]) -> Result<Vec<f64>> {
    let d = check(query, heads, keys)?;
    if values.len() != keys.len() || values.iter().any(|v| v.len() != query.len()) {
        return Err(Error::Input(format!(
            "{} values for {} keys, or value length differs from query",
            values.len(),
            keys.len()
        )));
    }
    let weights = attend_weights(query, heads, keys)?;
    let n = keys.len();
    let mut out = vec![0.0; query.len()];
    for h in 0..heads {
        let ctx = &mut out[h * d..(h + 1) * d];
        for (j, v) in values.iter().enumerate() {
            let w = weights[h * n + j];
            for (c, x) in ctx.iter_mut().zip(&v[h * d..(h + 1) * d]) {
                *c += w * x;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton_returns_its_value() {
        let v = [0.3, -1.7, 2.5, 9.0];
        let out = attend(&[5.0, 1.0, -2.0, 0.5], 2, &[&[1.0, 2.0, 3.0, 4.0]], &[&v]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn equal_logits_average_values() {
        let k = [1.0, 1.0];
        let out = attend(&[0.5, 0.5], 1, &[&k, &k], &[&[2.0, 4.0], &[6.0, -8.0]]).unwrap();
        assert_eq!(out, [4.0, -2.0]);
    }

    #[test]
    fn empty_set_is_invariant_violation() {
        assert!(matches!(
            attend(&[1.0], 1, &[], &[]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn softmax_handles_all_masked() {
        let mut xs = [f64::NEG_INFINITY; 3];
        softmax_in_place(&mut xs);
        assert_eq!(xs, [0.0; 3]);
    }

    proptest! {
        #[test]
        fn shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..16),
            shift in -50.0f64..50.0,
        ) {
            let mut a = logits.clone();
            let mut b: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            softmax_in_place(&mut a);
            softmax_in_place(&mut b);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn output_shift_invariant(
            q in prop::collection::vec(-2.0f64..2.0, 4),
            rows in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 4), prop::collection::vec(-2.0f64..2.0, 4)), 1..10),
            c in -5.0f64..5.0,
        ) {
            // Adding c * q / |q|^2 * sqrt(d) to every key shifts every logit of
            // head 0 by the same constant.
            let keys: Vec<&[f64]> = rows.iter().map(|r| &r.0[..]).collect();
            let values: Vec<&[f64]> = rows.iter().map(|r| &r.1[..]).collect();
            let norm: f64 = q.iter().map(|x| x * x).sum();
            prop_assume!(norm > 1e-3);
            let shifted: Vec<Vec<f64>> = rows.iter()
                .map(|r| r.0.iter().zip(&q).map(|(k, qi)| k + c * qi / norm * 2.0).collect())
                .collect();
            let skeys: Vec<&[f64]> = shifted.iter().map(|k| &k[..]).collect();
            let a = attend(&q, 1, &keys, &values).unwrap();
            let b = attend(&q, 1, &skeys, &values).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
