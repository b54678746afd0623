use kvfreeze_core::engine::{attend, attend_weights, LayerWeights};
use kvfreeze_core::{KvPair, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn diag(v: [f64; 4]) -> Vec<f64> {
    let mut m = vec![0.0; 16];
    for (i, x) in v.into_iter().enumerate() {
        m[i * 4 + i] = x;
    }
    m
}

fn tiny_model() -> Model {
    let config = ModelConfig {
        d_model: 4,
        n_heads: 1,
        n_layers: 1,
        vocab_size: 3,
        seed: 0,
    };
    let embed = vec![
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 1.0,
    ];
    let unembed = vec![
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, -1.0,
    ];
    let layer = LayerWeights {
        wq: diag([1.0; 4]),
        wk: diag([1.0, 2.0, 1.0, 0.5]),
        wv: diag([0.5; 4]),
        wo: diag([1.0; 4]),
    };
    Model::from_parts(config, embed, unembed, vec![layer]).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// Golden values computed outside this crate for the weights above.
#[test]
fn two_token_forward_matches_hand_computation() {
    let m = tiny_model();
    let first = m.forward(2, 0, &[]).unwrap();
    assert!(close(
        &first.logits,
        &[0.0, 0.8164964436896487, -0.8164964436896487],
        1e-12
    ));
    let second = m.forward(1, 1, &[&first.kv]).unwrap();
    assert!(close(
        &second.logits,
        &[0.7875564080676091, 1.502320271213993, -0.9872301951214743],
        1e-12
    ));
    let keys = [&first.kv.keys[..], &second.kv.keys[..]];
    let w = attend_weights(&second.queries, 1, &keys).unwrap();
    assert!(close(&w, &[0.22021595780143025, 0.7797840421985698], 1e-12));
}

/// Full attention with masked positions forced to zero weight.
fn masked_oracle(
    q: &[f64],
    heads: usize,
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    mask: &[bool],
) -> Vec<f64> {
    let d = q.len() / heads;
    let mut out = vec![0.0; q.len()];
    for h in 0..heads {
        let r = h * d..(h + 1) * d;
        let logits: Vec<f64> = keys
            .iter()
            .zip(mask)
            .map(|(k, &on)| {
                if on {
                    q[r.clone()]
                        .iter()
                        .zip(&k[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (e, v) in exps.iter().zip(values) {
            for (o, x) in out[r.clone()].iter_mut().zip(&v[r.clone()]) {
                *o += e / z * x;
            }
        }
    }
    out
}

#[test]
fn active_subset_equals_masked_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let heads = rng.random_range(1..=4);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=24);
        let width = heads * d;
        let mut vec_of =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let q = vec_of(width);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| vec_of(width)).collect();
        let values: Vec<Vec<f64>> = (0..n).map(|_| vec_of(width)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let last = n - 1;
        mask[last] = true;

        let ks: Vec<&[f64]> = (0..n).filter(|&i| mask[i]).map(|i| &keys[i][..]).collect();
        let vs: Vec<&[f64]> = (0..n)
            .filter(|&i| mask[i])
            .map(|i| &values[i][..])
            .collect();
        let got = attend(&q, heads, &ks, &vs).unwrap();
        let want = masked_oracle(&q, heads, &keys, &values, &mask);
        assert!(close(&got, &want, 1e-9), "got {got:?} want {want:?}");
    }
}

#[test]
fn dropping_a_negligible_token_barely_moves_logits() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let shape = model.config().kv_shape();
    let mut context: Vec<KvPair> = Vec::new();
    for (pos, t) in [3u32, 41, 7, 99, 250].into_iter().enumerate() {
        let refs: Vec<&KvPair> = context.iter().collect();
        let out = model.forward(t, pos, &refs).unwrap();
        context.push(out.kv);
    }
    let without: Vec<&KvPair> = context.iter().collect();
    let pos = context.len() + 1;
    let dropped = model.forward(12, pos, &without).unwrap();

    // A key anti-aligned with every head's query gets negligible weight.
    let mut bad = KvPair::zeros(shape);
    for (k, q) in bad.keys.iter_mut().zip(&dropped.queries) {
        *k = -60.0 * q;
    }
    let mut with_bad: Vec<&KvPair> = context.iter().collect();
    with_bad.insert(2, &bad);

    let full = model.forward(12, pos, &with_bad).unwrap();
    for l in 0..shape.layers {
        let r = shape.layer_range(l);
        let mut keys: Vec<&[f64]> = with_bad.iter().map(|kv| &kv.keys[r.clone()]).collect();
        keys.push(&full.kv.keys[r.clone()]);
        let w = attend_weights(&full.queries[r.clone()], shape.heads, &keys).unwrap();
        for h in 0..shape.heads {
            assert!(
                w[h * keys.len() + 2] < 1e-12,
                "weight {}",
                w[h * keys.len() + 2]
            );
        }
    }
    assert!(close(&full.logits, &dropped.logits, 1e-9));
}

#[test]
fn forward_is_deterministic() {
    let a = Model::new(ModelConfig::default()).unwrap();
    let b = Model::new(ModelConfig::default()).unwrap();
    let x = a.forward(5, 0, &[]).unwrap();
    let y = b.forward(5, 0, &[]).unwrap();
    assert_eq!(x, y);
}
