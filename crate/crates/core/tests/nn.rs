mod common;

use plus_autodiff::{grad_check, Error as AdError, Tape, Tensor, Var};
use plus_core::nn::{adaptive_pool3d, init_params, AttentionConfig, Bound, Conv3d, LayerSpec, Linear, MultiHeadAttention, ParamSet};
use proptest::prelude::*;

use common::*;

fn frozen_attention(heads: usize, dim: usize, seed: u64) -> (MultiHeadAttention, ParamSet<f64>) {
    let mha = MultiHeadAttention::new("a", AttentionConfig::new(dim, heads).unwrap());
    let mut p: ParamSet<f64> = init_params(&mha.specs(), seed).unwrap();
    // nonzero biases so that the bias paths are exercised too
    for name in ["a.q.bias", "a.k.bias", "a.v.bias", "a.out.bias"] {
        p.set(name, rand_t(&[dim], seed ^ name.len() as u64)).unwrap();
    }
    (mha, p)
}

fn attend(mha: &MultiHeadAttention, p: &ParamSet<f64>, q: &Tensor<f64>, kv: &Tensor<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let b = p.bind_frozen(&tape);
    let out = mha.forward(&tape, &b, tape.constant(q.clone()), tape.constant(kv.clone())).unwrap();
    let w = out.weights.iter().map(|w| tape.value(*w).data().to_vec()).collect();
    (tape.value(out.output).data().to_vec(), w)
}

#[test]
fn single_key_returns_its_projected_value() {
    let (mha, p) = frozen_attention(2, 4, 1);
    let kv = rand_t(&[1, 4], 2);
    let (a, _) = attend(&mha, &p, &rand_t(&[3, 4], 3), &kv);
    let (b, _) = attend(&mha, &p, &rand_t(&[3, 4], 4), &kv);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    // every query row is the same vector
    for row in a.chunks(4).skip(1) {
        for (x, y) in row.iter().zip(&a[..4]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let (mha, p) = frozen_attention(2, 4, 5);
    let row = rand_t(&[1, 4], 6);
    let kv = Tensor::from_f64(&[3, 4], &row.data().repeat(3)).unwrap();
    let (_, weights) = attend(&mha, &p, &rand_t(&[2, 4], 7), &kv);
    for w in weights.iter().flatten() {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_single_query_mixture() {
    let mha = MultiHeadAttention::new("a", AttentionConfig::new(2, 1).unwrap());
    let mut p: ParamSet<f64> = init_params(&mha.specs(), 0).unwrap();
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    for name in ["a.q", "a.k", "a.v", "a.out"] {
        p.set(&format!("{name}.weight"), eye.clone()).unwrap();
    }
    let q = t(&[1, 2], &[1.0, 0.0]);
    let kv = t(&[2, 2], &[2.0, 0.0, 0.0, 1.0]);
    let (out, w) = attend(&mha, &p, &q, &kv);
    // scores 2/sqrt2 and 0
    let e = (2f64 / 2f64.sqrt()).exp();
    let w0 = e / (e + 1.0);
    assert!((w[0][0] - w0).abs() < 1e-12);
    assert!((out[0] - 2.0 * w0).abs() < 1e-12);
    assert!((out[1] - (1.0 - w0)).abs() < 1e-12);
}

#[test]
fn dim_mismatch_and_empty_keys_are_rejected() {
    let (mha, p) = frozen_attention(2, 4, 8);
    let tape = Tape::new();
    let b = p.bind_frozen(&tape);
    let q = tape.constant(rand_t(&[2, 4], 9));
    assert!(mha.forward(&tape, &b, q, tape.constant(rand_t(&[2, 3], 10))).is_err());
    // an empty key set cannot even be built
    assert!(Tensor::<f64>::new(&[0, 4], Vec::new()).is_err());
    assert!(AttentionConfig::new(6, 4).is_err());
}

#[test]
fn conv_examples() {
    let conv = Conv3d::new("c", 1, 0);
    let mut p: ParamSet<f64> = init_params(&[conv.spec(1, 1, 2)], 0).unwrap();
    p.set("c.weight", Tensor::from_f64(&[1, 1, 2, 2, 2], &[1.0; 8]).unwrap()).unwrap();
    let tape = Tape::new();
    let b = p.bind_frozen(&tape);
    let ones = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1.0; 8]).unwrap());
    let y = conv.forward(&tape, &b, ones).unwrap();
    assert_eq!(tape.shape(y), vec![1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[8.0]);
    // kernel larger than the padded input
    let small = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(conv.forward(&tape, &b, small).is_err());

    let point = Conv3d::new("p", 1, 0);
    let mut p: ParamSet<f64> = init_params(&[point.spec(1, 1, 1)], 0).unwrap();
    p.set("p.weight", Tensor::from_f64(&[1, 1, 1, 1, 1], &[1.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let b = p.bind_frozen(&tape);
    let x = rand_t(&[1, 3, 2, 4], 11);
    let y = point.forward(&tape, &b, tape.constant(x.clone())).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn pooling_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = adaptive_pool3d(&tape, x, [2, 1, 1]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 3.5]);
    let c = tape.constant(Tensor::from_f64(&[2, 5, 3, 3], &[0.25; 90]).unwrap());
    let y = adaptive_pool3d(&tape, c, [2, 3, 1]).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    assert!(adaptive_pool3d(&tape, c, [6, 1, 1]).is_err());
    assert!(adaptive_pool3d(&tape, c, [0, 1, 1]).is_err());
}

#[test]
fn init_rejects_nonpositive_dims() {
    assert!(init_params::<f64>(&[LayerSpec::linear("l", 0, 3)], 0).is_err());
}

/// Max relative error over the non-frozen parameters of `specs` (redrawn in
/// [-1, 1]) and `inputs`, against an output probe with |w| >= 0.5. Attention
/// key biases are frozen: their true gradient is identically zero.
fn block_error(
    specs: &[LayerSpec],
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    f: impl Fn(&Tape<f64>, &Bound, &[Var]) -> plus_core::Result<Var>,
) -> f64 {
    let mut ps: ParamSet<f64> = init_params(specs, seed).unwrap();
    for (i, t) in ps.tensors_mut().iter_mut().enumerate() {
        *t = rand_t(t.shape(), seed * 100 + i as u64);
    }
    let frozen: Vec<bool> = ps.names().iter().map(|n| n.ends_with(".k.bias")).collect();
    let mut checked: Vec<Tensor<f64>> = ps.tensors().iter().zip(&frozen).filter(|p| !*p.1).map(|p| p.0.clone()).collect();
    let free = checked.len();
    checked.extend(inputs);
    let r = grad_check(
        |tape, vars| {
            let mut next = vars[..free].iter();
            let all: Vec<Var> =
                ps.tensors().iter().zip(&frozen).map(|(t, &fz)| if fz { tape.constant(t.clone()) } else { *next.next().unwrap() }).collect();
            let b = ps.bind_vars(&all).map_err(|e| AdError::Contract(e.to_string()))?;
            let y = f(tape, &b, &vars[free..]).map_err(|e| AdError::Contract(e.to_string()))?;
            let w = rand_t(&tape.shape(y), seed ^ 0xabc).map(|v| v.signum() * (0.5 + 0.5 * v.abs()));
            tape.sum_all(tape.mul(y, tape.constant(w))?)
        },
        &checked,
        1e-5,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn every_block_passes_the_gradient_check() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 1..4u64 {
        let lin = Linear::new("l");
        worst.push(("linear", block_error(&[lin.spec(3, 2)], vec![rand_t(&[2, 3], seed)], seed, |t, p, x| lin.forward(t, p, x[0]))));
        let conv = Conv3d::new("c", 2, 1);
        worst.push((
            "conv3d",
            block_error(&[conv.spec(2, 3, 2)], vec![rand_t(&[2, 4, 4, 3], seed)], seed, |t, p, x| conv.forward(t, p, x[0])),
        ));
        worst.push((
            "pooling",
            block_error(&[], vec![rand_t(&[2, 5, 4, 3], seed)], seed, |t, _, x| Ok(adaptive_pool3d(t, x[0], [2, 3, 2])?)),
        ));
        let mha = MultiHeadAttention::new("a", AttentionConfig::new(4, 2).unwrap());
        worst.push((
            "mha",
            block_error(&mha.specs(), vec![rand_t(&[3, 4], seed), rand_t(&[2, 4], seed + 10)], seed, |t, p, x| {
                Ok(mha.forward(t, p, x[0], x[1])?.output)
            }),
        ));
    }
    for (name, err) in worst {
        assert!(err <= 1e-5, "{name}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(m in 1usize..5, n in 1usize..6, seed in 0u64..500) {
        let (mha, p) = frozen_attention(2, 4, seed);
        let (_, weights) = attend(&mha, &p, &rand_t(&[m, 4], seed + 1), &rand_t(&[n, 4], seed + 2));
        for w in &weights {
            for row in w.chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn output_ignores_key_order(n in 2usize..6, seed in 0u64..500, shift in 1usize..5) {
        let (mha, p) = frozen_attention(2, 4, seed);
        let q = rand_t(&[3, 4], seed + 3);
        let kv = rand_t(&[n, 4], seed + 4);
        let rows: Vec<&[f64]> = kv.data().chunks(4).collect();
        let rotated: Vec<f64> = (0..n).flat_map(|i| rows[(i + shift) % n].to_vec()).collect();
        let (a, _) = attend(&mha, &p, &q, &kv);
        let (b, _) = attend(&mha, &p, &q, &t(&[n, 4], &rotated));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn exact_pooling_keeps_the_mean(f in 1usize..4, g in 1usize..3, seed in 0u64..500) {
        let tape = Tape::<f64>::new();
        let x = rand_t(&[2, 2 * f, 3 * g, 2], seed);
        let y = adaptive_pool3d(&tape, tape.constant(x.clone()), [2, 3, 1]).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(x.data()) - mean(tape.value(y).data())).abs() <= 1e-12);
    }
}
