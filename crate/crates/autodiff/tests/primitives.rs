use plus_autodiff::{grad_check, grad_check_with_floor, Distribution, Error, Primitive, Tape, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::random(shape, seed, Distribution::Uniform { low: -1.0, high: 1.0 }).unwrap()
}

fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> plus_autodiff::Result<Var> {
    // contracts an arbitrary output against fixed random weights so every
    // output entry contributes a distinct sensitivity; |w| >= 0.5 keeps the
    // gradient entries well above central-difference rounding
    let shape = tape.shape(y);
    let w = tape.constant(rand_t(&shape, seed ^ 0x5eed).map(|v| v.signum() * (0.5 + 0.5 * v.abs())));
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(rand_t(&[2, 3], 1));
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), vec![2, 1]);
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    let d = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(tape.concat(&[a, d], 1), Err(Error::Shape { .. })));
    assert_eq!(tape.shape(tape.concat(&[a, d], 0).unwrap()), vec![5, 3]);
}

#[test]
fn log_of_zero_is_a_numeric_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(tape.log(x).unwrap_err(), Error::Numeric { op: "log" });
}

#[test]
fn softmax_stays_finite_for_large_logits() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[1000.0, 999.0, -1000.0]));
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y);
    assert!(v.is_finite());
    assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(rand_t(&[2, 3, 2], 3));
    let loss = tape.sum_all(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_square_at_three() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[1], &[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn unreachable_params_get_zero_and_constants_get_nothing() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let c = tape.constant(t(&[2], &[4.0, 5.0]));
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(unused).unwrap().data(), &[0.0; 3]);
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(x).unwrap().data(), &[4.0, 5.0]);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let other = Tape::<f64>::new();
    let y = other.param(t(&[1], &[1.0]));
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    assert!(matches!(tape.add(x, y), Err(Error::Contract(_))));
}

#[test]
fn softmax_log_pick_matches_finite_differences() {
    let x = rand_t(&[2, 5], 11).map(|v| 3.0 * v);
    let report = grad_check(
        |tape, p| {
            let s = tape.softmax(p[0], 1)?;
            let l = tape.log(s)?;
            let picked = tape.slice(l, 1, 2, 1)?;
            tape.sum_all(picked)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn grad_check_sum_of_squares_and_constant() {
    let x = rand_t(&[3, 4], 5);
    let report = grad_check(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            tape.sum_all(sq)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");

    let report = grad_check(
        |tape, _| Ok(tape.constant(Tensor::scalar(2.5))),
        &[x],
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn reduce_max_routes_to_first_maximum() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2, 3], &[1.0, 4.0, 4.0, 2.0, 2.0, 0.0]));
    let m = tape.max(x, 1).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0, 2.0]);
    let loss = tape.sum_all(m).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn apply_dispatches_and_checks_arity() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.apply(&Primitive::Transpose, &[a]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    assert!(tape.apply(&Primitive::MatMul, &[a]).is_err());
    let s = tape.apply(&Primitive::Sum { axis: 0 }, &[a]).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
}

#[test]
fn scalar_broadcast_only() {
    let tape = Tape::<f64>::new();
    let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.param(Tensor::scalar(2.0));
    let y = tape.mul(a, s).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(s).unwrap().data(), &[10.0]);
    let row = tape.constant(t(&[2], &[1.0, 1.0]));
    assert!(tape.add(a, row).is_err());
}

#[test]
fn conv_pool_crop_hand_cases() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv3d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), vec![1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[8.0]);

    let ramp = tape.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.adaptive_pool3d(ramp, [2, 1, 1]).unwrap();
    assert_eq!(tape.value(p).data(), &[1.5, 3.5]);

    let vol = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.crop3d(vol, [-1, 0, 0], [2, 2, 1]).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn tape_replay_is_bit_identical() {
    fn run() -> Vec<u64> {
        let tape = Tape::<f64>::new();
        let x = tape.param(rand_t(&[3, 4], 42));
        let w = tape.param(rand_t(&[4, 2], 43));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax(h, 1).unwrap();
        let l = tape.log(s).unwrap();
        let loss = tape.sum_all(l).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut bits: Vec<u64> = tape.value(loss).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(g.wrt(w).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    }
    assert_eq!(run(), run());
}

fn flat(t: &Tape<f64>, s: Var) -> plus_autodiff::Result<Var> {
    let n = t.value(s).numel();
    t.reshape(s, &[n])
}

fn exp_then_log(t: &Tape<f64>, x: Var) -> plus_autodiff::Result<Var> {
    let e = t.exp(x)?;
    t.log(e)
}

// Random shapes with rank 1..=4 and extents 1..=3.
fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=3, 1..=4)
}

/// Softmax gradients can cancel to near zero for any probe, so over random
/// shapes entries below 1e-4 are held to an absolute 1e-10 instead.
fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&Tape<f64>, Var) -> plus_autodiff::Result<Var>) -> f64 {
    let x = rand_t(shape, seed);
    grad_check_with_floor(
        |tape, p| {
            let y = build(tape, p[0])?;
            weighted_sum(tape, y, seed)
        },
        &[x],
        1e-5,
        1e-4,
    )
    .unwrap()
    .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_slices_sum_to_one(shape in shape_strategy(), seed in 0u64..1000, axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand_t(&shape, seed).map(|v| 10.0 * v));
        let y = tape.softmax(x, axis).unwrap();
        let s = tape.sum(y, axis).unwrap();
        let v = tape.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        for &total in tape.value(s).data() {
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn unary_and_reduction_gradients(shape in shape_strategy(), seed in 0u64..1000, axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let tol = 1e-6;
        let mut rev: Vec<usize> = (0..shape.len()).collect();
        rev.reverse();
        let n: usize = shape.iter().product();
        let len = shape[axis];
        let errs = [
            ("exp", check_unary(&shape, seed, |t, x| t.exp(x))),
            ("log", check_unary(&shape, seed, exp_then_log)),
            ("scale", check_unary(&shape, seed, |t, x| t.scale(x, -1.7))),
            ("sigmoid", check_unary(&shape, seed, |t, x| t.sigmoid(x))),
            ("softmax", check_unary(&shape, seed, |t, x| t.softmax(x, axis))),
            ("sum", check_unary(&shape, seed, |t, x| t.sum(x, axis).and_then(|s| flat(t, s)))),
            ("mean", check_unary(&shape, seed, |t, x| t.mean(x, axis).and_then(|s| flat(t, s)))),
            ("max", check_unary(&shape, seed, |t, x| t.max(x, axis).and_then(|s| flat(t, s)))),
            ("permute", check_unary(&shape, seed, |t, x| t.permute(x, &rev))),
            ("reshape", check_unary(&shape, seed, |t, x| t.reshape(x, &[n]))),
            ("slice", check_unary(&shape, seed, |t, x| t.slice(x, axis, len - 1, 1))),
        ];
        for (name, err) in errs {
            prop_assert!(err <= tol, "{} rel error {}", name, err);
        }
    }

    #[test]
    fn relu_gradient_away_from_kink(shape in shape_strategy(), seed in 0u64..1000) {
        // push entries away from zero so the central difference never straddles the kink
        let x = rand_t(&shape, seed).map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        let r = grad_check(|t, p| { let y = t.relu(p[0])?; weighted_sum(t, y, seed) }, &[x], 1e-5).unwrap();
        prop_assert!(r.max_rel_error <= 1e-6);
    }

    #[test]
    fn binary_gradients(shape in shape_strategy(), seed in 0u64..1000, axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let a = rand_t(&shape, seed);
        let b = rand_t(&shape, seed + 1);
        for kind in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
            let r = grad_check(|t, p| { let y = t.apply(&kind, &[p[0], p[1]])?; weighted_sum(t, y, seed) }, &[a.clone(), b.clone()], 1e-5).unwrap();
            prop_assert!(r.max_rel_error <= 1e-6, "{:?} {:?}", kind, r);
        }
        let r = grad_check(|t, p| { let y = t.concat(&[p[0], p[1]], axis)?; weighted_sum(t, y, seed) }, &[a.clone(), b.clone()], 1e-5).unwrap();
        prop_assert!(r.max_rel_error <= 1e-6);
        let s = rand_t(&[1], seed + 2);
        let r = grad_check(|t, p| { let y = t.mul(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a, s], 1e-5).unwrap();
        prop_assert!(r.max_rel_error <= 1e-6);
    }

    #[test]
    fn matmul_gradient(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[k, n], seed + 1);
        let r = grad_check(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a, b], 1e-5).unwrap();
        prop_assert!(r.max_rel_error <= 1e-6, "{:?}", r);
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x0 = rand_t(&[3, 3], seed);
        let grad_of = |ca: f64, cb: f64| {
            let tape = Tape::<f64>::new();
            let x = tape.param(x0.clone());
            let f = { let e = tape.exp(x).unwrap(); tape.sum_all(e).unwrap() };
            let g = { let s = tape.softmax(x, 1).unwrap(); let sq = tape.mul(s, s).unwrap(); tape.sum_all(sq).unwrap() };
            let fa = tape.scale(f, ca).unwrap();
            let gb = tape.scale(g, cb).unwrap();
            let total = tape.add(fa, gb).unwrap();
            tape.backward(total).unwrap().wrt(x).unwrap().clone()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..9 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-9);
        }
    }
}

#[test]
fn volume_primitive_gradients() {
    let x = rand_t(&[2, 4, 3, 3], 1);
    let w = rand_t(&[3, 2, 2, 2, 2], 2);
    let b = rand_t(&[3], 3);
    for (stride, pad) in [(1, 0), (2, 0), (1, 1), (2, 1)] {
        let r = grad_check(
            |t, p| {
                let y = t.conv3d(p[0], p[1], p[2], stride, pad)?;
                weighted_sum(t, y, 9)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "stride {stride} pad {pad}: {r:?}");
    }
    let w1 = rand_t(&[3, 2, 1, 1, 1], 4);
    let r = grad_check(
        |t, p| {
            let y = t.conv3d(p[0], p[1], p[2], 1, 0)?;
            weighted_sum(t, y, 9)
        },
        &[x.clone(), w1, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");

    let r = grad_check(
        |t, p| {
            let y = t.adaptive_pool3d(p[0], [3, 2, 1])?;
            weighted_sum(t, y, 5)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");

    let v = rand_t(&[4, 3, 2], 6);
    let r = grad_check(
        |t, p| {
            let y = t.crop3d(p[0], [-1, 1, 0], [3, 3, 2])?;
            weighted_sum(t, y, 5)
        },
        &[v],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn layer_norm_and_broadcast_gradients() {
    let x = rand_t(&[3, 5], 1);
    let g = rand_t(&[5], 2);
    let b = rand_t(&[5], 3);
    let r = grad_check(
        |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            weighted_sum(t, y, 4)
        },
        &[x, g, b.clone()],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
    let r = grad_check(
        |t, p| {
            let y = t.broadcast_rows(p[0], 4)?;
            weighted_sum(t, y, 4)
        },
        &[b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn f32_tape_runs_the_same_primitives() {
    let tape = Tape::<f32>::new();
    let a = tape.param(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[17.0f32, 39.0]);
    let loss = tape.sum_all(c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[5.0f32, 6.0, 5.0, 6.0]);
}
