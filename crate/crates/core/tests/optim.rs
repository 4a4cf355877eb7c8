use plus_autodiff::Tensor;
use plus_core::config::OptimConfig;
use plus_core::nn::ParamSet;
use plus_core::optim::{adamw_step, cosine_lr, AdamState};
use plus_core::PlusError;
use proptest::prelude::*;

fn scalar_params(v: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new(0);
    p.insert("w", Tensor::scalar(v)).unwrap();
    p
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    let mut p = ParamSet::new(0);
    p.insert("a", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
    p.insert("b", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap()).unwrap();
    let before = p.clone();
    let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
    let mut state = AdamState::new(&p);
    let grads: Vec<Tensor<f64>> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for _ in 0..3 {
        adamw_step(&mut p, &grads, &mut state, 1e-3, &cfg).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(state.step, 3);
}

#[test]
fn one_scalar_step_matches_the_hand_update() {
    let cfg = OptimConfig { weight_decay: 0.05, ..Default::default() };
    let (lr, g, w0) = (0.1, 0.5, 1.0);
    let mut p = scalar_params(w0);
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(g)], &mut state, lr, &cfg).unwrap();
    let m = (1.0 - cfg.beta1) * g;
    let v = (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1);
    let v_hat = v / (1.0 - cfg.beta2);
    let want = w0 * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);
    assert!((state.m[0].data()[0] - m).abs() < 1e-15);
    assert!((state.v[0].data()[0] - v).abs() < 1e-18);
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    // with zero gradient only the decay term moves the weight
    let cfg = OptimConfig { weight_decay: 0.05, ..Default::default() };
    let mut p = scalar_params(2.0);
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut state, 0.1, &cfg).unwrap();
    assert!((p.tensors()[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
}

#[test]
fn non_finite_gradients_abort_with_the_parameter_name() {
    let mut p = scalar_params(1.0);
    let before = p.clone();
    let mut state = AdamState::new(&p);
    for bad in [f64::NAN, f64::INFINITY] {
        let e = adamw_step(&mut p, &[Tensor::scalar(bad)], &mut state, 0.1, &OptimConfig::default()).unwrap_err();
        assert!(matches!(&e, PlusError::Numeric(msg) if msg.contains('w')), "{e}");
        assert_eq!(e.exit_code(), 4);
    }
    assert_eq!(p, before);
    assert_eq!(state.step, 0);
    assert!(adamw_step(&mut p, &[], &mut state, 0.1, &OptimConfig::default()).is_err());
}

#[test]
fn schedule_starts_at_the_base_rate() {
    let cfg = OptimConfig::default();
    assert_eq!(cfg.base_lr, 1e-4);
    assert_eq!(cfg.weight_decay, 0.05);
    assert_eq!(cosine_lr(0, 1000, cfg.base_lr, cfg.min_lr), 1e-4);
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(total in 1usize..500, a in 0usize..600, b in 0usize..600, min in 0.0f64..1e-5) {
        let (lo, hi) = (a.min(b), a.max(b));
        let base = 1e-4;
        let (x, y) = (cosine_lr(lo, total, base, min), cosine_lr(hi, total, base, min));
        prop_assert!(y <= x + 1e-18);
        prop_assert!(x <= base + 1e-18 && y >= min - 1e-18);
    }
}
