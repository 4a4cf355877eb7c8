use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst entry found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`; the maximum over
/// all entries of all `params` is reported.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, eps, 1e-12)
}

/// As [`grad_check`] with `floor` in place of `1e-12` in the denominator, so
/// entries smaller than `floor` are judged by absolute error `floor * tol`.
pub fn grad_check_with_floor<F>(f: F, params: &[Tensor<f64>], eps: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) || !(floor > 0.0) {
        return Err(Error::arg("grad_check", format!("eps and floor must be > 0, got {eps} and {floor}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    check_finite(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&t, &vs)?;
        check_finite(&t, out)?;
        t.value(out).item()
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?.data().to_vec();
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

fn check_finite(tape: &Tape<f64>, v: Var) -> Result<()> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            value.shape()
        )));
    }
    if !value.is_finite() {
        return Err(Error::Numeric { op: "grad_check" });
    }
    Ok(())
}
