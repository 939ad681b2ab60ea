//! Central finite differences, the independent oracle for every analytic
//! gradient on the tape.

use super::{ParamVisitor, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`max_relative_error`]; keeps entries whose true
/// gradient is essentially zero from dominating the comparison.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Estimate `∂f/∂p` elementwise as `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h`.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::from_parts(at.shape().to_vec(), grad)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compare tape gradients of a scalar-valued graph against central
/// differences for every input. Returns the worst relative error.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut t, &vs).expect("graph rebuild failed during finite differences");
                t.scalar(l)
            },
            input,
            h,
        );
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Gradient check over every trainable parameter of `model` that `build`
/// binds on its tape. Numeric derivatives perturb a clone of the model.
/// Returns the worst relative error and the names checked. Every trainable
/// parameter bound by `build` must belong to `model`.
pub fn check_param_gradients<M: ParamVisitor + Clone>(
    model: &M,
    h: f64,
    build: impl Fn(&mut Tape, &M) -> Result<Var>,
) -> Result<(f64, Vec<String>)> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, model)?;
    let grads = tape.backward(loss)?;
    let owned = model.param_names();
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for (name, var) in tape.bindings() {
        if !owned.contains(name) {
            return Err(Error::Contract(format!(
                "gradient check: trainable `{name}` is not part of the checked model"
            )));
        }
        let numel = tape.value(*var).numel();
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let at = tape.value(*var).clone();
        let numeric = finite_diff_gradient(
            |probe| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |p| {
                    if &p.name == name {
                        p.tensor = probe.clone();
                    }
                });
                let mut t = Tape::new();
                let l = build(&mut t, &m).expect("graph rebuild failed during finite differences");
                t.scalar(l)
            },
            &at,
            h,
        );
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
        names.push(name.clone());
    }
    Ok((worst, names))
}
