//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of `f` at `x` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
///
/// ```
/// use stgbgru::autodiff::{finite_difference_check, Tensor};
///
/// let x = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
/// let err = finite_difference_check(
///     |tape, x| {
///         // mean of squares against zero, scaled back up to a sum
///         let zero = tape.constant(Tensor::zeros(&[3]));
///         let m = tape.mse(x, zero)?;
///         tape.scale(m, 3.0)
///     },
///     &x,
///     1e-5,
/// )
/// .unwrap();
/// assert!(err < 1e-6);
/// ```
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
    )
}

/// Multi-input form of [`finite_difference_check`]: perturbs every
/// coordinate of every tensor in `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(&tape, v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function evaluated to {v}")));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
