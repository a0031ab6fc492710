use super::{Tape, Tensor, Var};
use crate::error::{MerlinError, Result};

/// Pins a closure to the higher-ranked signature the checkers expect, so it
/// can be bound to a variable before use.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Numerical gradient of a scalar function by central differences.
pub fn central_difference<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe.clone());
        let out = f(&tape, v)?;
        Ok(out.value().item())
    };
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max over elements of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(MerlinError::Usage(format!("step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let leaf = tape.param(x);
    let loss = f(&tape, leaf)?;
    let analytic = tape.backward(loss)?.get_or_zeros(&leaf);
    let numeric = central_difference(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
