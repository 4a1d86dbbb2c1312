use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Symmetric relative error, safe when both values are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`, returning the worst
/// [`relative_error`].
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar node.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {eps}")));
    }
    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point);
        let out = f(&mut tape, leaf)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(leaf);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let base = x.data()[i].to_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64(base - eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i].to_f64(), numeric));
    }
    Ok(worst)
}

fn scalar_of<T: Real>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if !value.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item().to_f64())
}
