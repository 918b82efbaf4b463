use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// `max_i |a_i − n_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning the max relative error.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// 1×1 output node.
pub fn gradient_check<F>(f: F, x: &Matrix<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |x: &Matrix<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).get(0, 0);
        if !v.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).get(0, 0).is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_or_zeros(leaf, x.rows(), x.cols());

    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
