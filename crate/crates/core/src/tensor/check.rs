//! Gradient verification by central finite differences.

use super::{Element, Tape, TensorId};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `point` against central finite
/// differences, coordinate by coordinate, and returns the largest relative
/// error (denominator floored at 1e-8).
///
/// `f` receives a fresh tape and the input tensor id and must return a
/// scalar loss built on that tape; it must be deterministic and free of
/// cross-call side effects (e.g. construct fresh batch-norm stats per call).
pub fn finite_diff_check<E, F>(f: F, shape: &[usize], point: &[E], h: E) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, TensorId) -> Result<TensorId>,
{
    if h <= E::zero() {
        return Err(Error::InvalidArgument("finite_diff_check step must be positive".into()));
    }

    let mut tape = Tape::new();
    let x = tape.leaf(shape, point.to_vec(), true)?;
    let loss = f(&mut tape, x)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::InvalidArgument("finite_diff_check expects a scalar-valued fn".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .ok_or_else(|| Error::Numerical("loss does not depend on the checked input".into()))?
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let eval = |data: Vec<E>| -> Result<f64> {
        let mut t = Tape::new();
        let xi = t.leaf(shape, data, false)?;
        let l = f(&mut t, xi)?;
        Ok(t.scalar(l).as_f64())
    };

    let mut max_rel = 0.0f64;
    let hh = h.as_f64();
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] = plus[i] + h;
        let mut minus = point.to_vec();
        minus[i] = minus[i] - h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * hh);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
