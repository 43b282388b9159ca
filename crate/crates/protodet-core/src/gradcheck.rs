//! Central-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares analytic gradients of `f` at `point` with central differences.
///
/// `f` records a scalar-valued computation on a fresh tape from one leaf per
/// input tensor. Returns the maximum over all input coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(point: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| {
                let t = if grad { t.clone().with_grad() } else { t.clone() };
                tape.leaf(&t)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.get(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, Some(grads)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in point.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][k];
            let rel = math::abs(a - numeric) / f64::max(1.0, math::abs(a));
            if !rel.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
