//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` builds a scalar function of one tensor on a fresh `f64` tape.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// [`grad_check`] over several input tensors. Coordinates are numbered
/// consecutively across the inputs in order.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut inputs = points.to_vec();
    let mut worst = 0.0f64;
    let mut coordinate = 0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..points[which].len() {
            let original = points[which].data()[j];
            let mut probe = |offset: f64| -> Result<f64> {
                inputs[which].data_mut()[j] = original + offset;
                let v = evaluate(&inputs)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteEvaluation { coordinate, offset });
                }
                Ok(v)
            };
            let plus = probe(epsilon)?;
            let minus = probe(-epsilon)?;
            inputs[which].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
            coordinate += 1;
        }
    }
    Ok(worst)
}
