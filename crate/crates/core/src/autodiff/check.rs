use super::tape::{Tape, Var};
use super::tensor::{DType, Tensor};
use crate::error::{bail, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate, over every input.
///
/// Returns `max |analytic - numeric| / max(floor, |analytic| + |numeric|)`
/// where `floor = 1e-5 * max(1, |f(x)|)`, roughly the magnitude below which a
/// difference quotient at `eps = 1e-6` keeps fewer than four significant digits.
/// Evaluation is always in `f64`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(DType::F64);
        let vars = ins.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            bail!(Usage, "grad_check needs a scalar-valued function");
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(DType::F64);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(&t.to_dtype(DType::F64)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let floor = 1e-5 * tape.value(out).item().abs().max(1.0);

    let mut work: Vec<Tensor> = inputs.iter().map(|t| t.to_dtype(DType::F64)).collect();
    let mut worst: f64 = 0.0;
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for k in 0..work[idx].numel() {
            let orig = work[idx].data()[k];
            // Perturb by exactly representable offsets.
            let (hi, lo) = (orig + eps, orig - eps);
            work[idx].data_mut()[k] = hi;
            let plus = eval(&work)?;
            work[idx].data_mut()[k] = lo;
            let minus = eval(&work)?;
            work[idx].data_mut()[k] = orig;
            let numeric = (plus - minus) / (hi - lo);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
