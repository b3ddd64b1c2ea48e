//! Central finite-difference gradient verification.

use super::{Tape, Tensor, Value};
use crate::{Error, Result};

/// Fixed quasi-random cotangent weight for output element `i`. Reducing the
/// output with these weights instead of a plain sum keeps gradients generic:
/// a plain sum hits structural cancellations (layer norm output sums are
/// shift-invariant, softmax rows sum to one) whose true gradient is ~0, where
/// a relative error metric measures only noise.
fn cotangent(i: usize) -> f32 {
    0.5 + ((i as u32).wrapping_mul(2654435761) >> 22) as f32 / 1024.0
}

/// Compare tape gradients against central finite differences.
///
/// `f` builds a tensor-valued function of a leaf on a fresh tape; the checked
/// scalar is a fixed weighting of its output elements. The analytic side runs
/// backward through the tape. The numeric side re-evaluates `f` at
/// `x[i] +- h` and reduces the f32 outputs in f64, dividing by the actual
/// difference of the perturbed f32 inputs — the only places f64 is used.
/// Forward compute stays f32.
///
/// Returns the maximum over elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// The step must lie in `[1e-4, 1e-2]`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: for<'a> Fn(&'a Tape, Value<'a>) -> Result<Value<'a>>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Invalid(format!(
            "grad_check step {h} outside [1e-4, 1e-2]"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x)?;
        let y = f(&tape, xv)?;
        let w = tape.leaf(&Tensor::from_fn(&y.shape(), cotangent))?;
        let loss = y.mul(w)?.sum_all()?;
        tape.backward(loss)?.dense(xv)
    };

    let eval = |data: &[f32]| -> Result<f64> {
        let t = Tensor::from_vec(x.shape(), data.to_vec())?;
        let tape = Tape::new();
        let xv = tape.leaf(&t)?;
        let y = f(&tape, xv)?;
        let out = tape.tensor(y);
        Ok(out
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 * cotangent(i) as f64)
            .sum())
    };

    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let x_up = probe[i] as f64;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let x_down = probe[i] as f64;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (x_up - x_down);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst as f32)
}
