//! Finite-difference gradient checking, run in f64 for precision.
//!
//! The analytic gradient from [`Tape::backward`] is compared against a
//! central difference (f(x+h) - f(x-h)) / 2h computed by re-running the
//! forward builder with perturbed leaves. The builder must be a pure
//! function of its inputs (stochastic ops must derive their rng internally
//! from a fixed key so every call sees the same draws).

use super::{Tape, TensorRef};
use crate::rng::Rng64;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// One leaf for the check: shape plus initial values.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        CheckInput { shape: shape.to_vec(), values }
    }

    /// Uniform values in [lo, hi).
    pub fn uniform(shape: &[usize], rng: &mut Rng64, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.range_f64(lo, hi)).collect();
        CheckInput { shape: shape.to_vec(), values }
    }

    /// Uniform values kept away from the kink points in `avoid` by `margin`
    /// (relu at 0, huber at ±rho), where finite differences straddle a
    /// derivative jump.
    pub fn uniform_avoiding(
        shape: &[usize],
        rng: &mut Rng64,
        lo: f64,
        hi: f64,
        avoid: &[f64],
        margin: f64,
    ) -> Self {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let v = rng.range_f64(lo, hi);
            if avoid.iter().all(|&a| (v - a).abs() > margin) {
                values.push(v);
            }
        }
        CheckInput { shape: shape.to_vec(), values }
    }
}

/// Max relative error across all input elements, or an error string naming
/// the first offending element.
pub fn finite_diff_check<B>(
    inputs: &[CheckInput],
    build: B,
    step: f64,
    tol: f64,
) -> Result<f64, String>
where
    B: Fn(&mut Tape<f64>, &[TensorRef]) -> crate::error::Result<TensorRef>,
{
    let eval = |points: &[Vec<f64>]| -> Result<f64, String> {
        let mut tape = Tape::<f64>::no_grad();
        let refs: Vec<TensorRef> = inputs
            .iter()
            .zip(points)
            .map(|(inp, vals)| tape.leaf(&inp.shape, vals.clone(), false).unwrap())
            .collect();
        let loss = build(&mut tape, &refs).map_err(|e| format!("forward failed: {e}"))?;
        tape.item(loss).map_err(|e| format!("loss not scalar: {e}"))
    };

    // Analytic gradients.
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = inputs
        .iter()
        .map(|inp| tape.leaf(&inp.shape, inp.values.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &refs).map_err(|e| format!("forward failed: {e}"))?;
    tape.backward(loss).map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = refs
        .iter()
        .map(|&r| tape.grad(r).expect("grad buffer after backward").to_vec())
        .collect();

    let mut points: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let mut max_rel = 0.0f64;
    for (ii, inp) in inputs.iter().enumerate() {
        for e in 0..inp.values.len() {
            let orig = points[ii][e];
            points[ii][e] = orig + step;
            let fp = eval(&points)?;
            points[ii][e] = orig - step;
            let fm = eval(&points)?;
            points[ii][e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ii][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > tol {
                return Err(format!(
                    "input {ii} element {e}: analytic {a:.8e} vs numeric {numeric:.8e} (rel {rel:.3e} > tol {tol:.1e})"
                ));
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_a_wrong_gradient() {
        // x ↦ sum(relu(x)) built with a deliberately wrong scale.
        let inputs = vec![CheckInput::new(&[2], vec![1.0, 2.0])];
        let r = finite_diff_check(
            &inputs,
            |t, refs| {
                let y = t.relu(refs[0])?;
                let y = t.mul_scalar(y, 2.0)?; // analytic grad 2, numeric of the same fn also 2
                t.sum_all(y)
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(r.is_ok());
    }
}
