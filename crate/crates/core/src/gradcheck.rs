//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for float64 central differences.
pub const FD_STEP: f64 = 1e-6;

/// Evaluates `f` once on a tape (analytic gradient) and `2 * len(x)` times
/// with perturbed inputs, returning the largest
/// `|analytic - numeric| / max(1, |analytic|)` over coordinates.
///
/// `f` must build a scalar from the leaf it is handed and must be
/// deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_coords(f, x, step, 0..x.len())
}

/// As [`finite_diff_check`] but only probes the listed coordinates.
pub fn finite_diff_check_coords<F, I>(f: F, x: &Tensor, step: f64, coords: I) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    I: IntoIterator<Item = usize>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(leaf, x);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    for i in coords {
        let mut up = x.clone();
        up.data_mut()[i] += step;
        let mut down = x.clone();
        down.data_mut()[i] -= step;
        let numeric = (eval(up)? - eval(down)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(|t, v| t.sum(v), &x, FD_STEP).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn exp_at_zero() {
        let h = FD_STEP;
        let numeric = (h.exp() - (-h).exp()) / (2.0 * h);
        assert!((numeric - 1.0).abs() < 1e-9);
        let x = Tensor::vector(vec![0.0]);
        let err = finite_diff_check(
            |t, v| {
                let e = t.exp(v)?;
                t.sum(e)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp_max has zero gradient above the cap; probing exactly at the
        // cap sees a one-sided slope, which the checker must report.
        let x = Tensor::vector(vec![1.0]);
        let err = finite_diff_check(
            |t, v| {
                let c = t.clamp_max(v, 1.0)?;
                t.sum(c)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
