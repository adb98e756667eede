use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar on an `f64` tape from the leaf it is handed. Returns
/// the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, step, &coords)
}

/// Same as [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.numel()) {
        return Err(Error::invalid(format!("coordinate {bad} out of range")));
    }
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let mut tape = Tape::<f64>::new();
    let leaf = tape.variable_values(x.shape(), base.clone())?;
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let leaf = tape.constant_values(x.shape(), values)?;
        let loss = f(&mut tape, leaf)?;
        Ok(tape.scalar(loss))
    };

    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = base.clone();
        plus[c] += step;
        let mut minus = base.clone();
        minus[c] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[c];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
