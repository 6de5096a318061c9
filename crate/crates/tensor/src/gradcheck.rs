use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.shape(), point.data().to_vec(), true)?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.input(point.shape(), data, false)?;
        let y = f(&mut t, x)?;
        Ok(t.item(y))
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
