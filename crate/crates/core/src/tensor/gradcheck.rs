use super::{Tape, Tensor, Var};
use crate::error::{MomeError, Result};

/// Compare the tape gradient of a scalar function against central
/// differences. Returns `max_i |a_i − c_i| / (|a_i| + |c_i| + 1e−12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(MomeError::invalid(format!("grad_check step {h} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape())).into_data();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        t.value(out).item()
    };

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let c = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - c).abs() / (a.abs() + c.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
