use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h`, returning
/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
///
/// `f` builds a scalar loss from a fresh graph and the tracked input; it is
/// called `2·len(x) + 1` times and must be deterministic (seed any dropout
/// inside the closure).
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(
            "finite_difference_check",
            format!("step {h} outside [1e-6, 1e-3]"),
        ));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.get_or_zeros(xv, x.len());

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let loss = f(&mut g, v)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
