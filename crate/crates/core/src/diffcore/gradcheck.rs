use super::graph::{Graph, Var};
use super::tensor::DiffTensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh graph and the input leaf and must return a scalar
/// node. Returns `max |analytic − numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
pub fn gradient_check<F>(f: F, x: &DiffTensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad(leaf).to_vec();

    let eval = |values: &DiffTensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(values.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
