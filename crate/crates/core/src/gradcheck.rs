//! Central-difference verification of graph gradients.

use crate::error::{Result, SanError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Largest `|analytic − numeric| / max(1, |analytic| + |numeric|)` over the
/// coordinates of `x`, where `f` builds a scalar from the leaf it is given.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |input: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(input)?;
        let out = f(&mut g, leaf)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone())?;
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / f64::max(1.0, a.abs() + numeric.abs());
        if !err.is_finite() {
            return Err(SanError::NonFinite { op: "grad_check" });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, -0.7]).unwrap();
        let err = grad_check(|g, x| g.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // precomputed gradient deliberately off by a factor of two
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let v: f64 = g.value(x).data().iter().map(|a| a * a).sum();
                let grad = g.value(x).map(|a| 4.0 * a);
                g.precomputed_scalar(x, v, grad)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
