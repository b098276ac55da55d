//! Central-difference verification of recorded gradients.

use super::graph::{Graph, TensorId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Builds `f` twice per element to estimate the gradient numerically and
/// compares against one reverse sweep. Returns the worst relative error
/// max(|g_fd - g_an|) / max(1, |g_fd|, |g_an|) over all elements of `x`.
///
/// `f` must be deterministic: it is re-invoked many times on perturbed
/// copies of `x` and must build the same computation each time.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite_diff_check: h must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let xid = g.leaf(x, true);
    let root = f(&mut g, xid)?;
    if g.value(root).numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check: f must produce a scalar, got shape {:?}",
            g.value(root).shape()
        )));
    }
    if !g.scalar_value(root).is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    g.backward(root)?;
    let analytic: Vec<f64> = match g.grad(xid) {
        Some(grad) => grad.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)] // probe is mutated in place by index
    for i in 0..x.numel() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = original - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = original;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = 1.0f64.max(numeric.abs()).max(analytic[i].abs());
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    let mut g = Graph::inference();
    let xid = g.leaf(x, false);
    let root = f(&mut g, xid)?;
    let v = g.scalar_value(root);
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}
