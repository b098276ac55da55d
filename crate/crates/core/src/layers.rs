//! Thin layer wrappers: named parameters plus a graph-forward method.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_conv1x1, init_conv3x3, uniform_tensor, Graph, ParamId, ParamStore, Tensor, TensorId};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv1x1Layer {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1Layer {
    pub fn random(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_conv1x1(c_in, c_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv1x1Layer { w, b, c_in, c_out }
    }

    /// All-zero weights and bias; residual up-projections start here so a
    /// freshly fused model reproduces the camera-only forward exactly.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[c_out, c_in]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv1x1Layer { w, b, c_in, c_out }
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1x1(x, w, Some(b))
    }

    pub fn weight_count(&self) -> usize {
        self.c_in * self.c_out
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3Layer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv3x3Layer {
    pub fn random(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_conv3x3(c_in, c_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv3x3Layer { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv3x3(x, w, b, self.stride)
    }
}

/// Dense map of a pooled vector, w: [rows, cols].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: ParamId,
    pub rows: usize,
    pub cols: usize,
}

impl DenseLayer {
    pub fn random(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (1.0 / cols as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(&[rows, cols], limit, rng));
        DenseLayer { w, rows, cols }
    }

    pub fn forward(&self, g: &mut Graph, v: TensorId) -> Result<TensorId> {
        let w = g.param(self.w);
        g.matvec(w, v, None)
    }
}
