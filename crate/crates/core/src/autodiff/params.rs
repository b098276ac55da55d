//! Named parameter storage shared by all layers, plus the SGD optimizer.
//!
//! Layers hold `ParamId`s into a `ParamStore`; each forward pass binds the
//! whole store into a fresh [`Graph`], so the same weights can be replayed
//! across steps while the tape stays per-pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, TensorId};
use super::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        let id = ParamId(self.entries.len());
        self.entries.push((name.into(), tensor));
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g` and installs the
    /// id table used by `Graph::param`.
    pub fn bind(&self, g: &mut Graph) {
        let ids: Vec<TensorId> = self.entries.iter().map(|(_, t)| g.leaf(t, true)).collect();
        g.set_bound(ids);
    }

    /// Same as [`bind`](Self::bind) but no gradients flow (evaluation).
    pub fn bind_frozen(&self, g: &mut Graph) {
        let ids: Vec<TensorId> = self.entries.iter().map(|(_, t)| g.leaf(t, false)).collect();
        g.set_bound(ids);
    }

    /// Binds the store with one parameter substituted by an existing graph
    /// value; used by gradient checks that differentiate with respect to a
    /// single weight tensor.
    pub fn bind_with_override(&self, g: &mut Graph, target: ParamId, replacement: TensorId) {
        let ids: Vec<TensorId> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, t))| if i == target.0 { replacement } else { g.leaf(t, false) })
            .collect();
        g.set_bound(ids);
    }
}

impl Graph {
    /// Graph-local id of a bound parameter.
    pub fn param(&self, id: ParamId) -> TensorId {
        self.bound_id(id.0)
    }
}

/// U(-limit, limit) init.
pub fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Fan-in scaled init for a [C_out, C_in] channel-mixing kernel.
pub fn init_conv1x1(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform_tensor(&[c_out, c_in], (1.0 / c_in as f64).sqrt(), rng)
}

/// Fan-in scaled init for a [C_out, C_in, 3, 3] kernel.
pub fn init_conv3x3(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform_tensor(&[c_out, c_in, 3, 3], (1.0 / (9 * c_in) as f64).sqrt(), rng)
}

/// Plain SGD with momentum and global-norm gradient clipping.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    clip_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, clip_norm: f64) -> Self {
        let velocity = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Sgd { lr, momentum, clip_norm, velocity }
    }

    /// Applies one update from the gradients held by a back-propagated
    /// graph. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph) -> Result<f64> {
        let mut sq = 0.0;
        for pid in store.ids() {
            if let Some(grad) = g.grad(g.param(pid)) {
                sq += grad.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for pid in store.ids() {
            let gid = g.param(pid);
            if let Some(grad) = g.grad(gid) {
                let grad = grad.to_vec();
                let vel = &mut self.velocity[pid.0];
                let w = store.get_mut(pid).data_mut();
                for ((v, gr), wv) in vel.iter_mut().zip(grad).zip(w.iter_mut()) {
                    *v = self.momentum * *v + scale * gr;
                    *wv -= self.lr * *v;
                }
            } else {
                // unreached parameter this step: momentum keeps coasting
                let vel = &mut self.velocity[pid.0];
                let w = store.get_mut(pid).data_mut();
                for (v, wv) in vel.iter_mut().zip(w.iter_mut()) {
                    *v *= self.momentum;
                    *wv -= self.lr * *v;
                }
            }
        }
        Ok(norm)
    }
}
