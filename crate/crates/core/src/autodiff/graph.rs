//! Recorded-operation graph (Wengert tape) over [`Tensor`] values.
//!
//! A `Graph` owns every value produced during one forward pass in an arena;
//! operations append nodes in execution order, so the node list is
//! topologically sorted by construction. `backward` replays the list in
//! reverse once, then the graph refuses further use.

use std::sync::Arc;

use super::kernels::{self, BilinearTap};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value in a graph's arena. Only meaningful for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Conv1x1 { x: TensorId, w: TensorId, b: Option<TensorId> },
    Conv3x3 { x: TensorId, w: TensorId, b: TensorId, stride: usize },
    ResizeBilinear { x: TensorId },
    EdgePad { x: TensorId },
    GlobalAvgPool { x: TensorId },
    MatVec { w: TensorId, v: TensorId, b: Option<TensorId> },
    ChannelScale { x: TensorId, s: TensorId },
    GatherBilinear { x: TensorId, taps: Arc<Vec<Option<BilinearTap>>> },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Concat { xs: Vec<TensorId>, axis: usize },
    Slice0 { x: TensorId, index: usize },
    Stack0 { xs: Vec<TensorId> },
    Sum { x: TensorId },
    FocalLoss { logits: TensorId, target: Arc<Tensor>, alpha: f64, beta: f64 },
    MaskedL1 { pred: TensorId, target: Arc<Tensor>, mask: Arc<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: TensorId,
    name: &'static str,
}

/// Tape-based reverse-mode graph. Confined to one execution context; never
/// share an in-progress graph across threads.
pub struct Graph {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    bound: Vec<TensorId>,
    recording: bool,
    consumed: bool,
    validate: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph: nodes are kept whenever an input requires gradients.
    pub fn new() -> Self {
        Graph { vals: Vec::new(), nodes: Vec::new(), bound: Vec::new(), recording: true, consumed: false, validate: false }
    }

    /// Forward-only graph: values are computed, nothing is recorded and
    /// `backward` is unavailable.
    pub fn inference() -> Self {
        Graph { recording: false, ..Self::new() }
    }

    /// When on, every operation's output is scanned and the first non-finite
    /// value aborts with the operation's name.
    pub fn set_validate(&mut self, on: bool) {
        self.validate = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers an external tensor as a leaf, cloning its contents.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        let mut v = t.clone();
        v.clear_grad();
        v.set_requires_grad(requires_grad && self.recording);
        self.push_val(v)
    }

    /// Registers a constant (no gradient ever flows into it).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut v = t;
        v.clear_grad();
        v.set_requires_grad(false);
        self.push_val(v)
    }

    /// Installs the id table for a bound parameter store; see
    /// [`super::params::ParamStore::bind`].
    pub(crate) fn set_bound(&mut self, ids: Vec<TensorId>) {
        self.bound = ids;
    }

    pub(crate) fn bound_id(&self, index: usize) -> TensorId {
        self.bound[index]
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Scalar convenience for loss nodes.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.vals[id.0].data()[0]
    }

    /// Gradient of the given value after `backward`, if one was produced.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.vals[id.0].grad()
    }

    fn push_val(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.vals.len());
        self.vals.push(t);
        id
    }

    fn wants_grad(&self, ids: &[TensorId]) -> bool {
        self.recording && ids.iter().any(|id| self.vals[id.0].requires_grad())
    }

    fn guard_usable(&self, op: &'static str) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(format!("{op}: graph already consumed by backward")));
        }
        Ok(())
    }

    fn finish(&mut self, name: &'static str, op: Op, inputs: &[TensorId], mut out: Tensor) -> Result<TensorId> {
        if self.validate && !out.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.wants_grad(inputs);
        out.set_requires_grad(rg);
        let id = self.push_val(out);
        if rg {
            self.nodes.push(Node { op, out: id, name });
        }
        Ok(id)
    }

    // ---- shape helpers -------------------------------------------------

    fn chw(&self, op: &'static str, id: TensorId) -> Result<(usize, usize, usize)> {
        match self.vals[id.0].shape() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::shape(op, other, "[C, H, W]")),
        }
    }

    // ---- operations ----------------------------------------------------

    /// Channel-mixing 1x1 convolution: w is [C_out, C_in], b is [C_out].
    pub fn conv1x1(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        self.guard_usable("conv1x1")?;
        let (c_in, h, wd) = self.chw("conv1x1", x)?;
        let (c_out, wc_in) = match self.vals[w.0].shape() {
            [o, i] => (*o, *i),
            other => return Err(Error::shape("conv1x1", other, "[C_out, C_in]")),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1x1", self.vals[w.0].shape(), self.vals[x.0].shape()));
        }
        if let Some(b) = b {
            if self.vals[b.0].shape() != [c_out] {
                return Err(Error::shape("conv1x1", self.vals[b.0].shape(), [c_out]));
            }
        }
        let zero_bias = vec![0.0; c_out];
        let bias = b.map_or(&zero_bias[..], |b| self.vals[b.0].data());
        let data = kernels::conv1x1_fwd(self.vals[x.0].data(), c_in, h * wd, self.vals[w.0].data(), bias, c_out);
        let out = Tensor::new(&[c_out, h, wd], data)?;
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.finish("conv1x1", Op::Conv1x1 { x, w, b }, &inputs, out)
    }

    /// 3x3 cross-correlation with fixed padding 1. Stride must be 1 or 2.
    pub fn conv3x3(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize) -> Result<TensorId> {
        self.guard_usable("conv3x3")?;
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv3x3 stride must be 1 or 2, got {stride}")));
        }
        let (c_in, h, wd) = self.chw("conv3x3", x)?;
        if h < 3 || wd < 3 {
            return Err(Error::shape("conv3x3", self.vals[x.0].shape(), "[C, >=3, >=3]"));
        }
        let c_out = match self.vals[w.0].shape() {
            [o, i, 3, 3] if *i == c_in => *o,
            other => return Err(Error::shape("conv3x3", other, [0, c_in, 3, 3])),
        };
        if self.vals[b.0].shape() != [c_out] {
            return Err(Error::shape("conv3x3", self.vals[b.0].shape(), [c_out]));
        }
        let oh = kernels::conv3x3_out_extent(h, stride);
        let ow = kernels::conv3x3_out_extent(wd, stride);
        let data = kernels::conv3x3_fwd(
            self.vals[x.0].data(),
            c_in,
            h,
            wd,
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            c_out,
            stride,
        );
        let out = Tensor::new(&[c_out, oh, ow], data)?;
        self.finish("conv3x3", Op::Conv3x3 { x, w, b, stride }, &[x, w, b], out)
    }

    /// Align-corners=false bilinear resize to (out_h, out_w).
    pub fn resize_bilinear(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        self.guard_usable("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("resize_bilinear: output extents must be >= 1".into()));
        }
        let (c, h, w) = self.chw("resize_bilinear", x)?;
        if (h, w) == (out_h, out_w) {
            // exact copy, still recorded so gradients pass through
            let out = self.vals[x.0].clone();
            return self.finish("resize_bilinear", Op::ResizeBilinear { x }, &[x], out);
        }
        let data = kernels::resize_bilinear_fwd(self.vals[x.0].data(), c, h, w, out_h, out_w);
        let out = Tensor::new(&[c, out_h, out_w], data)?;
        self.finish("resize_bilinear", Op::ResizeBilinear { x }, &[x], out)
    }

    /// Edge-replicate padding out to (out_h, out_w); both must be >= the
    /// current extents.
    pub fn edge_pad(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        self.guard_usable("edge_pad")?;
        let (c, h, w) = self.chw("edge_pad", x)?;
        if out_h < h || out_w < w {
            return Err(Error::shape("edge_pad", [h, w], [out_h, out_w]));
        }
        if (h, w) == (out_h, out_w) {
            let out = self.vals[x.0].clone();
            return self.finish("edge_pad", Op::EdgePad { x }, &[x], out);
        }
        let data = kernels::edge_pad_fwd(self.vals[x.0].data(), c, h, w, out_h, out_w);
        let out = Tensor::new(&[c, out_h, out_w], data)?;
        self.finish("edge_pad", Op::EdgePad { x }, &[x], out)
    }

    /// Spatial mean per channel: [C, H, W] -> [C].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.guard_usable("global_avg_pool")?;
        let (c, h, w) = self.chw("global_avg_pool", x)?;
        let data = kernels::global_avg_pool_fwd(self.vals[x.0].data(), c, h * w);
        let out = Tensor::new(&[c], data)?;
        self.finish("global_avg_pool", Op::GlobalAvgPool { x }, &[x], out)
    }

    /// Dense map of a vector: w is [rows, cols], v is [cols].
    pub fn matvec(&mut self, w: TensorId, v: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        self.guard_usable("matvec")?;
        let (rows, cols) = match self.vals[w.0].shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::shape("matvec", other, "[rows, cols]")),
        };
        if self.vals[v.0].shape() != [cols] {
            return Err(Error::shape("matvec", self.vals[v.0].shape(), [cols]));
        }
        if let Some(b) = b {
            if self.vals[b.0].shape() != [rows] {
                return Err(Error::shape("matvec", self.vals[b.0].shape(), [rows]));
            }
        }
        let data = kernels::matvec_fwd(
            self.vals[w.0].data(),
            self.vals[v.0].data(),
            b.map(|b| self.vals[b.0].data()),
            rows,
            cols,
        );
        let out = Tensor::new(&[rows], data)?;
        let mut inputs = vec![w, v];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.finish("matvec", Op::MatVec { w, v, b }, &inputs, out)
    }

    /// Per-channel gating: x is [C, H, W], s is [C].
    pub fn channel_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.guard_usable("channel_scale")?;
        let (c, h, w) = self.chw("channel_scale", x)?;
        if self.vals[s.0].shape() != [c] {
            return Err(Error::shape("channel_scale", self.vals[s.0].shape(), [c]));
        }
        let data = kernels::channel_scale_fwd(self.vals[x.0].data(), self.vals[s.0].data(), c, h * w);
        let out = Tensor::new(&[c, h, w], data)?;
        self.finish("channel_scale", Op::ChannelScale { x, s }, &[x, s], out)
    }

    /// Fixed-coordinate bilinear gather from [C, H, W] into [C, gh, gw].
    /// `taps` has gh*gw entries; missing taps read as zero.
    pub fn gather_bilinear(
        &mut self,
        x: TensorId,
        taps: Arc<Vec<Option<BilinearTap>>>,
        gh: usize,
        gw: usize,
    ) -> Result<TensorId> {
        self.guard_usable("gather_bilinear")?;
        let (c, h, w) = self.chw("gather_bilinear", x)?;
        if taps.len() != gh * gw {
            return Err(Error::shape("gather_bilinear", [taps.len()], [gh * gw]));
        }
        let data = kernels::gather_bilinear_fwd(self.vals[x.0].data(), c, h * w, &taps);
        let out = Tensor::new(&[c, gh, gw], data)?;
        self.finish("gather_bilinear", Op::GatherBilinear { x, taps }, &[x], out)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.guard_usable("relu")?;
        let data = self.vals[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.vals[x.0].shape(), data)?;
        self.finish("relu", Op::Relu { x }, &[x], out)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.guard_usable("sigmoid")?;
        let data = self.vals[x.0].data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = Tensor::new(self.vals[x.0].shape(), data)?;
        self.finish("sigmoid", Op::Sigmoid { x }, &[x], out)
    }

    fn zip_shapes(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::shape(op, self.vals[a.0].shape(), self.vals[b.0].shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_usable("add")?;
        self.zip_shapes("add", a, b)?;
        let data = self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.vals[a.0].shape(), data)?;
        self.finish("add", Op::Add { a, b }, &[a, b], out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_usable("sub")?;
        self.zip_shapes("sub", a, b)?;
        let data = self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.vals[a.0].shape(), data)?;
        self.finish("sub", Op::Sub { a, b }, &[a, b], out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_usable("mul")?;
        self.zip_shapes("mul", a, b)?;
        let data = self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.vals[a.0].shape(), data)?;
        self.finish("mul", Op::Mul { a, b }, &[a, b], out)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.guard_usable("scale")?;
        let data = self.vals[x.0].data().iter().map(|&v| factor * v).collect();
        let out = Tensor::new(self.vals[x.0].shape(), data)?;
        self.finish("scale", Op::Scale { x, factor }, &[x], out)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        self.guard_usable("concat")?;
        if xs.is_empty() {
            return Err(Error::Contract("concat: empty input list".into()));
        }
        let rank = self.vals[xs[0].0].rank();
        if axis >= rank {
            return Err(Error::Contract(format!("concat: axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = self.vals[xs[0].0].shape().to_vec();
        for &x in &xs[1..] {
            let s = self.vals[x.0].shape();
            if s.len() != rank
                || s.iter().enumerate().any(|(ax, &e)| ax != axis && e != out_shape[ax])
            {
                return Err(Error::shape("concat", s, &out_shape));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0usize;
        for &x in xs {
            let e = self.vals[x.0].shape()[axis];
            let src = self.vals[x.0].data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * e * inner;
                data[dst_base..dst_base + e * inner].copy_from_slice(&src[src_base..src_base + e * inner]);
            }
            offset += e;
        }
        let out = Tensor::new(&out_shape, data)?;
        self.finish("concat", Op::Concat { xs: xs.to_vec(), axis }, xs, out)
    }

    /// Selects one slice along axis 0: [N, ...] -> [...].
    pub fn slice0(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        self.guard_usable("slice0")?;
        let shape = self.vals[x.0].shape();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::shape("slice0", shape, [index + 1]));
        }
        let rest: Vec<usize> = shape[1..].to_vec();
        let chunk: usize = rest.iter().product();
        let data = self.vals[x.0].data()[index * chunk..(index + 1) * chunk].to_vec();
        let out = Tensor::new(&rest, data)?;
        self.finish("slice0", Op::Slice0 { x, index }, &[x], out)
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.guard_usable("stack0")?;
        if xs.is_empty() {
            return Err(Error::Contract("stack0: empty input list".into()));
        }
        let base = self.vals[xs[0].0].shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.vals[xs[0].0].numel());
        for &x in xs {
            if self.vals[x.0].shape() != base {
                return Err(Error::shape("stack0", self.vals[x.0].shape(), &base));
            }
            data.extend_from_slice(self.vals[x.0].data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&base);
        let out = Tensor::new(&shape, data)?;
        self.finish("stack0", Op::Stack0 { xs: xs.to_vec() }, xs, out)
    }

    /// Reduces to a scalar [1].
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.guard_usable("sum")?;
        let out = Tensor::scalar(self.vals[x.0].data().iter().sum());
        self.finish("sum", Op::Sum { x }, &[x], out)
    }

    /// Penalty-reduced focal loss of heatmap logits against a fixed target
    /// map (scalar output).
    pub fn focal_loss(&mut self, logits: TensorId, target: &Tensor, alpha: f64, beta: f64) -> Result<TensorId> {
        self.guard_usable("focal_loss")?;
        if self.vals[logits.0].shape() != target.shape() {
            return Err(Error::shape("focal_loss", self.vals[logits.0].shape(), target.shape()));
        }
        let (loss, _) = kernels::focal_loss(self.vals[logits.0].data(), target.data(), alpha, beta);
        let out = Tensor::scalar(loss);
        let op = Op::FocalLoss { logits, target: Arc::new(target.clone()), alpha, beta };
        self.finish("focal_loss", op, &[logits], out)
    }

    /// Mean absolute error at the masked spatial cells of a [C, H, W]
    /// prediction (scalar output). `mask` holds flat spatial indices.
    pub fn masked_l1(&mut self, pred: TensorId, target: &Tensor, mask: Arc<Vec<usize>>) -> Result<TensorId> {
        self.guard_usable("masked_l1")?;
        if self.vals[pred.0].shape() != target.shape() {
            return Err(Error::shape("masked_l1", self.vals[pred.0].shape(), target.shape()));
        }
        let (c, h, w) = self.chw("masked_l1", pred)?;
        let (loss, _) = kernels::masked_l1(self.vals[pred.0].data(), target.data(), &mask, c, h * w);
        let out = Tensor::scalar(loss);
        let op = Op::MaskedL1 { pred, target: Arc::new(target.clone()), mask };
        self.finish("masked_l1", op, &[pred], out)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients land in the `grad` slot
    /// of every value that requires them; the graph is consumed afterward.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward: graph already consumed".into()));
        }
        if !self.recording {
            return Err(Error::Contract("backward: inference graph records no nodes".into()));
        }
        if self.vals[root.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.vals[root.0].shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(vec![1.0]);

        for ni in (0..self.nodes.len()).rev() {
            let gout = match grads[self.nodes[ni].out.0].take() {
                Some(g) => g,
                None => continue, // branch never reached the root
            };
            self.backprop_node(ni, &gout, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.vals[i].requires_grad() {
                if let Some(g) = g {
                    self.vals[i].set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, ni: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // take-out/put-back keeps accumulation buffers disjoint even when the
        // same id appears more than once among a node's inputs
        let take = |grads: &mut [Option<Vec<f64>>], id: TensorId| -> Option<Vec<f64>> {
            if !self.vals[id.0].requires_grad() {
                return None;
            }
            Some(grads[id.0].take().unwrap_or_else(|| vec![0.0; self.vals[id.0].numel()]))
        };
        fn put(grads: &mut [Option<Vec<f64>>], id: TensorId, buf: Option<Vec<f64>>) {
            if let Some(b) = buf {
                grads[id.0] = Some(b);
            }
        }

        match &self.nodes[ni].op {
            Op::Conv1x1 { x, w, b } => {
                let (c_in, h, wd) = match self.vals[x.0].shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                let c_out = self.vals[w.0].shape()[0];
                let mut dx = take(grads, *x);
                let mut dw = take(grads, *w);
                let mut db = b.and_then(|b| take(grads, b));
                kernels::conv1x1_bwd(
                    gout,
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    c_in,
                    h * wd,
                    c_out,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                if let Some(b) = b {
                    put(grads, *b, db);
                }
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (c_in, h, wd) = match self.vals[x.0].shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                let c_out = self.vals[w.0].shape()[0];
                let mut dx = take(grads, *x);
                let mut dw = take(grads, *w);
                let mut db = take(grads, *b);
                kernels::conv3x3_bwd(
                    gout,
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    c_in,
                    h,
                    wd,
                    c_out,
                    *stride,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                put(grads, *b, db);
            }
            Op::ResizeBilinear { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    let (c, h, w) = match self.vals[x.0].shape() {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let os = self.vals[self.nodes[ni].out.0].shape();
                    let (oh, ow) = (os[1], os[2]);
                    if (h, w) == (oh, ow) {
                        for (d, &g) in dx.iter_mut().zip(gout) {
                            *d += g;
                        }
                    } else {
                        kernels::resize_bilinear_bwd(gout, &mut dx, c, h, w, oh, ow);
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::EdgePad { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    let (c, h, w) = match self.vals[x.0].shape() {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let os = self.vals[self.nodes[ni].out.0].shape();
                    let (oh, ow) = (os[1], os[2]);
                    if (h, w) == (oh, ow) {
                        for (d, &g) in dx.iter_mut().zip(gout) {
                            *d += g;
                        }
                    } else {
                        kernels::edge_pad_bwd(gout, &mut dx, c, h, w, oh, ow);
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::GlobalAvgPool { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    let (c, h, w) = match self.vals[x.0].shape() {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    kernels::global_avg_pool_bwd(gout, &mut dx, c, h * w);
                    put(grads, *x, Some(dx));
                }
            }
            Op::MatVec { w, v, b } => {
                let (rows, cols) = match self.vals[w.0].shape() {
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let mut dw = take(grads, *w);
                let mut dv = take(grads, *v);
                let mut db = b.and_then(|b| take(grads, b));
                kernels::matvec_bwd(
                    gout,
                    self.vals[w.0].data(),
                    self.vals[v.0].data(),
                    rows,
                    cols,
                    dw.as_deref_mut(),
                    dv.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *w, dw);
                put(grads, *v, dv);
                if let Some(b) = b {
                    put(grads, *b, db);
                }
            }
            Op::ChannelScale { x, s } => {
                let (c, h, w) = match self.vals[x.0].shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                let mut dx = take(grads, *x);
                let mut ds = take(grads, *s);
                kernels::channel_scale_bwd(
                    gout,
                    self.vals[x.0].data(),
                    self.vals[s.0].data(),
                    c,
                    h * w,
                    dx.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *s, ds);
            }
            Op::GatherBilinear { x, taps } => {
                if let Some(mut dx) = take(grads, *x) {
                    let (c, h, w) = match self.vals[x.0].shape() {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    kernels::gather_bilinear_bwd(gout, &mut dx, c, h * w, taps);
                    put(grads, *x, Some(dx));
                }
            }
            Op::Relu { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gout).zip(self.vals[x.0].data()) {
                        if xv > 0.0 {
                            *d += g;
                        }
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::Sigmoid { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    let y = self.vals[self.nodes[ni].out.0].data();
                    for ((d, &g), &yv) in dx.iter_mut().zip(gout).zip(y) {
                        *d += g * yv * (1.0 - yv);
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::Add { a, b } => {
                if let Some(mut da) = take(grads, *a) {
                    for (d, &g) in da.iter_mut().zip(gout) {
                        *d += g;
                    }
                    put(grads, *a, Some(da));
                }
                if let Some(mut db) = take(grads, *b) {
                    for (d, &g) in db.iter_mut().zip(gout) {
                        *d += g;
                    }
                    put(grads, *b, Some(db));
                }
            }
            Op::Sub { a, b } => {
                if let Some(mut da) = take(grads, *a) {
                    for (d, &g) in da.iter_mut().zip(gout) {
                        *d += g;
                    }
                    put(grads, *a, Some(da));
                }
                if let Some(mut db) = take(grads, *b) {
                    for (d, &g) in db.iter_mut().zip(gout) {
                        *d -= g;
                    }
                    put(grads, *b, Some(db));
                }
            }
            Op::Mul { a, b } => {
                if let Some(mut da) = take(grads, *a) {
                    for ((d, &g), &bv) in da.iter_mut().zip(gout).zip(self.vals[b.0].data()) {
                        *d += g * bv;
                    }
                    put(grads, *a, Some(da));
                }
                if let Some(mut db) = take(grads, *b) {
                    for ((d, &g), &av) in db.iter_mut().zip(gout).zip(self.vals[a.0].data()) {
                        *d += g * av;
                    }
                    put(grads, *b, Some(db));
                }
            }
            Op::Scale { x, factor } => {
                if let Some(mut dx) = take(grads, *x) {
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d += factor * g;
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.vals[self.nodes[ni].out.0].shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &x in xs {
                    let e = self.vals[x.0].shape()[*axis];
                    if let Some(mut dx) = take(grads, x) {
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            let dst_base = o * e * inner;
                            for i in 0..e * inner {
                                dx[dst_base + i] += gout[src_base + i];
                            }
                        }
                        put(grads, x, Some(dx));
                    }
                    offset += e;
                }
            }
            Op::Slice0 { x, index } => {
                if let Some(mut dx) = take(grads, *x) {
                    let chunk = gout.len();
                    for (d, &g) in dx[index * chunk..(index + 1) * chunk].iter_mut().zip(gout) {
                        *d += g;
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::Stack0 { xs } => {
                let chunk = self.vals[xs[0].0].numel();
                for (i, &x) in xs.iter().enumerate() {
                    if let Some(mut dx) = take(grads, x) {
                        for (d, &g) in dx.iter_mut().zip(&gout[i * chunk..(i + 1) * chunk]) {
                            *d += g;
                        }
                        put(grads, x, Some(dx));
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(mut dx) = take(grads, *x) {
                    let g = gout[0];
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::FocalLoss { logits, target, alpha, beta } => {
                if let Some(mut dx) = take(grads, *logits) {
                    let (_, dz) = kernels::focal_loss(self.vals[logits.0].data(), target.data(), *alpha, *beta);
                    let g = gout[0];
                    for (d, dv) in dx.iter_mut().zip(dz) {
                        *d += g * dv;
                    }
                    put(grads, *logits, Some(dx));
                }
            }
            Op::MaskedL1 { pred, target, mask } => {
                if let Some(mut dx) = take(grads, *pred) {
                    let (c, h, w) = match self.vals[pred.0].shape() {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let (_, dp) = kernels::masked_l1(self.vals[pred.0].data(), target.data(), mask, c, h * w);
                    let g = gout[0];
                    for (d, dv) in dx.iter_mut().zip(dp) {
                        *d += g * dv;
                    }
                    put(grads, *pred, Some(dx));
                }
            }
        }
    }

    /// Node names in recording order, for diagnostics.
    pub fn node_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.name).collect()
    }

    /// Checks the topological invariant: every node's inputs precede its
    /// output in the arena.
    pub fn check_topological(&self) -> bool {
        self.nodes.iter().all(|n| {
            let inputs: Vec<usize> = match &n.op {
                Op::Conv1x1 { x, w, b } => {
                    let mut v = vec![x.0, w.0];
                    if let Some(b) = b {
                        v.push(b.0);
                    }
                    v
                }
                Op::Conv3x3 { x, w, b, .. } => vec![x.0, w.0, b.0],
                Op::ResizeBilinear { x }
                | Op::EdgePad { x }
                | Op::GlobalAvgPool { x }
                | Op::Relu { x }
                | Op::Sigmoid { x }
                | Op::Scale { x, .. }
                | Op::Slice0 { x, .. }
                | Op::Sum { x } => vec![x.0],
                Op::MatVec { w, v, b } => {
                    let mut ids = vec![w.0, v.0];
                    if let Some(b) = b {
                        ids.push(b.0);
                    }
                    ids
                }
                Op::ChannelScale { x, s } => vec![x.0, s.0],
                Op::GatherBilinear { x, .. } => vec![x.0],
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![a.0, b.0],
                Op::Concat { xs, .. } | Op::Stack0 { xs } => xs.iter().map(|t| t.0).collect(),
                Op::FocalLoss { logits, .. } => vec![logits.0],
                Op::MaskedL1 { pred, .. } => vec![pred.0],
            };
            inputs.iter().all(|&i| i < n.out.0)
        })
    }
}
