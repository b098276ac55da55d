//! Quaternion algebra and Hamilton-product channel-mixing layers.
//!
//! A quaternion layer groups features along the four basis axes (r, i, j, k)
//! and mixes them with four shared real weight matrices, so it spends exactly
//! one quarter of the parameters of a dense layer over the same 4C channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, TensorId};
use crate::{Error, Result};

/// Scalar quaternion r + xi + yj + zk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { r, x, y, z }
    }

    pub fn identity() -> Self {
        Quaternion::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Quaternion::new(self.r / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }
}

/// Hamilton product p ⊙ q (non-commutative; i² = j² = k² = ijk = −1).
pub fn hamilton(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion {
        r: p.r * q.r - p.x * q.x - p.y * q.y - p.z * q.z,
        x: p.r * q.x + p.x * q.r + p.y * q.z - p.z * q.y,
        y: p.r * q.y - p.x * q.z + p.y * q.r + p.z * q.x,
        z: p.r * q.z + p.x * q.y - p.y * q.x + p.z * q.r,
    }
}

/// The 4x4 real matrix whose action on (r, x, y, z) column vectors equals
/// left-multiplication by q.
pub fn matrix_form(q: Quaternion) -> Tensor {
    Tensor::new(
        &[4, 4],
        vec![
            q.r, -q.x, -q.y, -q.z, //
            q.x, q.r, -q.z, q.y, //
            q.y, q.z, q.r, -q.x, //
            q.z, -q.y, q.x, q.r,
        ],
    )
    .expect("4x4 literal")
}

/// Tensor with a leading component axis of extent 4, ordered (r, i, j, k).
#[derive(Debug, Clone)]
pub struct QuaternionTensor {
    inner: Tensor,
}

impl QuaternionTensor {
    pub fn new(inner: Tensor) -> Result<Self> {
        if inner.shape().first() != Some(&4) {
            return Err(Error::shape("QuaternionTensor", inner.shape(), "[4, ...]"));
        }
        Ok(QuaternionTensor { inner })
    }

    pub fn from_components(parts: [&Tensor; 4]) -> Result<Self> {
        let base = parts[0].shape().to_vec();
        let mut data = Vec::with_capacity(4 * parts[0].numel());
        for p in parts {
            if p.shape() != base {
                return Err(Error::shape("QuaternionTensor", p.shape(), &base));
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![4];
        shape.extend_from_slice(&base);
        Ok(QuaternionTensor { inner: Tensor::new(&shape, data)? })
    }

    pub fn inner(&self) -> &Tensor {
        &self.inner
    }

    pub fn into_inner(self) -> Tensor {
        self.inner
    }

    /// Borrowed view of one component slice; no copy.
    pub fn component_view(&self, k: usize) -> &[f64] {
        assert!(k < 4, "component index out of range");
        let chunk = self.inner.numel() / 4;
        &self.inner.data()[k * chunk..(k + 1) * chunk]
    }

    pub fn component_shape(&self) -> &[usize] {
        &self.inner.shape()[1..]
    }
}

/// Activation applied element-wise to each of the four component slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }
}

/// Value-level split activation: f applied independently per component.
pub fn split_activation(x: &QuaternionTensor, f: Activation) -> QuaternionTensor {
    let data = x.inner().data().iter().map(|&v| f.apply(v)).collect();
    QuaternionTensor { inner: Tensor::new(x.inner().shape(), data).expect("same shape") }
}

/// In-graph split activation over a [4, C, H, W] value. Relu and sigmoid are
/// point-wise, so applying them to the packed tensor equals applying them to
/// each component slice (the value-level form is the test oracle for this).
pub fn split_activation_graph(g: &mut Graph, x: TensorId, f: Activation) -> Result<TensorId> {
    match f {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Identity => Ok(x),
    }
}

/// Uniform point on the unit 3-sphere: four standard normals, normalized.
pub fn suprasphere_point(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let v: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n, v[3] / n];
        }
    }
}

/// Hamilton-product channel mixer: four [C_out, C_in] weight matrices and an
/// optional per-output-channel quaternion bias stored [4, C_out].
#[derive(Debug, Clone)]
pub struct QuaternionLinear {
    pub w_r: ParamId,
    pub w_i: ParamId,
    pub w_j: ParamId,
    pub w_k: ParamId,
    pub bias: Option<ParamId>,
    c_in: usize,
    c_out: usize,
}

impl QuaternionLinear {
    /// Suprasphere initialization: each weight quaternion is m·u with u
    /// uniform on the unit 3-sphere and m ~ U(−s, s), s = 1/sqrt(2·C_in).
    pub fn suprasphere_init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        with_bias: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (2.0 * c_in as f64).sqrt();
        let n = c_in * c_out;
        let mut comps = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let u = suprasphere_point(&mut rng);
            let m = rng.gen_range(-s..s);
            for (c, &uc) in comps.iter_mut().zip(&u) {
                c.push(m * uc);
            }
        }
        let [dr, di, dj, dk] = comps;
        let shape = [c_out, c_in];
        let w_r = store.add(format!("{name}.w_r"), Tensor::new(&shape, dr).expect("sized"));
        let w_i = store.add(format!("{name}.w_i"), Tensor::new(&shape, di).expect("sized"));
        let w_j = store.add(format!("{name}.w_j"), Tensor::new(&shape, dj).expect("sized"));
        let w_k = store.add(format!("{name}.w_k"), Tensor::new(&shape, dk).expect("sized"));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[4, c_out])));
        QuaternionLinear { w_r, w_i, w_j, w_k, bias, c_in, c_out }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Weight scalars, biases excluded: 4·C_in·C_out.
    pub fn weight_param_count(&self) -> usize {
        4 * self.c_in * self.c_out
    }

    /// Forward through the Hamilton product, x: [4, C_in, H, W] ->
    /// [4, C_out, H, W]. Each of the sixteen products is a 1x1 channel
    /// convolution; the whole map is differentiable through the graph.
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[0] != 4 || shape[1] != self.c_in {
            return Err(Error::shape("qlinear_forward", &shape, [4, self.c_in, 0, 0]));
        }
        let xr = g.slice0(x, 0)?;
        let xi = g.slice0(x, 1)?;
        let xj = g.slice0(x, 2)?;
        let xk = g.slice0(x, 3)?;
        let (wr, wi, wj, wk) = (g.param(self.w_r), g.param(self.w_i), g.param(self.w_j), g.param(self.w_k));
        let bias: [Option<TensorId>; 4] = match self.bias {
            Some(b) => {
                let bid = g.param(b);
                [Some(g.slice0(bid, 0)?), Some(g.slice0(bid, 1)?), Some(g.slice0(bid, 2)?), Some(g.slice0(bid, 3)?)]
            }
            None => [None; 4],
        };

        // out_r = W_r·x_r − W_i·x_i − W_j·x_j − W_k·x_k
        let out_r = {
            let a = g.conv1x1(xr, wr, bias[0])?;
            let b = g.conv1x1(xi, wi, None)?;
            let c = g.conv1x1(xj, wj, None)?;
            let d = g.conv1x1(xk, wk, None)?;
            let ab = g.sub(a, b)?;
            let abc = g.sub(ab, c)?;
            g.sub(abc, d)?
        };
        // out_i = W_r·x_i + W_i·x_r + W_j·x_k − W_k·x_j
        let out_i = {
            let a = g.conv1x1(xi, wr, bias[1])?;
            let b = g.conv1x1(xr, wi, None)?;
            let c = g.conv1x1(xk, wj, None)?;
            let d = g.conv1x1(xj, wk, None)?;
            let ab = g.add(a, b)?;
            let abc = g.add(ab, c)?;
            g.sub(abc, d)?
        };
        // out_j = W_r·x_j − W_i·x_k + W_j·x_r + W_k·x_i
        let out_j = {
            let a = g.conv1x1(xj, wr, bias[2])?;
            let b = g.conv1x1(xk, wi, None)?;
            let c = g.conv1x1(xr, wj, None)?;
            let d = g.conv1x1(xi, wk, None)?;
            let ab = g.sub(a, b)?;
            let abc = g.add(ab, c)?;
            g.add(abc, d)?
        };
        // out_k = W_r·x_k + W_i·x_j − W_j·x_i + W_k·x_r
        let out_k = {
            let a = g.conv1x1(xk, wr, bias[3])?;
            let b = g.conv1x1(xj, wi, None)?;
            let c = g.conv1x1(xi, wj, None)?;
            let d = g.conv1x1(xr, wk, None)?;
            let ab = g.add(a, b)?;
            let abc = g.sub(ab, c)?;
            g.add(abc, d)?
        };
        g.stack0(&[out_r, out_i, out_j, out_k])
    }
}

/// Parameter count of the real dense layer mapping 4·C_in -> 4·C_out that a
/// quaternion layer replaces (biases excluded).
pub fn dense_equivalent_param_count(c_in: usize, c_out: usize) -> usize {
    (4 * c_in) * (4 * c_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::Rng;

    const I: Quaternion = Quaternion { r: 0.0, x: 1.0, y: 0.0, z: 0.0 };
    const J: Quaternion = Quaternion { r: 0.0, x: 0.0, y: 1.0, z: 0.0 };
    const K: Quaternion = Quaternion { r: 0.0, x: 0.0, y: 0.0, z: 1.0 };

    fn qrand(rng: &mut ChaCha8Rng) -> Quaternion {
        Quaternion::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        )
    }

    fn qdiff(a: Quaternion, b: Quaternion) -> f64 {
        (a.r - b.r).abs().max((a.x - b.x).abs()).max((a.y - b.y).abs()).max((a.z - b.z).abs())
    }

    #[test]
    fn basis_relations() {
        assert_eq!(hamilton(I, J), K);
        assert_eq!(hamilton(J, I), Quaternion::new(0.0, 0.0, 0.0, -1.0));
        // ijk = -1
        let ijk = hamilton(hamilton(I, J), K);
        assert_eq!(ijk, Quaternion::new(-1.0, 0.0, 0.0, 0.0));
        for sq in [hamilton(I, I), hamilton(J, J), hamilton(K, K)] {
            assert_eq!(sq, Quaternion::new(-1.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn identity_is_left_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = qrand(&mut rng);
        assert_eq!(hamilton(Quaternion::identity(), q), q);
        assert_eq!(hamilton(q, Quaternion::identity()), q);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matrix_form_of_unit_and_i() {
        let m1 = matrix_form(Quaternion::identity());
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m1.at(&[r, c]), if r == c { 1.0 } else { 0.0 });
            }
        }
        let mi = matrix_form(I);
        let expected = [
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, -1.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(mi.at(&[r, c]), expected[r][c]);
            }
        }
    }

    /// Oracle for hamilton: apply matrix_form(p) to q as a 4-vector.
    fn matrix_oracle(p: Quaternion, q: Quaternion) -> Quaternion {
        let m = matrix_form(p);
        let v = q.as_array();
        let mut out = [0.0; 4];
        for (r, o) in out.iter_mut().enumerate() {
            for (c, &vc) in v.iter().enumerate() {
                *o += m.at(&[r, c]) * vc;
            }
        }
        Quaternion::new(out[0], out[1], out[2], out[3])
    }

    #[test]
    fn hamilton_equals_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = qrand(&mut rng);
            let q = qrand(&mut rng);
            assert!(qdiff(hamilton(p, q), matrix_oracle(p, q)) < 1e-14);
        }
    }

    /// Cofactor-expansion determinant of a 4x4, independent of matrix_form.
    fn det4(m: &Tensor) -> f64 {
        fn det3(a: [[f64; 3]; 3]) -> f64 {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        let mut det = 0.0;
        for col in 0..4 {
            let mut minor = [[0.0; 3]; 3];
            for r in 1..4 {
                let mut cc = 0;
                for c in 0..4 {
                    if c == col {
                        continue;
                    }
                    minor[r - 1][cc] = m.at(&[r, c]);
                    cc += 1;
                }
            }
            let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m.at(&[0, col]) * det3(minor);
        }
        det
    }

    #[test]
    fn matrix_determinant_is_norm_fourth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = qrand(&mut rng);
            let det = det4(&matrix_form(q));
            assert!((det - q.norm().powi(4)).abs() < 1e-10, "{det} vs {}", q.norm().powi(4));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn norm_is_multiplicative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = qrand(&mut rng);
            let q = qrand(&mut rng);
            prop_assert!((hamilton(p, q).norm() - p.norm() * q.norm()).abs() < 1e-10);
        }

        #[test]
        fn product_is_associative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, q, r) = (qrand(&mut rng), qrand(&mut rng), qrand(&mut rng));
            let lhs = hamilton(hamilton(p, q), r);
            let rhs = hamilton(p, hamilton(q, r));
            prop_assert!(qdiff(lhs, rhs) < 1e-10);
        }

        #[test]
        fn normalize_yields_unit_norm(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = qrand(&mut rng);
            prop_assume!(q.norm() > 1e-6);
            prop_assert!((q.normalize().norm() - 1.0).abs() < 1e-12);
        }
    }

    // ---- QuaternionTensor / split activation ----------------------------

    #[test]
    fn quaternion_tensor_requires_leading_four() {
        assert!(QuaternionTensor::new(Tensor::zeros(&[4, 2, 2])).is_ok());
        assert!(QuaternionTensor::new(Tensor::zeros(&[3, 2, 2])).is_err());
    }

    #[test]
    fn component_view_slices_without_copy() {
        let t = Tensor::from_fn(&[4, 2], |ix| (ix[0] * 10 + ix[1]) as f64);
        let q = QuaternionTensor::new(t).unwrap();
        assert_eq!(q.component_view(0), &[0.0, 1.0]);
        assert_eq!(q.component_view(3), &[30.0, 31.0]);
        // view aliases the inner buffer
        let base = q.inner().data().as_ptr();
        assert_eq!(q.component_view(2).as_ptr(), unsafe { base.add(4) });
    }

    #[test]
    fn split_activation_identity_and_relu() {
        let t = Tensor::new(&[4, 1], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let q = QuaternionTensor::new(t).unwrap();
        let id = split_activation(&q, Activation::Identity);
        assert!(id.inner().bit_eq(q.inner()));
        let r = split_activation(&q, Activation::Relu);
        assert_eq!(r.inner().data(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn graph_split_activation_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 3 * 2 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = Tensor::new(&[4, 3, 2, 2], data).unwrap();
        for f in [Activation::Relu, Activation::Sigmoid, Activation::Identity] {
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let y = split_activation_graph(&mut g, x, f).unwrap();
            // oracle: stack of f over each component view
            let q = QuaternionTensor::new(xt.clone()).unwrap();
            let chunk = xt.numel() / 4;
            for k in 0..4 {
                let got = &g.value(y).data()[k * chunk..(k + 1) * chunk];
                let want: Vec<f64> = q.component_view(k).iter().map(|&v| f.apply(v)).collect();
                assert_eq!(got, &want[..]);
            }
        }
    }

    // ---- QuaternionLinear ------------------------------------------------

    #[test]
    fn qlinear_identity_weights_give_identity_map() {
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 1, 1, false, 0);
        *store.get_mut(layer.w_r) = Tensor::full(&[1, 1], 1.0);
        *store.get_mut(layer.w_i) = Tensor::zeros(&[1, 1]);
        *store.get_mut(layer.w_j) = Tensor::zeros(&[1, 1]);
        *store.get_mut(layer.w_k) = Tensor::zeros(&[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..4 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::new(&[4, 1, 2, 2], data).unwrap();
        let mut g = Graph::new();
        store.bind(&mut g);
        let x = g.constant(xt.clone());
        let y = layer.forward(&mut g, x).unwrap();
        assert!(g.value(y).bit_eq(&xt));
    }

    #[test]
    fn qlinear_single_pixel_matches_scalar_hamilton() {
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 1, 1, false, 7);
        let w = Quaternion::new(
            store.get(layer.w_r).data()[0],
            store.get(layer.w_i).data()[0],
            store.get(layer.w_j).data()[0],
            store.get(layer.w_k).data()[0],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xq = qrand(&mut rng);
        let xt = Tensor::new(&[4, 1, 1, 1], xq.as_array().to_vec()).unwrap();
        let mut g = Graph::new();
        store.bind(&mut g);
        let x = g.constant(xt);
        let y = layer.forward(&mut g, x).unwrap();
        let expected = hamilton(w, xq);
        for (got, want) in g.value(y).data().iter().zip(expected.as_array()) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn qlinear_matches_matrix_oracle_at_every_pixel() {
        // C_in = C_out = 1: at each pixel the layer must act as the 4x4
        // weight-quaternion matrix applied to the input 4-vector
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 1, 1, false, 21);
        let w = Quaternion::new(
            store.get(layer.w_r).data()[0],
            store.get(layer.w_i).data()[0],
            store.get(layer.w_j).data()[0],
            store.get(layer.w_k).data()[0],
        );
        let m = matrix_form(w);
        let (h, wd) = (3usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..4 * h * wd).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = Tensor::new(&[4, 1, h, wd], data).unwrap();
        let mut g = Graph::new();
        store.bind(&mut g);
        let x = g.constant(xt.clone());
        let y = layer.forward(&mut g, x).unwrap();
        for py in 0..h {
            for px in 0..wd {
                for r in 0..4 {
                    let mut expect = 0.0;
                    for c in 0..4 {
                        expect += m.at(&[r, c]) * xt.at(&[c, 0, py, px]);
                    }
                    let got = g.value(y).at(&[r, 0, py, px]);
                    assert!((got - expect).abs() < 1e-12, "pixel ({py},{px}) component {r}");
                }
            }
        }
    }

    #[test]
    fn layer_checkpoint_orders_components_r_i_j_k() {
        let mut store = ParamStore::new();
        let _ = QuaternionLinear::suprasphere_init(&mut store, "dae0.quafa", 3, 2, true, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.ckpt");
        crate::snapshot::write_checkpoint(&path, &["layer dae0.quafa c_in=3 c_out=2".into()], &store).unwrap();
        let (manifest, tensors) = crate::snapshot::read_checkpoint(&path).unwrap();
        assert_eq!(manifest, vec!["layer dae0.quafa c_in=3 c_out=2".to_string()]);
        let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec!["dae0.quafa.w_r", "dae0.quafa.w_i", "dae0.quafa.w_j", "dae0.quafa.w_k", "dae0.quafa.bias"]
        );
    }

    #[test]
    fn parameter_count_is_quarter_of_dense() {
        // C_in = C_out = 8: 4*8*8 = 256 quaternion weights vs 32*32 = 1024 dense
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 8, 8, false, 0);
        assert_eq!(layer.weight_param_count(), 256);
        assert_eq!(dense_equivalent_param_count(8, 8), 1024);
        assert_eq!(layer.weight_param_count() as f64 / dense_equivalent_param_count(8, 8) as f64, 0.25);
    }

    #[test]
    fn qlinear_populates_all_components_from_ri_inputs() {
        // Hamilton mixing: inputs on (r, i) only still excite j and k
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 3, 3, false, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut data = vec![0.0; 4 * 3 * 2 * 2];
        for v in data.iter_mut().take(2 * 3 * 2 * 2) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let xt = Tensor::new(&[4, 3, 2, 2], data).unwrap();
        let mut g = Graph::new();
        store.bind(&mut g);
        let x = g.constant(xt);
        let y = layer.forward(&mut g, x).unwrap();
        let chunk = 3 * 2 * 2;
        let out_j = &g.value(y).data()[2 * chunk..3 * chunk];
        assert!(out_j.iter().any(|&v| v.abs() > 0.0), "j component stayed zero");
    }

    #[test]
    fn qlinear_gradients_check_out() {
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 2, 2, true, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..4 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::new(&[4, 2, 3, 3], data).unwrap();
        let err = finite_diff_check(
            |g, x| {
                store.bind(g);
                let y = layer.forward(g, x)?;
                let a = split_activation_graph(g, y, Activation::Relu)?;
                g.sum(a)
            },
            &xt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    // ---- suprasphere init -------------------------------------------------

    #[test]
    fn suprasphere_points_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let u = suprasphere_point(&mut rng);
            let n = (u.iter().map(|v| v * v).sum::<f64>()).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let build = || {
            let mut store = ParamStore::new();
            let l = QuaternionLinear::suprasphere_init(&mut store, "q", 5, 7, true, 99);
            (store.get(l.w_r).clone(), store.get(l.w_k).clone())
        };
        let (a_r, a_k) = build();
        let (b_r, b_k) = build();
        assert!(a_r.bit_eq(&b_r));
        assert!(a_k.bit_eq(&b_k));
    }

    #[test]
    fn init_components_are_centered() {
        // Monte-Carlo: mean of each component over 10^4 draws within 3 stderr of 0
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 100, 100, false, 123);
        for pid in [layer.w_r, layer.w_i, layer.w_j, layer.w_k] {
            let data = store.get(pid).data();
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let stderr = (var / n).sqrt();
            assert!(mean.abs() < 3.0 * stderr, "mean {mean} vs stderr {stderr}");
        }
    }

    #[test]
    fn init_magnitudes_respect_scale() {
        let c_in = 8usize;
        let s = 1.0 / (2.0 * c_in as f64).sqrt();
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", c_in, 16, false, 5);
        for pid in [layer.w_r, layer.w_i, layer.w_j, layer.w_k] {
            for &v in store.get(pid).data() {
                assert!(v.abs() <= s, "|{v}| > {s}");
            }
        }
    }
}
