use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::Error;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---- conv1x1 ------------------------------------------------------------

#[test]
fn conv1x1_sums_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 1, 1], 1.0));
    let w = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1x1(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0]);
}

#[test]
fn conv1x1_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&[3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let eye = Tensor::from_fn(&[3, 3], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
    let w = g.constant(eye);
    let y = g.conv1x1(x, w, None).unwrap();
    assert!(g.value(y).bit_eq(&xt));
}

/// Independent oracle: per-pixel matrix product, no shared code with the
/// kernel implementation.
fn conv1x1_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    Tensor::from_fn(&[c_out, h, wd], |ix| {
        let (co, y, xx) = (ix[0], ix[1], ix[2]);
        let mut acc = b.data()[co];
        for ci in 0..c_in {
            acc += w.data()[co * c_in + ci] * x.data()[(ci * h + y) * wd + xx];
        }
        acc
    })
}

#[test]
fn conv1x1_matches_per_pixel_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = rand_tensor(&[3, 4, 4], &mut rng);
    let wt = rand_tensor(&[5, 3], &mut rng);
    let bt = rand_tensor(&[5], &mut rng);
    let expected = conv1x1_oracle(&xt, &wt, &bt);
    let mut g = Graph::new();
    let x = g.constant(xt);
    let w = g.constant(wt);
    let b = g.constant(bt);
    let y = g.conv1x1(x, w, Some(b)).unwrap();
    let max_diff = g
        .value(y)
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-12, "max diff {max_diff}");
}

#[test]
fn conv1x1_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 2, 2]));
    let w = g.constant(Tensor::zeros(&[4, 5]));
    match g.conv1x1(x, w, None) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert!(lhs.contains('4') && rhs.contains('3'), "{lhs} vs {rhs}");
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

// ---- conv3x3 ------------------------------------------------------------

#[test]
fn conv3x3_stride2_output_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 5, 5]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3x3(x, w, b, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 3]);
}

#[test]
fn conv3x3_rejects_bad_stride() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 5, 5]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv3x3(x, w, b, 3), Err(Error::Config(_))));
    assert!(matches!(g.conv3x3(x, w, b, 0), Err(Error::Config(_))));
}

#[test]
fn conv3x3_delta_kernel_shifts_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&[1, 4, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    // kernel tap at (kh=1, kw=2) reads x[y, x+1]
    let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
    wt.data_mut()[3 + 2] = 1.0;
    let w = g.constant(wt);
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3x3(x, w, b, 1).unwrap();
    for yy in 0..4 {
        for xx in 0..4 {
            let expected = if xx + 1 < 4 { xt.at(&[0, yy, xx + 1]) } else { 0.0 };
            assert_eq!(g.value(y).at(&[0, yy, xx]), expected);
        }
    }
}

/// Independent oracle: the direct six-nested-loop definition of padded
/// strided cross-correlation.
fn conv3x3_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let oh = (h - 1) / stride + 1;
    let ow = (wd - 1) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..c_in {
                    for kh in 0..3usize {
                        for kw in 0..3usize {
                            let iy = (oy * stride + kh) as isize - 1;
                            let ix = (ox * stride + kw) as isize - 1;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                acc += w.at(&[co, ci, kh, kw]) * x.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.data_mut()[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv3x3_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for stride in [1usize, 2] {
        let xt = rand_tensor(&[3, 6, 5], &mut rng);
        let wt = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let bt = rand_tensor(&[4], &mut rng);
        let expected = conv3x3_oracle(&xt, &wt, &bt, stride);
        let mut g = Graph::new();
        let x = g.constant(xt);
        let w = g.constant(wt);
        let b = g.constant(bt);
        let y = g.conv3x3(x, w, b, stride).unwrap();
        assert_eq!(g.value(y).shape(), expected.shape());
        let max_diff = g
            .value(y)
            .data()
            .iter()
            .zip(expected.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "stride {stride}: max diff {max_diff}");
    }
}

// ---- resize_bilinear ------------------------------------------------------

#[test]
fn resize_to_same_size_is_bitwise_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&[2, 3, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let y = g.resize_bilinear(x, 3, 4).unwrap();
    assert!(g.value(y).bit_eq(&xt));
}

#[test]
fn resize_half_pixel_hand_values() {
    // [0, 2] widened to 4 -> [0, 0.5, 1.5, 2]
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 2.0]).unwrap());
    let y = g.resize_bilinear(x, 1, 4).unwrap();
    let got = g.value(y).data();
    for (a, b) in got.iter().zip([0.0, 0.5, 1.5, 2.0]) {
        assert!((a - b).abs() < 1e-15, "{got:?}");
    }
}

#[test]
fn resize_preserves_constants() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 3], 7.5));
    for (oh, ow) in [(7, 2), (1, 9), (6, 6)] {
        let y = g.resize_bilinear(x, oh, ow).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 7.5).abs() < 1e-15));
    }
}

// ---- global_avg_pool ------------------------------------------------------

#[test]
fn gap_constant_and_hand_case() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[3, 2, 5], -4.25));
    let y = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(y).data(), &[-4.25, -4.25, -4.25]);

    let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
}

#[test]
fn gap_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = rand_tensor(&[4, 5, 7], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let y = g.global_avg_pool(x).unwrap();
    for c in 0..4 {
        let mut acc = 0.0;
        for h in 0..5 {
            for w in 0..7 {
                acc += xt.at(&[c, h, w]);
            }
        }
        assert!((g.value(y).data()[c] - acc / 35.0).abs() < 1e-12);
    }
}

// ---- elementwise family ----------------------------------------------------

#[test]
fn elementwise_basics() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);

    let x = g.constant(Tensor::new(&[2], vec![-3.0, 3.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);

    let a = g.constant(Tensor::zeros(&[2, 3, 4]));
    let b = g.constant(Tensor::zeros(&[3, 3, 4]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).shape(), &[5, 3, 4]);

    let bad = g.constant(Tensor::zeros(&[3, 2, 4]));
    assert!(g.concat(&[a, bad], 0).is_err());
}

#[test]
fn concat_middle_axis_layout() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3, 2]);
    assert_eq!(
        g.value(c).data(),
        &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
    );
}

#[test]
fn slice_and_stack_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&[4, 2, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let parts: Vec<_> = (0..4).map(|k| g.slice0(x, k).unwrap()).collect();
    let back = g.stack0(&parts).unwrap();
    assert!(g.value(back).bit_eq(&xt));
}

// ---- backward ---------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = rand_tensor(&[3, 2, 2], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(&xt, true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = rand_tensor(&[10], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(&xt, true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(xt.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-14);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(&[3]), true);
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn graph_is_consumed_by_backward() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::full(&[2], 1.0), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    assert!(matches!(g.relu(x), Err(Error::Contract(_))));
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::inference();
    let x = g.leaf(&Tensor::full(&[2], 1.0), true);
    let s = g.sum(x).unwrap();
    assert_eq!(g.node_count(), 0);
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn validate_mode_reports_offending_op() {
    let mut g = Graph::new();
    g.set_validate(true);
    let x = g.constant(Tensor::new(&[1], vec![1e308]).unwrap());
    match g.mul(x, x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "mul"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn nodes_are_topologically_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = rand_tensor(&[2, 4, 4], &mut rng);
    let wt = rand_tensor(&[3, 2], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(&xt, true);
    let w = g.leaf(&wt, true);
    let y = g.conv1x1(x, w, None).unwrap();
    let r = g.relu(y).unwrap();
    let p = g.global_avg_pool(r).unwrap();
    let _s = g.sum(p).unwrap();
    assert!(g.check_topological());
    assert_eq!(g.node_names(), vec!["conv1x1", "relu", "global_avg_pool", "sum"]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xt = rand_tensor(&[3, 6, 6], &mut rng);
        let wt = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let bt = rand_tensor(&[4], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt);
        let w = g.constant(wt);
        let b = g.constant(bt);
        let y = g.conv3x3(x, w, b, 2).unwrap();
        let r = g.sigmoid(y).unwrap();
        g.value(r).clone()
    };
    assert!(run().bit_eq(&run()));
}

// ---- properties -------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// conv1x1 with zero bias is linear in its input.
    #[test]
    fn conv1x1_linearity(seed in 0u64..1_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&[3, 3, 3], &mut rng);
        let yt = rand_tensor(&[3, 3, 3], &mut rng);
        let wt = rand_tensor(&[2, 3], &mut rng);

        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = g.constant(yt.clone());
        let w = g.constant(wt.clone());
        let xs = g.scale(x, a).unwrap();
        let ys = g.scale(y, b).unwrap();
        let mix = g.add(xs, ys).unwrap();
        let lhs = g.conv1x1(mix, w, None).unwrap();
        let cx = g.conv1x1(x, w, None).unwrap();
        let cy = g.conv1x1(y, w, None).unwrap();
        let cxs = g.scale(cx, a).unwrap();
        let cys = g.scale(cy, b).unwrap();
        let rhs = g.add(cxs, cys).unwrap();
        for (l, r) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }

    /// Resizing never extrapolates beyond the input's value range.
    #[test]
    fn resize_stays_within_bounds(seed in 0u64..1_000, oh in 1usize..9, ow in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&[2, 4, 5], &mut rng);
        let lo = xt.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut g = Graph::new();
        let x = g.constant(xt);
        let y = g.resize_bilinear(x, oh, ow).unwrap();
        for &v in g.value(y).data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
