//! Forward and backward array kernels.
//!
//! Everything here is plain row-major `&[f64]` math with explicit dimensions;
//! recording, shape validation and gradient bookkeeping live in
//! [`super::graph`]. All loops are sequential and fixed-order so results are
//! bitwise reproducible.

/// One bilinear sample into a feature map: four flat spatial offsets plus
/// their interpolation weights. Cells that fall outside the source (behind
/// the camera, off-image) have no tap and read as zero.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// out[c,h,w] = b[c] + sum_k w[c,k] * x[k,h,w]
#[allow(clippy::too_many_arguments)]
pub fn conv1x1_fwd(x: &[f64], c_in: usize, hw: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let row = &mut out[co * hw..(co + 1) * hw];
        row.fill(b[co]);
        for ci in 0..c_in {
            let wv = w[co * c_in + ci];
            if wv == 0.0 {
                continue;
            }
            let xin = &x[ci * hw..(ci + 1) * hw];
            for (o, &xv) in row.iter_mut().zip(xin) {
                *o += wv * xv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1x1_bwd(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    c_in: usize,
    hw: usize,
    c_out: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for co in 0..c_out {
            let dor = &dout[co * hw..(co + 1) * hw];
            for ci in 0..c_in {
                let wv = w[co * c_in + ci];
                if wv == 0.0 {
                    continue;
                }
                let dxr = &mut dx[ci * hw..(ci + 1) * hw];
                for (d, &g) in dxr.iter_mut().zip(dor) {
                    *d += wv * g;
                }
            }
        }
    }
    if let Some(dw) = dw {
        for co in 0..c_out {
            let dor = &dout[co * hw..(co + 1) * hw];
            for ci in 0..c_in {
                let xin = &x[ci * hw..(ci + 1) * hw];
                let mut acc = 0.0;
                for (&g, &xv) in dor.iter().zip(xin) {
                    acc += g * xv;
                }
                dw[co * c_in + ci] += acc;
            }
        }
    }
    if let Some(db) = db {
        for co in 0..c_out {
            db[co] += dout[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }
}

/// Output spatial extent for the fixed-padding-1 3x3 convolution.
pub fn conv3x3_out_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Valid output range along one axis for a kernel tap: all o in
/// [lo, hi) satisfy 0 <= o*stride + k - 1 < n.
fn tap_range(n: usize, out_n: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = ((n - k) / stride + 1).min(out_n);
    (lo.min(hi), hi)
}

/// Cross-correlation with a 3x3 kernel, padding 1, stride 1 or 2.
/// w layout: [c_out, c_in, 3, 3]. Tap ranges are hoisted out of the inner
/// loop so the stride-1 fast path runs over contiguous slices.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_fwd(
    x: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = conv3x3_out_extent(h, stride);
    let ow = conv3x3_out_extent(wd, stride);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        out[co * oh * ow..(co + 1) * oh * ow].fill(b[co]);
        for ci in 0..c_in {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            let wbase = (co * c_in + ci) * 9;
            for kh in 0..3 {
                let (oy_lo, oy_hi) = tap_range(h, oh, stride, kh);
                for kw in 0..3 {
                    let wv = w[wbase + kh * 3 + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = tap_range(wd, ow, stride, kw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + kh - 1;
                        let orow = &mut out[co * oh * ow + oy * ow + ox_lo..co * oh * ow + oy * ow + ox_hi];
                        if stride == 1 {
                            let irow = &xin[iy * wd + ox_lo + kw - 1..iy * wd + ox_hi + kw - 1];
                            for (o, &xv) in orow.iter_mut().zip(irow) {
                                *o += wv * xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                // (ox*stride + kw) >= 1 within the tap range
                                let ix = (ox_lo + i) * stride + kw - 1;
                                *o += wv * xin[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_bwd(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    stride: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let oh = conv3x3_out_extent(h, stride);
    let ow = conv3x3_out_extent(wd, stride);
    if let Some(db) = db {
        for co in 0..c_out {
            db[co] += dout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    let mut dxs = dx;
    let mut dws = dw;
    for co in 0..c_out {
        for ci in 0..c_in {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            let wbase = (co * c_in + ci) * 9;
            for kh in 0..3 {
                let (oy_lo, oy_hi) = tap_range(h, oh, stride, kh);
                for kw in 0..3 {
                    let wv = w[wbase + kh * 3 + kw];
                    let (ox_lo, ox_hi) = tap_range(wd, ow, stride, kw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut wacc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + kh - 1;
                        let gout_row = &dout[co * oh * ow + oy * ow + ox_lo..co * oh * ow + oy * ow + ox_hi];
                        if stride == 1 {
                            let ibase = iy * wd + ox_lo + kw - 1;
                            if dws.is_some() {
                                for (&g, &xv) in gout_row.iter().zip(&xin[ibase..ibase + gout_row.len()]) {
                                    wacc += g * xv;
                                }
                            }
                            if let Some(dx) = dxs.as_deref_mut() {
                                let drow = &mut dx[ci * h * wd + ibase..ci * h * wd + ibase + gout_row.len()];
                                for (d, &g) in drow.iter_mut().zip(gout_row) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            for (i, &g) in gout_row.iter().enumerate() {
                                let ix = (ox_lo + i) * stride + kw - 1;
                                if dws.is_some() {
                                    wacc += g * xin[iy * wd + ix];
                                }
                                if let Some(dx) = dxs.as_deref_mut() {
                                    dx[ci * h * wd + iy * wd + ix] += wv * g;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dws.as_deref_mut() {
                        dw[wbase + kh * 3 + kw] += wacc;
                    }
                }
            }
        }
    }
}

/// Source taps along one axis for align-corners=false bilinear resizing:
/// (low index, high index, fraction toward high).
pub fn bilinear_axis(in_n: usize, out_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear_fwd(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let obase = ch * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = xin[y0 * w + x0] * (1.0 - fx) + xin[y0 * w + x1] * fx;
                let bot = xin[y1 * w + x0] * (1.0 - fx) + xin[y1 * w + x1] * fx;
                out[obase + oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_bwd(dout: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for ch in 0..c {
        let dxin = &mut dx[ch * h * w..(ch + 1) * h * w];
        let obase = ch * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dout[obase + oy * ow + ox];
                dxin[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dxin[y0 * w + x1] += g * (1.0 - fy) * fx;
                dxin[y1 * w + x0] += g * fy * (1.0 - fx);
                dxin[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Replicates the last row/column outward to grow a map to (oh, ow).
/// Requires oh >= h and ow >= w.
pub fn edge_pad_fwd(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let obase = ch * oh * ow;
        for oy in 0..oh {
            let iy = oy.min(h - 1);
            for ox in 0..ow {
                out[obase + oy * ow + ox] = xin[iy * w + ox.min(w - 1)];
            }
        }
    }
    out
}

pub fn edge_pad_bwd(dout: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) {
    for ch in 0..c {
        let dxin = &mut dx[ch * h * w..(ch + 1) * h * w];
        let obase = ch * oh * ow;
        for oy in 0..oh {
            let iy = oy.min(h - 1);
            for ox in 0..ow {
                dxin[iy * w + ox.min(w - 1)] += dout[obase + oy * ow + ox];
            }
        }
    }
}

pub fn global_avg_pool_fwd(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn global_avg_pool_bwd(dout: &[f64], dx: &mut [f64], c: usize, hw: usize) {
    for ch in 0..c {
        let g = dout[ch] / hw as f64;
        for d in dx[ch * hw..(ch + 1) * hw].iter_mut() {
            *d += g;
        }
    }
}

/// out[r] = b[r] + sum_c w[r,c] * v[c]
pub fn matvec_fwd(w: &[f64], v: &[f64], b: Option<&[f64]>, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let mut acc = b.map_or(0.0, |b| b[r]);
            for c in 0..cols {
                acc += w[r * cols + c] * v[c];
            }
            acc
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn matvec_bwd(
    dout: &[f64],
    w: &[f64],
    v: &[f64],
    rows: usize,
    cols: usize,
    dw: Option<&mut [f64]>,
    dv: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dw) = dw {
        for r in 0..rows {
            for c in 0..cols {
                dw[r * cols + c] += dout[r] * v[c];
            }
        }
    }
    if let Some(dv) = dv {
        for r in 0..rows {
            for c in 0..cols {
                dv[c] += dout[r] * w[r * cols + c];
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            db[r] += dout[r];
        }
    }
}

/// out[c,·] = s[c] * x[c,·] — per-channel gate broadcast over space.
pub fn channel_scale_fwd(x: &[f64], s: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let sv = s[ch];
        for (o, &xv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *o = sv * xv;
        }
    }
    out
}

pub fn channel_scale_bwd(
    dout: &[f64],
    x: &[f64],
    s: &[f64],
    c: usize,
    hw: usize,
    dx: Option<&mut [f64]>,
    ds: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for ch in 0..c {
            let sv = s[ch];
            for (d, &g) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(&dout[ch * hw..(ch + 1) * hw]) {
                *d += sv * g;
            }
        }
    }
    if let Some(ds) = ds {
        for ch in 0..c {
            let mut acc = 0.0;
            for (&g, &xv) in dout[ch * hw..(ch + 1) * hw].iter().zip(&x[ch * hw..(ch + 1) * hw]) {
                acc += g * xv;
            }
            ds[ch] += acc;
        }
    }
}

/// Gathers bilinear samples from a [c, hw_in] map into [c, n_cells].
pub fn gather_bilinear_fwd(x: &[f64], c: usize, hw_in: usize, taps: &[Option<BilinearTap>]) -> Vec<f64> {
    let n = taps.len();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let xin = &x[ch * hw_in..(ch + 1) * hw_in];
        let orow = &mut out[ch * n..(ch + 1) * n];
        for (cell, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                orow[cell] = t.w[0] * xin[t.idx[0]]
                    + t.w[1] * xin[t.idx[1]]
                    + t.w[2] * xin[t.idx[2]]
                    + t.w[3] * xin[t.idx[3]];
            }
        }
    }
    out
}

pub fn gather_bilinear_bwd(dout: &[f64], dx: &mut [f64], c: usize, hw_in: usize, taps: &[Option<BilinearTap>]) {
    let n = taps.len();
    for ch in 0..c {
        let dxin = &mut dx[ch * hw_in..(ch + 1) * hw_in];
        let grow = &dout[ch * n..(ch + 1) * n];
        for (cell, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                let g = grow[cell];
                dxin[t.idx[0]] += g * t.w[0];
                dxin[t.idx[1]] += g * t.w[1];
                dxin[t.idx[2]] += g * t.w[2];
                dxin[t.idx[3]] += g * t.w[3];
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// ln(1 + e^t) without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Penalty-reduced focal loss over sigmoid logits.
///
/// Cells with target exactly 1 are positives; everywhere else the penalty is
/// down-weighted by (1 - target)^beta. The sum is normalized by the positive
/// count (at least 1). Returns (loss, d_loss/d_logits).
pub fn focal_loss(logits: &[f64], target: &[f64], alpha: f64, beta: f64) -> (f64, Vec<f64>) {
    let n_pos = target.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut dz = vec![0.0; logits.len()];
    for (i, (&z, &y)) in logits.iter().zip(target).enumerate() {
        let p = sigmoid(z);
        let ln_p = -softplus(-z);
        let ln_1mp = -softplus(z);
        if y == 1.0 {
            loss -= (1.0 - p).powf(alpha) * ln_p;
            dz[i] = alpha * p * (1.0 - p).powf(alpha) * ln_p - (1.0 - p).powf(alpha + 1.0);
        } else {
            let wn = (1.0 - y).powf(beta);
            loss -= wn * p.powf(alpha) * ln_1mp;
            dz[i] = wn * (p.powf(alpha + 1.0) - alpha * p.powf(alpha) * (1.0 - p) * ln_1mp);
        }
    }
    for d in dz.iter_mut() {
        *d /= n_pos;
    }
    (loss / n_pos, dz)
}

/// Mean absolute error over the masked spatial cells, summed across channels,
/// normalized by the mask size (at least 1). `mask` holds flat spatial
/// indices; pred/target are [c, hw]. Returns (loss, d_loss/d_pred).
pub fn masked_l1(pred: &[f64], target: &[f64], mask: &[usize], c: usize, hw: usize) -> (f64, Vec<f64>) {
    let norm = mask.len().max(1) as f64;
    let mut loss = 0.0;
    let mut dp = vec![0.0; pred.len()];
    for ch in 0..c {
        let base = ch * hw;
        for &cell in mask {
            let d = pred[base + cell] - target[base + cell];
            loss += d.abs();
            dp[base + cell] = d.signum() / norm;
        }
    }
    (loss / norm, dp)
}
