//! Forward and backward kernels for the layer types the networks use.
//!
//! Everything here is single-threaded and runs in a fixed order, so results
//! are bitwise reproducible for a given build.

use super::tensor::Tensor;

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Upper bound on the number of floats held by one im2col buffer.
const COL_BUDGET: usize = 1 << 21;

/// Mirror index `i` into `0..n` without repeating the edge sample.
///
/// Folds repeatedly, so any padding width works even on tiny inputs.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    match mode {
        PadMode::Zero => (0..n as isize).contains(&i).then_some(i as usize),
        PadMode::Reflect => Some(reflect_index(i, n)),
    }
}

/// Source index for each padded coordinate along one axis.
fn axis_map(n: usize, pad: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..n + 2 * pad)
        .map(|i| source_index(i as isize - pad as isize, n, mode))
        .collect()
}

fn pad_item(src: &[f32], c: usize, h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<f32> {
    if pad == 0 {
        return src.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let rows = axis_map(h, pad, mode);
    let cols = axis_map(w, pad, mode);
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            let row = &plane[sy * w..(sy + 1) * w];
            let drow = &mut dst[y * wp..(y + 1) * wp];
            drow[pad..pad + w].copy_from_slice(row);
            for x in (0..pad).chain(pad + w..wp) {
                if let Some(sx) = cols[x] {
                    drow[x] = row[sx];
                }
            }
        }
    }
    out
}

/// Adjoint of `pad_item`: folds padded gradients back onto their sources.
fn unpad_accumulate(
    dpad: &[f32],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    mode: PadMode,
    dst: &mut [f32],
) {
    if pad == 0 {
        for (d, g) in dst.iter_mut().zip(dpad) {
            *d += *g;
        }
        return;
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let rows = axis_map(h, pad, mode);
    let cols = axis_map(w, pad, mode);
    for ch in 0..c {
        let src = &dpad[ch * hp * wp..(ch + 1) * hp * wp];
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            let srow = &src[y * wp..(y + 1) * wp];
            let drow = &mut plane[sy * w..(sy + 1) * w];
            for (x, rx) in cols.iter().enumerate() {
                if let Some(sx) = rx {
                    drow[*sx] += srow[x];
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: [usize; 4], stride: usize, pad: usize) -> Self {
        assert_eq!(x[1], weight[1], "conv input channels do not match weight");
        assert!(stride >= 1);
        let (h, w) = (x[2], x[3]);
        let (kh, kw) = (weight[2], weight[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv kernel larger than padded input"
        );
        ConvGeom {
            cin: x[1],
            h,
            w,
            cout: weight[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output rows processed per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn im2col(&self, padded: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let wp = self.w + 2 * self.pad;
        let hp = self.h + 2 * self.pad;
        let np = (r1 - r0) * self.ow;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[k * np..(k + 1) * np];
                    for oy in r0..r1 {
                        let src_row = &plane[(oy * s + ky) * wp..];
                        let d = &mut dst[(oy - r0) * self.ow..(oy - r0 + 1) * self.ow];
                        if s == 1 {
                            d.copy_from_slice(&src_row[kx..kx + self.ow]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = src_row[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dpadded: &mut [f32]) {
        let wp = self.w + 2 * self.pad;
        let hp = self.h + 2 * self.pad;
        let np = (r1 - r0) * self.ow;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &mut dpadded[ci * hp * wp..(ci + 1) * hp * wp];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[k * np..(k + 1) * np];
                    for oy in r0..r1 {
                        let base = (oy * s + ky) * wp + kx;
                        let srow = &src[(oy - r0) * self.ow..(oy - r0 + 1) * self.ow];
                        for (ox, g) in srow.iter().enumerate() {
                            plane[base + ox * s] += *g;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the assertions above bound every offset sgemm reads or writes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let batch = x.batch();
    let (k, p) = (g.k(), g.positions());
    let mut out = Tensor::zeros([batch, g.cout, g.oh, g.ow]);
    let rows = g.rows_per_chunk();
    let mut cols = vec![0.0f32; k * rows * g.ow];
    for b in 0..batch {
        let padded = pad_item(x.item(b), g.cin, g.h, g.w, pad, mode);
        let oitem = out.item_mut(b);
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + rows).min(g.oh);
            let np = (r1 - r0) * g.ow;
            g.im2col(&padded, r0, r1, &mut cols[..k * np]);
            gemm(
                g.cout,
                k,
                np,
                weight.data(),
                k,
                1,
                &cols[..k * np],
                np,
                1,
                0.0,
                &mut oitem[r0 * g.ow..],
                p,
            );
            r0 = r1;
        }
        if let Some(bias) = bias {
            for (co, bv) in bias.data().iter().enumerate() {
                for v in &mut oitem[co * p..(co + 1) * p] {
                    *v += *bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    mode: PadMode,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let batch = x.batch();
    let (k, p) = (g.k(), g.positions());
    let rows = g.rows_per_chunk();
    let mut cols = vec![0.0f32; if need_weight { k * rows * g.ow } else { 0 }];
    let mut dcols = vec![0.0f32; if need_input { k * rows * g.ow } else { 0 }];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let (hp, wp) = (g.h + 2 * pad, g.w + 2 * pad);
    for b in 0..batch {
        let dyi = dy.item(b);
        let padded = need_weight.then(|| pad_item(x.item(b), g.cin, g.h, g.w, pad, mode));
        let mut dpadded = need_input.then(|| vec![0.0f32; g.cin * hp * wp]);
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + rows).min(g.oh);
            let np = (r1 - r0) * g.ow;
            let dy_chunk = &dyi[r0 * g.ow..];
            if let (Some(dw), Some(padded)) = (dw.as_mut(), padded.as_ref()) {
                g.im2col(padded, r0, r1, &mut cols[..k * np]);
                gemm(
                    g.cout,
                    np,
                    k,
                    dy_chunk,
                    p,
                    1,
                    &cols[..k * np],
                    1,
                    np,
                    1.0,
                    dw.data_mut(),
                    k,
                );
            }
            if let Some(dpadded) = dpadded.as_mut() {
                gemm(
                    k,
                    g.cout,
                    np,
                    weight.data(),
                    1,
                    k,
                    dy_chunk,
                    p,
                    1,
                    0.0,
                    &mut dcols[..k * np],
                    np,
                );
                g.col2im(&dcols[..k * np], r0, r1, dpadded);
            }
            r0 = r1;
        }
        if let (Some(dx), Some(dpadded)) = (dx.as_mut(), dpadded) {
            unpad_accumulate(&dpadded, g.cin, g.h, g.w, pad, mode, dx.item_mut(b));
        }
    }
    let db = need_bias.then(|| {
        let mut db = Tensor::zeros([g.cout, 1, 1, 1]);
        for b in 0..batch {
            let dyi = dy.item(b);
            for co in 0..g.cout {
                db.data_mut()[co] += dyi[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        db
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-(item, channel) statistics saved by the instance-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn instance_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> (Tensor, NormStats) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(n * c),
        inv_std: Vec::with_capacity(n * c),
    };
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let plane = &x.data()[off..off + hw];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / hw as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            let (mean, inv_std) = (mean as f32, inv_std as f32);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(plane) {
                *o = (v - mean) * inv_std * gm + bt;
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
    }
    (out, stats)
}

pub(crate) fn instance_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let idx = b * c + ch;
            let off = idx * hw;
            let (mean, inv_std) = (stats.mean[idx], stats.inv_std[idx]);
            let xs = &x.data()[off..off + hw];
            let gs = &dy.data()[off..off + hw];
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&xv, &gv) in xs.iter().zip(gs) {
                let xhat = ((xv - mean) * inv_std) as f64;
                sum_g += gv as f64;
                sum_gx += gv as f64 * xhat;
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let gm = gamma.data()[ch] as f64;
            let scale = gm * inv_std as f64 / hw as f64;
            for ((d, &xv), &gv) in dx.data_mut()[off..off + hw].iter_mut().zip(xs).zip(gs) {
                let xhat = ((xv - mean) * inv_std) as f64;
                *d = (scale * (hw as f64 * gv as f64 - sum_g - xhat * sum_gx)) as f32;
            }
        }
    }
    let to_t =
        |v: Vec<f64>| Tensor::from_vec([c, 1, 1, 1], v.into_iter().map(|x| x as f32).collect());
    (dx, to_t(dgamma), to_t(dbeta))
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns form partial
/// windows (ceil mode). Returns the winning flat index inside each item.
pub(crate) fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        let xi = x.item(b);
        let oi = out.item_mut(b);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = xi[best_idx];
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = (ch * h + y) * w + xx;
                            if xi[idx] > best {
                                best = xi[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    oi[(ch * oh + oy) * ow + ox] = best;
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool2_backward(input_shape: [usize; 4], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let per = dy.item_len();
    for b in 0..dy.batch() {
        let gi = dy.item(b);
        let di = dx.item_mut(b);
        for (j, g) in gi.iter().enumerate() {
            di[argmax[b * per + j] as usize] += *g;
        }
    }
    dx
}

pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for (src, dst) in x
        .data()
        .chunks_exact(w)
        .zip(out.data_mut().chunks_exact_mut(4 * w))
    {
        let (top, bottom) = dst.split_at_mut(2 * w);
        for (x2, v) in src.iter().enumerate() {
            top[2 * x2] = *v;
            top[2 * x2 + 1] = *v;
        }
        bottom.copy_from_slice(top);
    }
    debug_assert_eq!(out.len(), 4 * x.len());
    out
}

pub(crate) fn upsample2_backward(input_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let w = input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (d, src) in dx
        .data_mut()
        .chunks_exact_mut(w)
        .zip(dy.data().chunks_exact(4 * w))
    {
        let (top, bottom) = src.split_at(2 * w);
        for (x2, v) in d.iter_mut().enumerate() {
            *v = top[2 * x2] + top[2 * x2 + 1] + bottom[2 * x2] + bottom[2 * x2 + 1];
        }
    }
    dx
}

/// `y = x·Wᵀ + b` over flattened items; `weight` is `(out, in, 1, 1)`.
pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.batch();
    let k = x.item_len();
    let out_f = weight.batch();
    assert_eq!(
        weight.item_len(),
        k,
        "linear input width does not match weight"
    );
    let mut y = Tensor::zeros([n, out_f, 1, 1]);
    for row in y.data_mut().chunks_exact_mut(out_f) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        k,
        out_f,
        x.data(),
        k,
        1,
        weight.data(),
        1,
        k,
        1.0,
        y.data_mut(),
        out_f,
    );
    y
}

pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor>, Option<(Tensor, Tensor)>) {
    let n = x.batch();
    let k = x.item_len();
    let out_f = weight.batch();
    let dx = need_input.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            out_f,
            k,
            dy.data(),
            out_f,
            1,
            weight.data(),
            k,
            1,
            0.0,
            dx.data_mut(),
            k,
        );
        dx
    });
    let dparams = need_params.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        gemm(
            out_f,
            n,
            k,
            dy.data(),
            1,
            out_f,
            x.data(),
            k,
            1,
            0.0,
            dw.data_mut(),
            k,
        );
        let mut db = Tensor::zeros([out_f, 1, 1, 1]);
        for row in dy.data().chunks_exact(out_f) {
            for (d, g) in db.data_mut().iter_mut().zip(row) {
                *d += *g;
            }
        }
        (dw, db)
    });
    (dx, dparams)
}
