//! Forward/backward compute kernels for every tape operation.
//!
//! Kernels work on flat `&[f64]` buffers with explicit shapes. Convolutions
//! and fully-connected layers go through `matrixmultiply`'s f64 GEMM; the
//! circular-convolution kernels go through `rustfft` with a thread-local plan
//! cache. Everything here is single-threaded and deterministic.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

// ---------------------------------------------------------------------------
// GEMM wrappers (row-major)
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n] + beta * C
pub fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T + beta * C
pub fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = A[k,m]^T * B[k,n] + beta * C
pub fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Lower the padded input into a (c_in*k*k) x (h2*w2) patch matrix.
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let h2 = conv_out_dim(h, k, stride, pad);
    let w2 = conv_out_dim(w, k, stride, pad);
    let n = h2 * w2;
    debug_assert_eq!(cols.len(), c_in * k * k * n);
    cols.fill(0.0);
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * n;
                for oy in 0..h2 {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w2 {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * w2 + ox] = xc[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix gradient back onto the input gradient.
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let h2 = conv_out_dim(h, k, stride, pad);
    let w2 = conv_out_dim(w, k, stride, pad);
    let n = h2 * w2;
    for c in 0..c_in {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * n;
                for oy in 0..h2 {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w2 {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dxc[iy * w + ix as usize] += dcols[row + oy * w2 + ox];
                    }
                }
            }
        }
    }
}

/// out[c_out, h2, w2] = weight * x + bias
pub fn conv2d_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let h2 = conv_out_dim(h, k, stride, pad);
    let w2 = conv_out_dim(w, k, stride, pad);
    let n = h2 * w2;
    let kk = c_in * k * k;
    let mut cols = vec![0.0; kk * n];
    im2col(x, c_in, h, w, k, stride, pad, &mut cols);
    let mut out = vec![0.0; c_out * n];
    mm_nn(c_out, kk, n, weight, &cols, 0.0, &mut out);
    for o in 0..c_out {
        let b = bias[o];
        for v in &mut out[o * n..(o + 1) * n] {
            *v += b;
        }
    }
    out
}

/// Gradients for conv2d. Any of the output slots may be `None` to skip work
/// for inputs that do not require gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let h2 = conv_out_dim(h, k, stride, pad);
    let w2 = conv_out_dim(w, k, stride, pad);
    let n = h2 * w2;
    let kk = c_in * k * k;
    if let Some(db) = db {
        for o in 0..c_out {
            db[o] += g[o * n..(o + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        // dW[c_out, kk] += g[c_out, n] * cols[kk, n]^T
        let mut cols = vec![0.0; kk * n];
        im2col(x, c_in, h, w, k, stride, pad, &mut cols);
        mm_nt(c_out, n, kk, g, &cols, 1.0, dw);
    }
    if let Some(dx) = dx {
        // dcols[kk, n] = W[c_out, kk]^T * g[c_out, n]
        let mut dcols = vec![0.0; kk * n];
        mm_tn(kk, c_out, n, weight, g, 0.0, &mut dcols);
        col2im(&dcols, c_in, h, w, k, stride, pad, dx);
    }
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

/// Per-channel moments; returns (out, mu, inv_std).
pub fn instance_norm_forward(
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut mu = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    let n = hw as f64;
    for ch in 0..c {
        let xc = &x[ch * hw..(ch + 1) * hw];
        let m = xc.iter().sum::<f64>() / n;
        let var = xc.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        mu[ch] = m;
        inv_std[ch] = is;
        let (gm, bt) = (gamma[ch], beta[ch]);
        for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xc) {
            *o = gm * (v - m) * is + bt;
        }
    }
    (out, mu, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    g: &[f64],
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    mu: &[f64],
    inv_std: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let n = hw as f64;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = dx;
    for ch in 0..c {
        let xc = &x[ch * hw..(ch + 1) * hw];
        let gc = &g[ch * hw..(ch + 1) * hw];
        let (m, is) = (mu[ch], inv_std[ch]);
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] += gc.iter().sum::<f64>();
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] += gc
                .iter()
                .zip(xc)
                .map(|(gi, xi)| gi * (xi - m) * is)
                .sum::<f64>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
            let gm = gamma[ch];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for (gi, xi) in gc.iter().zip(xc) {
                let dxhat = gi * gm;
                let xhat = (xi - m) * is;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let dxc = &mut dx[ch * hw..(ch + 1) * hw];
            for ((d, gi), xi) in dxc.iter_mut().zip(gc).zip(xc) {
                let dxhat = gi * gm;
                let xhat = (xi - m) * is;
                *d += is / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

pub fn leaky_relu_forward(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
}

/// Subgradient at 0 takes the negative-branch value.
pub fn leaky_relu_backward(g: &[f64], x: &[f64], slope: f64, dx: &mut [f64]) {
    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(x) {
        *d += gi * if *xi > 0.0 { 1.0 } else { slope };
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn sigmoid_backward(g: &[f64], y: &[f64], dx: &mut [f64]) {
    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
        *d += gi * yi * (1.0 - yi);
    }
}

// ---------------------------------------------------------------------------
// Softmax / pooling / fully connected
// ---------------------------------------------------------------------------

/// Max-subtracted softmax over a 1-D slice.
pub fn softmax_forward(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / s).collect()
}

pub fn softmax_backward(g: &[f64], y: &[f64], dx: &mut [f64]) {
    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
        *d += yi * (gi - dot);
    }
}

pub fn global_avg_pool_forward(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn global_avg_pool_backward(g: &[f64], c: usize, hw: usize, dx: &mut [f64]) {
    for ch in 0..c {
        let gi = g[ch] / hw as f64;
        for d in &mut dx[ch * hw..(ch + 1) * hw] {
            *d += gi;
        }
    }
}

/// y[m] = W[m,n] x[n] + b[m]
pub fn fc_forward(x: &[f64], weight: &[f64], m: usize, n: usize, bias: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m];
    mm_nn(m, n, 1, weight, x, 0.0, &mut y);
    for (yi, bi) in y.iter_mut().zip(bias) {
        *yi += bi;
    }
    y
}

pub fn fc_backward(
    g: &[f64],
    x: &[f64],
    weight: &[f64],
    m: usize,
    n: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(db) = db {
        for (d, gi) in db.iter_mut().zip(g) {
            *d += gi;
        }
    }
    if let Some(dw) = dw {
        mm_nn(m, 1, n, g, x, 1.0, dw);
    }
    if let Some(dx) = dx {
        mm_tn(n, m, 1, weight, g, 1.0, dx);
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

pub fn upsample2x_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[ch * h * w + i * w + j];
                let base = ch * h2 * w2 + 2 * i * w2 + 2 * j;
                out[base] = v;
                out[base + 1] = v;
                out[base + w2] = v;
                out[base + w2 + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward(g: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let base = ch * h2 * w2 + 2 * i * w2 + 2 * j;
                dx[ch * h * w + i * w + j] +=
                    g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
            }
        }
    }
}

/// 2x2 average pooling with stride 2 (h and w must be even).
pub fn avgpool2x_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = ch * h * w + 2 * i * w + 2 * j;
                out[ch * h2 * w2 + i * w2 + j] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2x_backward(g: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let gi = 0.25 * g[ch * h2 * w2 + i * w2 + j];
                let base = ch * h * w + 2 * i * w + 2 * j;
                dx[base] += gi;
                dx[base + 1] += gi;
                dx[base + w] += gi;
                dx[base + w + 1] += gi;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// FFT-backed circular convolution
// ---------------------------------------------------------------------------

thread_local! {
    static FFT_CACHE: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    FFT_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

pub fn fft_real(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_plan(x.len(), false).process(&mut buf);
    buf
}

fn ifft_real_part(mut buf: Vec<Complex<f64>>) -> Vec<f64> {
    let n = buf.len();
    fft_plan(n, true).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.into_iter().map(|v| v.re * scale).collect()
}

/// result[k] = sum_j a[j] * b[(k - j) mod d]
pub fn circ_conv_forward(a: &[f64], b: &[f64]) -> Vec<f64> {
    let fa = fft_real(a);
    let fb = fft_real(b);
    let prod: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    ifft_real_part(prod)
}

/// da = g (*) flip(b); in the frequency domain that is FFT(g) * conj(FFT(b)).
pub fn circ_conv_grad(g: &[f64], other: &[f64]) -> Vec<f64> {
    let fg = fft_real(g);
    let fo = fft_real(other);
    let prod: Vec<Complex<f64>> = fg.iter().zip(&fo).map(|(x, y)| x * y.conj()).collect();
    ifft_real_part(prod)
}

/// Per-pixel circular convolution along the channel axis of [d, H, W] maps.
pub fn circ_conv_map_forward(a: &[f64], b: &[f64], d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * hw];
    let mut va = vec![0.0; d];
    let mut vb = vec![0.0; d];
    for p in 0..hw {
        for k in 0..d {
            va[k] = a[k * hw + p];
            vb[k] = b[k * hw + p];
        }
        let r = circ_conv_forward(&va, &vb);
        for k in 0..d {
            out[k * hw + p] = r[k];
        }
    }
    out
}

pub fn circ_conv_map_backward(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    d: usize,
    hw: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut vg = vec![0.0; d];
    let mut vo = vec![0.0; d];
    let mut da = da;
    let mut db = db;
    for p in 0..hw {
        for k in 0..d {
            vg[k] = g[k * hw + p];
        }
        if let Some(da) = da.as_deref_mut() {
            for k in 0..d {
                vo[k] = b[k * hw + p];
            }
            let r = circ_conv_grad(&vg, &vo);
            for k in 0..d {
                da[k * hw + p] += r[k];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for k in 0..d {
                vo[k] = a[k * hw + p];
            }
            let r = circ_conv_grad(&vg, &vo);
            for k in 0..d {
                db[k * hw + p] += r[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Count sketch
// ---------------------------------------------------------------------------

/// out[h[j], p] += s[j] * x[j, p] for every pixel p (hw == 1 gives the vector case).
pub fn count_sketch_forward(
    x: &[f64],
    c: usize,
    hw: usize,
    d_out: usize,
    hash: &[usize],
    sign: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; d_out * hw];
    for j in 0..c {
        let (hj, sj) = (hash[j], sign[j]);
        let src = &x[j * hw..(j + 1) * hw];
        let dst = &mut out[hj * hw..(hj + 1) * hw];
        for (o, v) in dst.iter_mut().zip(src) {
            *o += sj * v;
        }
    }
    out
}

pub fn count_sketch_backward(
    g: &[f64],
    c: usize,
    hw: usize,
    hash: &[usize],
    sign: &[f64],
    dx: &mut [f64],
) {
    for j in 0..c {
        let (hj, sj) = (hash[j], sign[j]);
        let src = &g[hj * hw..(hj + 1) * hw];
        let dst = &mut dx[j * hw..(j + 1) * hw];
        for (d, v) in dst.iter_mut().zip(src) {
            *d += sj * v;
        }
    }
}

// ---------------------------------------------------------------------------
// Channel-vector normalizations used by the bilinear fusion pipeline
// ---------------------------------------------------------------------------

/// Mathematical sign: -1, 0, or +1 (unlike `f64::signum`, which maps 0 to 1).
pub fn math_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// sign(x) * sqrt(|x| + eps), elementwise.
pub fn signed_sqrt_forward(x: &[f64], eps: f64) -> Vec<f64> {
    x.iter().map(|&v| math_sign(v) * (v.abs() + eps).sqrt()).collect()
}

pub fn signed_sqrt_backward(g: &[f64], x: &[f64], eps: f64, dx: &mut [f64]) {
    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(x) {
        *d += gi * 0.5 / (xi.abs() + eps).sqrt();
    }
}

/// Normalize each pixel's channel vector of [d, H, W] to unit L2 norm,
/// clamping the norm from below. Returns (out, norms).
pub fn l2norm_channels_forward(x: &[f64], d: usize, hw: usize, clamp: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; d * hw];
    let mut norms = vec![0.0; hw];
    for p in 0..hw {
        let mut s = 0.0;
        for k in 0..d {
            let v = x[k * hw + p];
            s += v * v;
        }
        let n = s.sqrt().max(clamp);
        norms[p] = n;
        for k in 0..d {
            out[k * hw + p] = x[k * hw + p] / n;
        }
    }
    (out, norms)
}

pub fn l2norm_channels_backward(
    g: &[f64],
    x: &[f64],
    norms: &[f64],
    d: usize,
    hw: usize,
    clamp: f64,
    dx: &mut [f64],
) {
    for p in 0..hw {
        let n = norms[p];
        if n <= clamp {
            // Clamped region: y = x / clamp is linear.
            for k in 0..d {
                dx[k * hw + p] += g[k * hw + p] / clamp;
            }
            continue;
        }
        let mut dot = 0.0;
        for k in 0..d {
            dot += g[k * hw + p] * x[k * hw + p];
        }
        let n3 = n * n * n;
        for k in 0..d {
            dx[k * hw + p] += g[k * hw + p] / n - x[k * hw + p] * dot / n3;
        }
    }
}

// ---------------------------------------------------------------------------
// Attention helpers
// ---------------------------------------------------------------------------

/// y[c,h,w] = x[c,h,w] * gate[c]
pub fn mul_channel_forward(x: &[f64], gate: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let gch = gate[ch];
        for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *o = gch * v;
        }
    }
    out
}

pub fn mul_channel_backward(
    g: &[f64],
    x: &[f64],
    gate: &[f64],
    c: usize,
    hw: usize,
    dx: Option<&mut [f64]>,
    dgate: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dgate = dgate;
    for ch in 0..c {
        let r = ch * hw..(ch + 1) * hw;
        if let Some(dx) = dx.as_deref_mut() {
            let gch = gate[ch];
            for (d, gi) in dx[r.clone()].iter_mut().zip(&g[r.clone()]) {
                *d += gch * gi;
            }
        }
        if let Some(dgate) = dgate.as_deref_mut() {
            dgate[ch] += g[r.clone()]
                .iter()
                .zip(&x[r.clone()])
                .map(|(gi, xi)| gi * xi)
                .sum::<f64>();
        }
    }
}

/// y[c,h,w] = x[c,h,w] * s[h,w]
pub fn mul_spatial_forward(x: &[f64], s: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for (p, sp) in s.iter().enumerate() {
            out[ch * hw + p] = x[ch * hw + p] * sp;
        }
    }
    out
}

pub fn mul_spatial_backward(
    g: &[f64],
    x: &[f64],
    s: &[f64],
    c: usize,
    hw: usize,
    dx: Option<&mut [f64]>,
    ds: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut ds = ds;
    for ch in 0..c {
        if let Some(dx) = dx.as_deref_mut() {
            for (p, sp) in s.iter().enumerate() {
                dx[ch * hw + p] += g[ch * hw + p] * sp;
            }
        }
        if let Some(ds) = ds.as_deref_mut() {
            for (p, d) in ds.iter_mut().enumerate() {
                *d += g[ch * hw + p] * x[ch * hw + p];
            }
        }
    }
}

/// y[h,w] = sum_s p[s] * q[s,h,w]
pub fn weighted_plane_sum_forward(q: &[f64], p: &[f64], s: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw];
    for i in 0..s {
        let pi = p[i];
        for (o, v) in out.iter_mut().zip(&q[i * hw..(i + 1) * hw]) {
            *o += pi * v;
        }
    }
    out
}

pub fn weighted_plane_sum_backward(
    g: &[f64],
    q: &[f64],
    p: &[f64],
    s: usize,
    hw: usize,
    dq: Option<&mut [f64]>,
    dp: Option<&mut [f64]>,
) {
    let mut dq = dq;
    let mut dp = dp;
    for i in 0..s {
        if let Some(dq) = dq.as_deref_mut() {
            let pi = p[i];
            for (d, gi) in dq[i * hw..(i + 1) * hw].iter_mut().zip(g) {
                *d += pi * gi;
            }
        }
        if let Some(dp) = dp.as_deref_mut() {
            dp[i] += q[i * hw..(i + 1) * hw]
                .iter()
                .zip(g)
                .map(|(qi, gi)| qi * gi)
                .sum::<f64>();
        }
    }
}

/// Degenerate (max == min within tolerance) maps normalize to all ones so the
/// attention multiply becomes a no-op instead of erasing features.
pub const MINMAX_DEGENERATE_TOL: f64 = 1e-12;

/// Min-max normalize a 2-D map to [0,1]. Returns (out, argmin, argmax, range)
/// with `range == 0` flagging the degenerate path. First occurrence wins the
/// argmin/argmax so the backward pass is deterministic.
pub fn minmax_norm_forward(x: &[f64]) -> (Vec<f64>, usize, usize, f64) {
    let mut imin = 0;
    let mut imax = 0;
    for (i, &v) in x.iter().enumerate() {
        if v < x[imin] {
            imin = i;
        }
        if v > x[imax] {
            imax = i;
        }
    }
    let (lo, hi) = (x[imin], x[imax]);
    let range = hi - lo;
    if range <= MINMAX_DEGENERATE_TOL * 1f64.max(hi.abs()).max(lo.abs()) {
        return (vec![1.0; x.len()], imin, imax, 0.0);
    }
    let out = x.iter().map(|&v| (v - lo) / range).collect();
    (out, imin, imax, range)
}

pub fn minmax_norm_backward(
    g: &[f64],
    y: &[f64],
    imin: usize,
    imax: usize,
    range: f64,
    dx: &mut [f64],
) {
    if range == 0.0 {
        return; // constant output, zero gradient
    }
    let gsum: f64 = g.iter().sum();
    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
    for (d, gi) in dx.iter_mut().zip(g) {
        *d += gi / range;
    }
    dx[imin] += (gy - gsum) / range;
    dx[imax] -= gy / range;
}
