//! Forward and backward kernels for convolutions and batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, transpose, ConvGeometry, Scalar, Tensor};

fn expect_rank4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::invalid(format!(
            "{op} expects a rank-4 tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [_, c, h, w] = expect_rank4("conv2d", x)?;
    let [_, kc, kh, kw] = expect_rank4("conv2d", k)?;
    if c != kc {
        return Err(Error::shape("conv2d", x.shape(), k.shape()));
    }
    ConvGeometry::forward(c, h, w, kh, kw, stride, pad)
}

fn transpose_geometry<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [_, f, h, w] = expect_rank4("conv2d_transpose", x)?;
    let [kf, c, kh, kw] = expect_rank4("conv2d_transpose", k)?;
    if f != kf {
        return Err(Error::shape("conv2d_transpose", x.shape(), k.shape()));
    }
    ConvGeometry::for_transpose(c, h, w, kh, kw, stride, pad)
}

/// Cross-correlation of `x: [N,C,H,W]` with `k: [F,C,kh,kw]` under zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = conv_geometry(x, k, stride, pad)?;
    let n = x.shape()[0];
    let f = k.shape()[0];
    let p = g.out_len();
    let mut out = vec![T::zero(); n * f * p];
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for (xi, oi) in x.data().chunks(g.in_len()).zip(out.chunks_mut(f * p)) {
        g.im2col(xi, &mut cols);
        matmul_into(k.data(), &cols, oi, f, g.patch_len(), p);
    }
    Tensor::new(vec![n, f, g.out_h, g.out_w], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geometry(x, k, stride, pad)?;
    let f = k.shape()[0];
    let (p, ckk) = (g.out_len(), g.patch_len());
    let kt = transpose(k.data(), f, ckk);
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dk = need_k.then(|| vec![T::zero(); k.numel()]);
    let mut cols = vec![T::zero(); ckk * p];
    for (n, (xi, gyi)) in x.data().chunks(g.in_len()).zip(gy.data().chunks(f * p)).enumerate() {
        if let Some(dk) = dk.as_mut() {
            g.im2col(xi, &mut cols);
            let cols_t = transpose(&cols, ckk, p);
            matmul_into(gyi, &cols_t, dk, f, p, ckk);
        }
        if let Some(dx) = dx.as_mut() {
            cols.fill(T::zero());
            matmul_into(&kt, gyi, &mut cols, ckk, f, p);
            g.col2im(&cols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dk.map(|d| Tensor::new(k.shape().to_vec(), d)).transpose()?,
    ))
}

/// Fractionally strided convolution: the exact adjoint of [`conv2d`] with the
/// same kernel, stride and padding. `x: [N,F,H,W]`, `k: [F,C,kh,kw]`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = transpose_geometry(x, k, stride, pad)?;
    let n = x.shape()[0];
    let f = k.shape()[0];
    let (p, ckk) = (g.out_len(), g.patch_len());
    let kt = transpose(k.data(), f, ckk);
    let mut out = vec![T::zero(); n * g.in_len()];
    let mut cols = vec![T::zero(); ckk * p];
    for (xi, oi) in x.data().chunks(f * p).zip(out.chunks_mut(g.in_len())) {
        cols.fill(T::zero());
        matmul_into(&kt, xi, &mut cols, ckk, f, p);
        g.col2im(&cols, oi);
    }
    Tensor::new(vec![n, g.channels, g.height, g.width], out)
}

pub(crate) fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = transpose_geometry(x, k, stride, pad)?;
    let f = k.shape()[0];
    let (p, ckk) = (g.out_len(), g.patch_len());
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dk = need_k.then(|| vec![T::zero(); k.numel()]);
    let mut cols = vec![T::zero(); ckk * p];
    for (n, (xi, gyi)) in x.data().chunks(f * p).zip(gy.data().chunks(g.in_len())).enumerate() {
        g.im2col(gyi, &mut cols);
        if let Some(dx) = dx.as_mut() {
            matmul_into(k.data(), &cols, &mut dx[n * f * p..(n + 1) * f * p], f, ckk, p);
        }
        if let Some(dk) = dk.as_mut() {
            let cols_t = transpose(&cols, ckk, p);
            matmul_into(xi, &cols_t, dk, f, p, ckk);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dk.map(|d| Tensor::new(k.shape().to_vec(), d)).transpose()?,
    ))
}

/// Normalized activations plus the per-channel statistics that produced them.
#[derive(Debug, Clone)]
pub struct BatchNormForward<T> {
    pub out: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased batch variance; empty when running statistics were used.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn bn_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::invalid(format!(
            "batch_norm expects [N, C, ...], got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let spatial = x.shape()[2..].iter().product();
    Ok((n, c, spatial))
}

/// Iterates the contiguous `[spatial]` slices of channel `c`.
fn channel_slices<T>(data: &[T], n: usize, c: usize, channels: usize, spatial: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |i| &data[(i * channels + c) * spatial..][..spatial])
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormForward<T>> {
    let (n, c, s) = bn_dims(x, gamma, beta)?;
    let m = n * s;
    if m < 2 {
        return Err(Error::invalid(format!(
            "batch_norm in train mode needs at least 2 values per channel, got batch {n}"
        )));
    }
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let sum: f64 = channel_slices(x.data(), n, ch, c, s)
            .flat_map(|sl| sl.iter())
            .map(|v| v.f64())
            .sum();
        let mu = sum / m as f64;
        let ss: f64 = channel_slices(x.data(), n, ch, c, s)
            .flat_map(|sl| sl.iter())
            .map(|v| (v.f64() - mu).powi(2))
            .sum();
        let biased = ss / m as f64;
        mean.push(T::of(mu));
        var.push(T::of(ss / (m - 1) as f64));
        inv_std.push(T::of(1.0 / (biased + eps).sqrt()));
    }
    let (xhat, out) = normalize(x, gamma, beta, &mean, &inv_std, c, s);
    Ok(BatchNormForward {
        out,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormForward<T>> {
    let (_, c, s) = bn_dims(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), running_mean.shape()));
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|v| T::of(1.0 / (v.f64() + eps).sqrt()))
        .collect();
    let (xhat, out) = normalize(x, gamma, beta, running_mean.data(), &inv_std, c, s);
    Ok(BatchNormForward {
        out,
        xhat,
        inv_std,
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
    })
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    c: usize,
    s: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut xhat = x.clone();
    let mut out = x.clone();
    for (blk, (xh, o)) in xhat
        .data_mut()
        .chunks_mut(s)
        .zip(out.data_mut().chunks_mut(s))
        .enumerate()
    {
        let ch = blk % c;
        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        for (h, y) in xh.iter_mut().zip(o.iter_mut()) {
            *h = (*h - mu) * is;
            *y = g * *h + b;
        }
    }
    (xhat, out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Scalar>(
    gy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (gy.shape()[0], gy.shape()[1]);
    let s: usize = gy.shape()[2..].iter().product();
    let m = (n * s) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (blk, (g, h)) in gy.data().chunks(s).zip(xhat.data().chunks(s)).enumerate() {
        let ch = blk % c;
        for (&gv, &hv) in g.iter().zip(h) {
            sum_dy[ch] += gv.f64();
            sum_dy_xhat[ch] += gv.f64() * hv.f64();
        }
    }
    let mut dx = gy.clone();
    for (blk, (d, h)) in dx.data_mut().chunks_mut(s).zip(xhat.data().chunks(s)).enumerate() {
        let ch = blk % c;
        let scale = gamma.data()[ch] * inv_std[ch];
        if batch_stats {
            let mean_dy = T::of(sum_dy[ch] / m);
            let mean_dy_xhat = T::of(sum_dy_xhat[ch] / m);
            for (dv, &hv) in d.iter_mut().zip(h) {
                *dv = scale * (*dv - mean_dy - hv * mean_dy_xhat);
            }
        } else {
            for dv in d.iter_mut() {
                *dv *= scale;
            }
        }
    }
    let dgamma = Tensor::new(vec![c], sum_dy_xhat.iter().map(|&v| T::of(v)).collect()).expect("c");
    let dbeta = Tensor::new(vec![c], sum_dy.iter().map(|&v| T::of(v)).collect()).expect("c");
    (dx, dgamma, dbeta)
}
