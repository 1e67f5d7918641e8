//! Layer forward and backward passes.
//!
//! Convolutions work on a single sample `[C, H, W]`; batches are looped by the
//! caller. Dense, batch-norm and dropout take `[B, F]` batches.

use rand::Rng;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Accumulators for a layer's weight and bias gradients.
pub struct LayerGrads<'a, T> {
    pub weight: &'a mut Tensor<T>,
    pub bias: &'a mut Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv_out(op: &'static str, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("kernel {k} does not fit padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.channels {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < g.w as isize {
                            line[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: Geometry, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.channels {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn kernel_dims<T: Real>(op: &'static str, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match weight.shape()[..] {
        [a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        _ => Err(Error::shape(
            op,
            format!("weight must be [A, B, k, k], got {:?}", weight.shape()),
        )),
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::shape(
                op,
                format!("bias {:?} does not match {n} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Cross-correlation with weight `[C_out, C_in, k, k]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("conv2d")?;
    let (c_out, c_in, k) = kernel_dims("conv2d", weight)?;
    if c_in != c {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    check_bias("conv2d", bias, c_out)?;
    let g = Geometry {
        channels: c,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: conv_out("conv2d", h, k, stride, padding)?,
        wo: conv_out("conv2d", w, k, stride, padding)?,
    };
    let plane = g.ho * g.wo;
    let mut cols = vec![T::zero(); c * k * k * plane];
    im2col(input.data(), g, &mut cols);
    let mut out = vec![T::zero(); c_out * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    gemm_nn(c_out, c * k * k, plane, weight.data(), &cols, &mut out);
    Tensor::new(vec![c_out, g.ho, g.wo], out)
}

/// Returns the input gradient; accumulates weight/bias gradients when `acc` is given.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    acc: Option<LayerGrads<'_, T>>,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("conv2d_backward")?;
    let (c_out, _, k) = kernel_dims("conv2d_backward", weight)?;
    let g = Geometry {
        channels: c,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: conv_out("conv2d_backward", h, k, stride, padding)?,
        wo: conv_out("conv2d_backward", w, k, stride, padding)?,
    };
    if grad_out.shape() != [c_out, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} vs expected {:?}",
                grad_out.shape(),
                [c_out, g.ho, g.wo]
            ),
        ));
    }
    let plane = g.ho * g.wo;
    let ckk = c * k * k;
    if let Some(acc) = acc {
        let mut cols = vec![T::zero(); ckk * plane];
        im2col(input.data(), g, &mut cols);
        gemm_nt(c_out, plane, ckk, grad_out.data(), &cols, acc.weight.data_mut());
        for (co, chunk) in grad_out.data().chunks(plane).enumerate() {
            acc.bias.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let mut dcols = vec![T::zero(); ckk * plane];
    gemm_tn(ckk, c_out, plane, weight.data(), grad_out.data(), &mut dcols);
    let mut dx = vec![T::zero(); c * h * w];
    col2im(&dcols, g, &mut dx);
    Tensor::new(vec![c, h, w], dx)
}

/// Transposed convolution with weight `[C_in, C_out, k, k]`; output size
/// `(H − 1)·s − 2p + k`. With shared weights this is the adjoint of [`conv2d`].
pub fn deconv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, hi, wi) = input.dims3("deconv2d")?;
    let (wc_in, c_out, k) = kernel_dims("deconv2d", weight)?;
    if wc_in != c_in {
        return Err(Error::shape(
            "deconv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("deconv2d", "stride must be at least 1"));
    }
    check_bias("deconv2d", bias, c_out)?;
    let full_h = (hi - 1) * stride + k;
    let full_w = (wi - 1) * stride + k;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return Err(Error::shape(
            "deconv2d",
            format!("padding {padding} leaves no output for input {:?}", input.shape()),
        ));
    }
    let g = Geometry {
        channels: c_out,
        h: full_h - 2 * padding,
        w: full_w - 2 * padding,
        k,
        stride,
        pad: padding,
        ho: hi,
        wo: wi,
    };
    let plane = hi * wi;
    let ckk = c_out * k * k;
    let mut cols = vec![T::zero(); ckk * plane];
    gemm_tn(ckk, c_in, plane, weight.data(), input.data(), &mut cols);
    let mut out = vec![T::zero(); c_out * g.h * g.w];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(g.h * g.w).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    col2im(&cols, g, &mut out);
    Tensor::new(vec![c_out, g.h, g.w], out)
}

pub fn deconv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    acc: Option<LayerGrads<'_, T>>,
) -> Result<Tensor<T>> {
    let (c_in, hi, wi) = input.dims3("deconv2d_backward")?;
    let (_, c_out, k) = kernel_dims("deconv2d_backward", weight)?;
    let (gc, gh, gw) = grad_out.dims3("deconv2d_backward")?;
    let eh = (hi - 1) * stride + k;
    let ew = (wi - 1) * stride + k;
    if gc != c_out || gh + 2 * padding != eh || gw + 2 * padding != ew {
        return Err(Error::shape(
            "deconv2d_backward",
            format!("grad_out {:?} does not match input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let g = Geometry {
        channels: c_out,
        h: gh,
        w: gw,
        k,
        stride,
        pad: padding,
        ho: hi,
        wo: wi,
    };
    let plane = hi * wi;
    let ckk = c_out * k * k;
    let mut dcols = vec![T::zero(); ckk * plane];
    im2col(grad_out.data(), g, &mut dcols);
    if let Some(acc) = acc {
        gemm_nt(c_in, plane, ckk, input.data(), &dcols, acc.weight.data_mut());
        for (co, chunk) in grad_out.data().chunks(gh * gw).enumerate() {
            acc.bias.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let mut dx = vec![T::zero(); c_in * plane];
    gemm_nn(c_in, ckk, plane, weight.data(), &dcols, &mut dx);
    Tensor::new(vec![c_in, hi, wi], dx)
}

fn as_batch<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [a] => Ok((1, a)),
        [b, a] => Ok((b, a)),
        _ => Err(Error::shape(op, format!("expected [F] or [B, F], got {:?}", x.shape()))),
    }
}

/// `y = W x + b` for `x` of shape `[a]` or `[B, a]`, weight `[b, a]`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, a) = as_batch("dense", input)?;
    let (b, wa) = weight.dims2("dense")?;
    if wa != a || bias.len() != b {
        return Err(Error::shape(
            "dense",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(batch * b);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm_nt(batch, a, b, input.data(), weight.data(), &mut out);
    let shape = if input.shape().len() == 1 {
        vec![b]
    } else {
        vec![batch, b]
    };
    Tensor::new(shape, out)
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    acc: Option<LayerGrads<'_, T>>,
) -> Result<Tensor<T>> {
    let (batch, a) = as_batch("dense_backward", input)?;
    let (b, _) = weight.dims2("dense_backward")?;
    if grad_out.len() != batch * b {
        return Err(Error::shape(
            "dense_backward",
            format!("grad_out {:?} vs [{batch}, {b}]", grad_out.shape()),
        ));
    }
    if let Some(acc) = acc {
        gemm_tn(b, batch, a, grad_out.data(), input.data(), acc.weight.data_mut());
        for row in grad_out.data().chunks(b) {
            for (g, &d) in acc.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    let mut dx = vec![T::zero(); batch * a];
    gemm_nn(batch, b, a, grad_out.data(), weight.data(), &mut dx);
    Tensor::new(input.shape().to_vec(), dx)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved state for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: super::Mode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch: usize,
    features: usize,
}

/// Batch normalisation over `[B, F]`. Train mode normalises with the biased
/// batch variance and folds the unbiased one into the running estimate.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (batch, f) = input.dims2("batchnorm")?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", &*running_mean),
        ("running_var", &*running_var),
    ] {
        if t.len() != f {
            return Err(Error::shape(
                "batchnorm",
                format!("{name} {:?} vs {f} features", t.shape()),
            ));
        }
    }
    let eps = T::lit(BN_EPS);
    let x = input.data();
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::InvalidBatch(format!(
                    "train-mode batch norm needs at least 2 samples, got {batch}"
                )));
            }
            let nb = T::from_usize(batch).unwrap();
            let mut mean = vec![T::zero(); f];
            for row in x.chunks(f) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nb);
            let mut var = vec![T::zero(); f];
            for row in x.chunks(f) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = nb / (nb - T::one());
            for j in 0..f {
                let biased = var[j] / nb;
                let rm = &mut running_mean.data_mut()[j];
                *rm = (T::one() - mom) * *rm + mom * mean[j];
                let rv = &mut running_var.data_mut()[j];
                *rv = (T::one() - mom) * *rv + mom * biased * unbias;
                var[j] = biased;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); batch * f];
    let mut out = vec![T::zero(); batch * f];
    for b in 0..batch {
        for j in 0..f {
            let xh = (x[b * f + j] - mean[j]) * inv_std[j];
            xhat[b * f + j] = xh;
            out[b * f + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(vec![batch, f], out)?,
        BatchNormCache {
            mode,
            xhat,
            inv_std,
            batch,
            features: f,
        },
    ))
}

pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    acc: Option<LayerGrads<'_, T>>,
) -> Result<Tensor<T>> {
    let (batch, f) = (cache.batch, cache.features);
    if grad_out.len() != batch * f {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("grad_out {:?} vs [{batch}, {f}]", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut sum_dy = vec![T::zero(); f];
    let mut sum_dy_xhat = vec![T::zero(); f];
    for b in 0..batch {
        for j in 0..f {
            sum_dy[j] += dy[b * f + j];
            sum_dy_xhat[j] += dy[b * f + j] * cache.xhat[b * f + j];
        }
    }
    if let Some(acc) = acc {
        for j in 0..f {
            acc.weight.data_mut()[j] += sum_dy_xhat[j];
            acc.bias.data_mut()[j] += sum_dy[j];
        }
    }
    let mut dx = vec![T::zero(); batch * f];
    match cache.mode {
        Mode::Train => {
            let nb = T::from_usize(batch).unwrap();
            for b in 0..batch {
                for j in 0..f {
                    let i = b * f + j;
                    dx[i] = gamma.data()[j] * cache.inv_std[j] / nb
                        * (nb * dy[i] - sum_dy[j] - cache.xhat[i] * sum_dy_xhat[j]);
                }
            }
        }
        Mode::Eval => {
            for b in 0..batch {
                for j in 0..f {
                    let i = b * f + j;
                    dx[i] = dy[i] * gamma.data()[j] * cache.inv_std[j];
                }
            }
        }
    }
    Tensor::new(vec![batch, f], dx)
}

/// Inverted dropout. Returns the output and, in train mode, the per-element
/// scale (0 or `1/(1−rate)`) needed by [`dropout_backward`].
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Real>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    if let Some(mask) = mask {
        for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
            *d *= m;
        }
    }
    dx
}

fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[C, H, W]` with half-pixel centres. Equal sizes are an exact copy.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("resize_bilinear")?;
    if ho == 0 || wo == 0 {
        return Err(Error::shape("resize_bilinear", "target size must be non-zero"));
    }
    if (h, w) == (ho, wo) {
        return Ok(input.clone());
    }
    let ty = resize_taps(h, ho);
    let tx = resize_taps(w, wo);
    let x = input.data();
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out[(ch * ho + oy) * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn resize_bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (c, ho, wo) = grad_out.dims3("resize_bilinear_backward")?;
    if (h, w) == (ho, wo) {
        return Ok(grad_out.clone());
    }
    let ty = resize_taps(h, ho);
    let tx = resize_taps(w, wo);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let d = g[(ch * ho + oy) * wo + ox];
                dst[y0 * w + x0] += d * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += d * (T::one() - fy) * fx;
                dst[y1 * w + x0] += d * fy * (T::one() - fx);
                dst[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}
