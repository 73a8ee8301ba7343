//! Forward kernels and their vector-Jacobian products.
//!
//! All kernels operate on NCHW tensors. Convolution uses cross-correlation
//! semantics (the kernel is not flipped).

use super::Tensor;
use crate::error::{dim_err, param_err, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMode {
    /// Training: random masks, inverted scaling.
    Train,
    /// Dropout kept on at inference time for Monte-Carlo sampling.
    McEnabled,
    /// Identity.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max2x2,
    GlobalAvg,
}

/// Output extent of a convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose source column `ox*stride + k - pad`
/// falls inside `[0, len)`. Returned as a half-open range.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ox*stride + k >= pad
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ox*stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len + pad - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(dim_err!(
            "conv2d: input has {cin} channels but kernel expects {kcin}"
        ));
    }
    if bias.len() != cout {
        return Err(dim_err!(
            "conv2d: bias has {} entries for {cout} output channels",
            bias.len()
        ));
    }
    if stride == 0 {
        return Err(param_err!("conv2d: stride must be positive"));
    }
    let oh = conv_output_len(h, kh, stride, padding)
        .ok_or_else(|| dim_err!("conv2d: kernel height {kh} exceeds padded input {h}+2*{padding}"))?;
    let ow = conv_output_len(w, kw, stride, padding)
        .ok_or_else(|| dim_err!("conv2d: kernel width {kw} exceeds padded input {w}+2*{padding}"))?;
    Ok((b, cin, h, w, cout, kh, kw, oh, ow))
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, w, cout, kh, kw, oh, ow) = check_conv(input, kernel, bias, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
            out_plane.fill(bias.data()[co]);
            for ci in 0..cin {
                let in_plane = &x[(n * cin + ci) * h * w..(n * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                for (o, &i) in out_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&in_row[ix0..ix0 + len])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
/// The input gradient is only computed when `need_input` is set.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = kernel.dims4()?;
    let (_, _, oh, ow) = grad_out.dims4()?;
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = if need_input {
        Some(vec![0.0f32; x.len()])
    } else {
        None
    };
    let mut gk = vec![0.0f32; k.len()];
    let mut gb = vec![0.0f32; cout];
    for n in 0..b {
        for co in 0..cout {
            let g_plane = &g[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
            gb[co] += g_plane.iter().sum::<f32>();
            for ci in 0..cin {
                let plane_off = (n * cin + ci) * h * w;
                let in_plane = &x[plane_off..plane_off + h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = k[widx];
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, padding);
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + len];
                                let g_seg = &g_row[ox_lo..ox_hi];
                                acc += g_seg.iter().zip(in_row).map(|(a, b)| a * b).sum::<f32>();
                                if let Some(gx) = gx.as_mut() {
                                    let gx_row =
                                        &mut gx[plane_off + iy * w + ix0..plane_off + iy * w + ix0 + len];
                                    for (d, &gv) in gx_row.iter_mut().zip(g_seg) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - padding;
                                    acc += g_row[ox] * in_plane[iy * w + ix];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[plane_off + iy * w + ix] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    let gx = match gx {
        Some(data) => Some(Tensor::new(input.shape().to_vec(), data)?),
        None => None,
    };
    Ok((
        gx,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at zero is taken as zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu_backward shape")
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Softmax over the last (class) axis, accumulated in `f64`.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let classes = *input
        .shape()
        .last()
        .ok_or_else(|| dim_err!("softmax of a scalar"))?;
    if classes == 0 {
        return Err(dim_err!("softmax over an empty axis"));
    }
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(classes) {
        out.extend(softmax_f64(row).into_iter().map(|p| p as f32));
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Numerically stable softmax of one row of logits.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let classes = *output.shape().last().unwrap();
    let mut data = Vec::with_capacity(output.len());
    for (y, g) in output.data().chunks(classes).zip(grad_out.data().chunks(classes)) {
        let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        data.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)));
    }
    Tensor::new(output.shape().to_vec(), data).unwrap()
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the input element it came from.
pub fn max_pool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("max2x2 pooling needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn max_pool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    gx
}

/// Mean over the spatial extent: `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let area = (h * w) as f32;
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().sum::<f32>() / area)
        .collect();
    Tensor::new(vec![b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let area = input_shape[2] * input_shape[3];
    let scale = 1.0 / area as f32;
    let mut data = Vec::with_capacity(grad_out.len() * area);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, area));
    }
    Tensor::new(input_shape.to_vec(), data).unwrap()
}

pub fn pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    match kind {
        PoolKind::Max2x2 => max_pool2x2(input).map(|(t, _)| t),
        PoolKind::GlobalAvg => global_avg_pool(input),
    }
}

/// Leading axis is the batch; all trailing axes are flattened into features.
fn features_of(input: &Tensor) -> Result<(usize, usize)> {
    let b = *input
        .shape()
        .first()
        .ok_or_else(|| dim_err!("linear on a scalar"))?;
    if b == 0 {
        return Err(dim_err!("linear on an empty batch"));
    }
    Ok((b, input.len() / b))
}

/// `out = input · weightᵀ + bias`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f) = features_of(input)?;
    let (k, wf) = match *weight.shape() {
        [k, wf] => (k, wf),
        _ => return Err(dim_err!("linear weight must be 2-D, got {:?}", weight.shape())),
    };
    if wf != f {
        return Err(dim_err!("linear: input has {f} features, weight expects {wf}"));
    }
    if bias.len() != k {
        return Err(dim_err!("linear: bias has {} entries for {k} outputs", bias.len()));
    }
    let mut out = Vec::with_capacity(b * k);
    for row in input.data().chunks(f) {
        for (j, w_row) in weight.data().chunks(f).enumerate() {
            out.push(bias.data()[j] + row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f32>());
        }
    }
    Tensor::new(vec![b, k], out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (_, f) = features_of(input).unwrap();
    let k = weight.shape()[0];
    let mut gx = vec![0.0f32; input.len()];
    let mut gw = vec![0.0f32; weight.len()];
    let mut gb = vec![0.0f32; k];
    for ((x_row, g_row), gx_row) in input
        .data()
        .chunks(f)
        .zip(grad_out.data().chunks(k))
        .zip(gx.chunks_mut(f))
    {
        for (j, &g) in g_row.iter().enumerate() {
            gb[j] += g;
            let w_row = &weight.data()[j * f..(j + 1) * f];
            for ((d, &wv), (gwv, &xv)) in gx_row
                .iter_mut()
                .zip(w_row)
                .zip(gw[j * f..(j + 1) * f].iter_mut().zip(x_row))
            {
                *d += g * wv;
                *gwv += g * xv;
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).unwrap(),
        Tensor::new(weight.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![k], gb).unwrap(),
    )
}

/// Inverted dropout. Returns the output and the multiplicative mask that was
/// applied (`0` for dropped elements, `1/(1-p)` for survivors); the mask is
/// `None` when the operation is the identity.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    p: f32,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<f32>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(param_err!("dropout probability must lie in [0, 1), got {p}"));
    }
    if p == 0.0 || mode == DropoutMode::Disabled {
        return Ok((input.clone().with_requires_grad(false), None));
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..input.len())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), data)?, Some(mask)))
}
