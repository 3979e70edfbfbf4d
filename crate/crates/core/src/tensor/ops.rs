use rayon::prelude::*;

use super::{ConvSpec, Tensor};
use crate::error::{Error, Result};

fn check_conv(input: &Tensor, weights: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, layer expects {}",
                input.channels(),
                spec.in_channels
            ),
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weights {:?}, layer expects {:?}",
                weights.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {} entries, layer expects {}",
                bias.len(),
                spec.out_channels
            ),
        ));
    }
    spec.output_hw(input.height(), input.width())
        .filter(|&(h, w)| h > 0 && w > 0)
        .ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "{}x{} input too small for {}x{} kernel with pad {}",
                    input.height(),
                    input.width(),
                    spec.kernel_h,
                    spec.kernel_w,
                    spec.pad
                ),
            )
        })
}

/// Range of output columns `ox` whose source column `ox + k - pad` lies in `[0, width)`.
#[inline]
fn valid_span(k: usize, pad: usize, width: usize, out_width: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (width + pad).saturating_sub(k).min(out_width);
    (lo, hi.max(lo))
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stride-1 zero-padded cross-correlation plus per-channel bias.
///
/// `weights` is `[Cout, Cin, Kh, Kw]`. Output planes are computed
/// independently, so the result does not depend on the thread count.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    let (ho, wo) = check_conv(input, weights, bias, spec)?;
    let [n, cin, h, w] = input.shape();
    let cout = spec.out_channels;
    let (kh, kw, pad) = (spec.kernel_h, spec.kernel_w, spec.pad);
    let wdata = weights.data();
    let mut out = Tensor::zeros([n, cout, ho, wo]);

    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let (b, co) = (plane_idx / cout, plane_idx % cout);
            out_plane.fill(bias[co]);
            for oy in 0..ho {
                let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                for ci in 0..cin {
                    let in_plane = input.plane(b, ci);
                    let kbase = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let in_row = &in_plane[(iy - pad) * w..(iy - pad + 1) * w];
                        for kx in 0..kw {
                            let (lo, hi) = valid_span(kx, pad, w, wo);
                            if lo >= hi {
                                continue;
                            }
                            let wv = wdata[kbase + ky * kw + kx];
                            let src = &in_row[lo + kx - pad..hi + kx - pad];
                            axpy(&mut out_row[lo..hi], wv, src);
                        }
                    }
                }
            }
        });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Gradients of [`conv2d`] given the upstream gradient and the forward inputs.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let zero_bias = vec![0.0; spec.out_channels];
    let (ho, wo) = check_conv(input, weights, &zero_bias, spec)?;
    let [n, cin, h, w] = input.shape();
    let cout = spec.out_channels;
    if grad_out.shape() != [n, cout, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?}, forward output was {:?}",
                grad_out.shape(),
                [n, cout, ho, wo]
            ),
        ));
    }
    let (kh, kw, pad) = (spec.kernel_h, spec.kernel_w, spec.pad);
    let wdata = weights.data();

    // d input[b, ci, iy, ix] = sum w[co, ci, ky, kx] * g[b, co, iy + pad - ky, ix + pad - kx]
    let mut grad_input = Tensor::zeros(input.shape());
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, gi_plane)| {
            let (b, ci) = (plane_idx / cin, plane_idx % cin);
            for iy in 0..h {
                let gi_row = &mut gi_plane[iy * w..(iy + 1) * w];
                for co in 0..cout {
                    let g_plane = grad_out.plane(b, co);
                    let kbase = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let oy = iy + pad;
                        if oy < ky || oy - ky >= ho {
                            continue;
                        }
                        let g_row = &g_plane[(oy - ky) * wo..(oy - ky + 1) * wo];
                        for kx in 0..kw {
                            // ix = ox + kx - pad for ox in the forward valid span
                            let (lo, hi) = valid_span(kx, pad, w, wo);
                            if lo >= hi {
                                continue;
                            }
                            let wv = wdata[kbase + ky * kw + kx];
                            axpy(&mut gi_row[lo + kx - pad..hi + kx - pad], wv, &g_row[lo..hi]);
                        }
                    }
                }
            }
        });

    let mut grad_weights = Tensor::zeros(weights.shape());
    grad_weights
        .data_mut()
        .par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(pair, gw)| {
            let (co, ci) = (pair / cin, pair % cin);
            for b in 0..n {
                let g_plane = grad_out.plane(b, co);
                let in_plane = input.plane(b, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = valid_span(kx, pad, w, wo);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let g_row = &g_plane[oy * wo + lo..oy * wo + hi];
                            let in_row = &in_plane[(iy - pad) * w + lo + kx - pad..(iy - pad) * w + hi + kx - pad];
                            acc += dot(g_row, in_row);
                        }
                        gw[ky * kw + kx] += acc;
                    }
                }
            }
        });

    let grad_bias = (0..cout)
        .map(|co| (0..n).map(|b| grad_out.plane(b, co).iter().sum::<f64>()).sum())
        .collect();

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Concatenates along the channel axis, in the given order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape();
    for t in inputs {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for t in inputs {
            let per_sample = t.channels() * h * w;
            data.extend_from_slice(&t.data()[b * per_sample..(b + 1) * per_sample]);
        }
    }
    Tensor::new([n, c_total, h, w], data)
}

/// Inverse of [`concat_channels`]: slices `grad` into pieces with the given channel counts.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = grad.shape();
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            format!("{channels:?} does not partition {c} channels"),
        ));
    }
    let mut parts: Vec<Vec<f64>> = channels
        .iter()
        .map(|&ci| Vec::with_capacity(n * ci * h * w))
        .collect();
    let mut offset = 0;
    for _ in 0..n {
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[offset..offset + ci * h * w]);
            offset += ci * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &ci)| Tensor::new([n, ci, h, w], data))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    a.expect_same_shape(b, "elementwise")?;
    a.zip_map(b, |x, y| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    })
}

/// Gradients with respect to both operands.
pub fn elementwise_backward(
    a: &Tensor,
    b: &Tensor,
    op: BinaryOp,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(b, "elementwise_backward")?;
    a.expect_same_shape(grad_out, "elementwise_backward")?;
    Ok(match op {
        BinaryOp::Add => (grad_out.clone(), grad_out.clone()),
        BinaryOp::Sub => (grad_out.clone(), grad_out.map(|g| -g)),
        BinaryOp::Mul => (grad_out.zip_map(b, |g, y| g * y)?, grad_out.zip_map(a, |g, x| g * x)?),
    })
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v + c)
}

/// Mean of squared differences over every element.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "mse_loss")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `grad_out · 2 (pred − target) / count`.
pub fn mse_loss_backward(pred: &Tensor, target: &Tensor, grad_out: f64) -> Result<Tensor> {
    pred.expect_same_shape(target, "mse_loss_backward")?;
    let scale = 2.0 * grad_out / pred.len() as f64;
    pred.zip_map(target, |p, t| scale * (p - t))
}
