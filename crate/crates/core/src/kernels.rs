//! Raw numeric kernels: strided convolution, transposed convolution, affine
//! layers, pooling and stable softmax.
//!
//! Tensors follow the usual conventions: activations are `[C, H, W]`,
//! convolution weights `[C_out, C_in, kh, kw]`, transposed-convolution
//! weights `[C_in, C_out, kh, kw]`, affine weights `[M, N]` acting on
//! flattened inputs of length `N`. All kernels are single-sample; batching
//! happens one level up by running samples in parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid(format!("{what}: expected [C,H,W], got {s:?}"))),
    }
}

fn conv_weight(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, kh, kw] => Ok((*a, *b, *kh, *kw)),
        s => Err(Error::invalid(format!(
            "{what}: expected rank-4 weight, got {s:?}"
        ))),
    }
}

/// Output spatial extent of a strided convolution (floor division, as in the
/// usual framework convention).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output spatial extent of a transposed convolution.
pub fn convt_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad {
        return Err(Error::invalid(format!(
            "padding {pad} exceeds transposed output extent {grown}"
        )));
    }
    Ok(grown - 2 * pad)
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci_n, h, w) = chw(input, "conv2d input")?;
    let (co_n, wci, kh, kw) = conv_weight(weight, "conv2d weight")?;
    if wci != ci_n {
        return Err(Error::invalid(format!(
            "conv2d: weight expects {wci} input channels, input has {ci_n}"
        )));
    }
    if bias.shape() != [co_n] {
        return Err(Error::invalid(format!(
            "conv2d: bias shape {:?} does not match {co_n} output channels",
            bias.shape()
        )));
    }
    let oh_n = conv_out_dim(h, kh, stride, pad)?;
    let ow_n = conv_out_dim(w, kw, stride, pad)?;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; co_n * oh_n * ow_n];
    for co in 0..co_n {
        let out_plane = &mut out[co * oh_n * ow_n..][..oh_n * ow_n];
        out_plane.fill(bias.data()[co]);
        for ci in 0..ci_n {
            let in_plane = &x[ci * h * w..][..h * w];
            let w_block = &wt[(co * ci_n + ci) * kh * kw..][..kh * kw];
            for oh in 0..oh_n {
                let out_row = &mut out_plane[oh * ow_n..][..ow_n];
                for r in 0..kh {
                    let ih = (oh * stride + r) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[ih as usize * w..][..w];
                    let w_row = &w_block[r * kw..][..kw];
                    for (ow, out_v) in out_row.iter_mut().enumerate() {
                        let iw0 = (ow * stride) as isize - pad as isize;
                        let mut acc = 0.0f32;
                        for (c, &wv) in w_row.iter().enumerate() {
                            let iw = iw0 + c as isize;
                            if iw >= 0 && iw < w as isize {
                                acc += in_row[iw as usize] * wv;
                            }
                        }
                        *out_v += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![co_n, oh_n, ow_n], out)
}

/// Gradient of a strided convolution with respect to its input.
pub fn conv2d_backward_input(
    input_shape: &[usize],
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci_n, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::invalid(format!("conv2d input shape: expected [C,H,W], got {s:?}"))),
    };
    let (co_n, _, kh, kw) = conv_weight(weight, "conv2d weight")?;
    let (go_c, oh_n, ow_n) = chw(grad_out, "conv2d grad")?;
    if go_c != co_n {
        return Err(Error::invalid(format!(
            "conv2d grad has {go_c} channels, weight produces {co_n}"
        )));
    }
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = vec![0.0f32; ci_n * h * w];
    for co in 0..co_n {
        let go_plane = &go[co * oh_n * ow_n..][..oh_n * ow_n];
        for ci in 0..ci_n {
            let gi_plane = &mut gi[ci * h * w..][..h * w];
            let w_block = &wt[(co * ci_n + ci) * kh * kw..][..kh * kw];
            for oh in 0..oh_n {
                let go_row = &go_plane[oh * ow_n..][..ow_n];
                for r in 0..kh {
                    let ih = (oh * stride + r) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let gi_row = &mut gi_plane[ih as usize * w..][..w];
                    let w_row = &w_block[r * kw..][..kw];
                    for (ow, &g) in go_row.iter().enumerate() {
                        let iw0 = (ow * stride) as isize - pad as isize;
                        for (c, &wv) in w_row.iter().enumerate() {
                            let iw = iw0 + c as isize;
                            if iw >= 0 && iw < w as isize {
                                gi_row[iw as usize] += g * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![ci_n, h, w], gi)
}

/// Gradients of a strided convolution with respect to weight and bias.
pub fn conv2d_backward_params(
    input: &Tensor,
    weight_shape: &[usize],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (ci_n, h, w) = chw(input, "conv2d input")?;
    let (co_n, wci, kh, kw) = match weight_shape {
        [a, b, kh, kw] => (*a, *b, *kh, *kw),
        s => return Err(Error::invalid(format!("conv2d weight shape: expected rank 4, got {s:?}"))),
    };
    let (go_c, oh_n, ow_n) = chw(grad_out, "conv2d grad")?;
    if go_c != co_n || wci != ci_n {
        return Err(Error::invalid(format!(
            "conv2d param grad shapes disagree: weight {weight_shape:?}, input {ci_n} ch, grad {go_c} ch"
        )));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gw = vec![0.0f32; co_n * ci_n * kh * kw];
    let mut gb = vec![0.0f32; co_n];
    for co in 0..co_n {
        let go_plane = &go[co * oh_n * ow_n..][..oh_n * ow_n];
        gb[co] = go_plane.iter().sum();
        for ci in 0..ci_n {
            let in_plane = &x[ci * h * w..][..h * w];
            let gw_block = &mut gw[(co * ci_n + ci) * kh * kw..][..kh * kw];
            for oh in 0..oh_n {
                let go_row = &go_plane[oh * ow_n..][..ow_n];
                for r in 0..kh {
                    let ih = (oh * stride + r) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[ih as usize * w..][..w];
                    for (ow, &g) in go_row.iter().enumerate() {
                        let iw0 = (ow * stride) as isize - pad as isize;
                        for c in 0..kw {
                            let iw = iw0 + c as isize;
                            if iw >= 0 && iw < w as isize {
                                gw_block[r * kw + c] += g * in_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(weight_shape.to_vec(), gw)?,
        Tensor::from_vec(vec![co_n], gb)?,
    ))
}

pub fn convt2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci_n, h, w) = chw(input, "convt2d input")?;
    let (wci, co_n, kh, kw) = conv_weight(weight, "convt2d weight")?;
    if wci != ci_n {
        return Err(Error::invalid(format!(
            "convt2d: weight expects {wci} input channels, input has {ci_n}"
        )));
    }
    if bias.shape() != [co_n] {
        return Err(Error::invalid(format!(
            "convt2d: bias shape {:?} does not match {co_n} output channels",
            bias.shape()
        )));
    }
    let oh_n = convt_out_dim(h, kh, stride, pad)?;
    let ow_n = convt_out_dim(w, kw, stride, pad)?;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; co_n * oh_n * ow_n];
    for co in 0..co_n {
        out[co * oh_n * ow_n..][..oh_n * ow_n].fill(bias.data()[co]);
    }
    for ci in 0..ci_n {
        let in_plane = &x[ci * h * w..][..h * w];
        for co in 0..co_n {
            let out_plane = &mut out[co * oh_n * ow_n..][..oh_n * ow_n];
            let w_block = &wt[(ci * co_n + co) * kh * kw..][..kh * kw];
            for ih in 0..h {
                let in_row = &in_plane[ih * w..][..w];
                for r in 0..kh {
                    let oh = (ih * stride + r) as isize - pad as isize;
                    if oh < 0 || oh >= oh_n as isize {
                        continue;
                    }
                    let out_row = &mut out_plane[oh as usize * ow_n..][..ow_n];
                    let w_row = &w_block[r * kw..][..kw];
                    for (iw, &v) in in_row.iter().enumerate() {
                        let ow0 = (iw * stride) as isize - pad as isize;
                        for (c, &wv) in w_row.iter().enumerate() {
                            let ow = ow0 + c as isize;
                            if ow >= 0 && ow < ow_n as isize {
                                out_row[ow as usize] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![co_n, oh_n, ow_n], out)
}

/// Gradient of a transposed convolution with respect to its input.
pub fn convt2d_backward_input(
    input_shape: &[usize],
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci_n, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::invalid(format!("convt2d input shape: expected [C,H,W], got {s:?}"))),
    };
    let (_, co_n, kh, kw) = conv_weight(weight, "convt2d weight")?;
    let (go_c, oh_n, ow_n) = chw(grad_out, "convt2d grad")?;
    if go_c != co_n {
        return Err(Error::invalid(format!(
            "convt2d grad has {go_c} channels, weight produces {co_n}"
        )));
    }
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = vec![0.0f32; ci_n * h * w];
    for ci in 0..ci_n {
        let gi_plane = &mut gi[ci * h * w..][..h * w];
        for co in 0..co_n {
            let go_plane = &go[co * oh_n * ow_n..][..oh_n * ow_n];
            let w_block = &wt[(ci * co_n + co) * kh * kw..][..kh * kw];
            for ih in 0..h {
                let gi_row = &mut gi_plane[ih * w..][..w];
                for r in 0..kh {
                    let oh = (ih * stride + r) as isize - pad as isize;
                    if oh < 0 || oh >= oh_n as isize {
                        continue;
                    }
                    let go_row = &go_plane[oh as usize * ow_n..][..ow_n];
                    let w_row = &w_block[r * kw..][..kw];
                    for (iw, gv) in gi_row.iter_mut().enumerate() {
                        let ow0 = (iw * stride) as isize - pad as isize;
                        let mut acc = 0.0f32;
                        for (c, &wv) in w_row.iter().enumerate() {
                            let ow = ow0 + c as isize;
                            if ow >= 0 && ow < ow_n as isize {
                                acc += go_row[ow as usize] * wv;
                            }
                        }
                        *gv += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![ci_n, h, w], gi)
}

/// Gradients of a transposed convolution with respect to weight and bias.
pub fn convt2d_backward_params(
    input: &Tensor,
    weight_shape: &[usize],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (ci_n, h, w) = chw(input, "convt2d input")?;
    let (wci, co_n, kh, kw) = match weight_shape {
        [a, b, kh, kw] => (*a, *b, *kh, *kw),
        s => return Err(Error::invalid(format!("convt2d weight shape: expected rank 4, got {s:?}"))),
    };
    let (go_c, oh_n, ow_n) = chw(grad_out, "convt2d grad")?;
    if go_c != co_n || wci != ci_n {
        return Err(Error::invalid(format!(
            "convt2d param grad shapes disagree: weight {weight_shape:?}, input {ci_n} ch, grad {go_c} ch"
        )));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gw = vec![0.0f32; ci_n * co_n * kh * kw];
    let mut gb = vec![0.0f32; co_n];
    for co in 0..co_n {
        gb[co] = go[co * oh_n * ow_n..][..oh_n * ow_n].iter().sum();
    }
    for ci in 0..ci_n {
        let in_plane = &x[ci * h * w..][..h * w];
        for co in 0..co_n {
            let go_plane = &go[co * oh_n * ow_n..][..oh_n * ow_n];
            let gw_block = &mut gw[(ci * co_n + co) * kh * kw..][..kh * kw];
            for ih in 0..h {
                let in_row = &in_plane[ih * w..][..w];
                for r in 0..kh {
                    let oh = (ih * stride + r) as isize - pad as isize;
                    if oh < 0 || oh >= oh_n as isize {
                        continue;
                    }
                    let go_row = &go_plane[oh as usize * ow_n..][..ow_n];
                    for (iw, &v) in in_row.iter().enumerate() {
                        let ow0 = (iw * stride) as isize - pad as isize;
                        for c in 0..kw {
                            let ow = ow0 + c as isize;
                            if ow >= 0 && ow < ow_n as isize {
                                gw_block[r * kw + c] += go_row[ow as usize] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(weight_shape.to_vec(), gw)?,
        Tensor::from_vec(vec![co_n], gb)?,
    ))
}

pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.numel();
    let (m, wn) = match weight.shape() {
        [m, wn] => (*m, *wn),
        s => return Err(Error::invalid(format!("affine weight must be [M,N], got {s:?}"))),
    };
    if wn != n || bias.shape() != [m] {
        return Err(Error::invalid(format!(
            "affine shapes disagree: input {n}, weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let out = (0..m)
        .map(|i| {
            let row = &weight.data()[i * n..][..n];
            let dot: f32 = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
            dot + bias.data()[i]
        })
        .collect();
    Tensor::from_vec(vec![m], out)
}

/// Gradient of an affine layer with respect to its (flattened) input.
pub fn affine_backward_input(
    input_shape: &[usize],
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let n: usize = input_shape.iter().product();
    let m = grad_out.numel();
    if weight.shape() != [m, n] {
        return Err(Error::invalid(format!(
            "affine grad shapes disagree: weight {:?}, input {n}, grad {m}",
            weight.shape()
        )));
    }
    let go = grad_out.data();
    let mut gi = vec![0.0f32; n];
    for i in 0..m {
        let g = go[i];
        let w_row = &weight.data()[i * n..][..n];
        for (gv, &wv) in gi.iter_mut().zip(w_row) {
            *gv += g * wv;
        }
    }
    Tensor::from_vec(input_shape.to_vec(), gi)
}

/// Gradients of an affine layer with respect to weight and bias.
pub fn affine_backward_params(input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = input.numel();
    let m = grad_out.numel();
    let x = input.data();
    let go = grad_out.data();
    let mut gw = vec![0.0f32; m * n];
    for i in 0..m {
        let g = go[i];
        let gw_row = &mut gw[i * n..][..n];
        for (gv, &xv) in gw_row.iter_mut().zip(x) {
            *gv = g * xv;
        }
    }
    Ok((
        Tensor::from_vec(vec![m, n], gw)?,
        Tensor::from_vec(vec![m], go.to_vec())?,
    ))
}

/// Per-channel mean over the spatial extent: `[C,H,W] -> [C]`.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (c_n, h, w) = chw(input, "global_avg_pool input")?;
    let area = (h * w) as f32;
    let out = (0..c_n)
        .map(|c| {
            let plane = &input.data()[c * h * w..][..h * w];
            plane.iter().sum::<f32>() / area
        })
        .collect();
    Tensor::from_vec(vec![c_n], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c_n, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::invalid(format!("expected [C,H,W], got {s:?}"))),
    };
    if grad_out.shape() != [c_n] {
        return Err(Error::invalid(format!(
            "pool grad shape {:?} does not match {c_n} channels",
            grad_out.shape()
        )));
    }
    let area = (h * w) as f32;
    let mut gi = vec![0.0f32; c_n * h * w];
    for c in 0..c_n {
        gi[c * h * w..][..h * w].fill(grad_out.data()[c] / area);
    }
    Tensor::from_vec(input_shape.to_vec(), gi)
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let peak = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - peak) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / total) as f32).collect()
}

/// log(sum(exp(logits))) with the max factored out.
pub fn log_sum_exp(logits: &[f32]) -> f64 {
    let peak = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = logits.iter().map(|&v| ((v - peak) as f64).exp()).sum();
    peak as f64 + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dims_match_framework_convention() {
        assert_eq!(conv_out_dim(64, 4, 2, 1).unwrap(), 32);
        assert_eq!(conv_out_dim(8, 4, 2, 1).unwrap(), 4);
        assert_eq!(convt_out_dim(8, 4, 2, 1).unwrap(), 16);
        assert_eq!(convt_out_dim(32, 4, 2, 1).unwrap(), 64);
    }

    #[test]
    fn conv2d_identity_kernel_with_unit_stride() {
        // 1x1 kernel of weight 1: convolution is the identity map.
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_hand_computed_3x3() {
        // 2x2 averaging kernel, stride 1, no padding on a 3x3 ramp.
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let w = Tensor::full(&[1, 1, 2, 2], 0.25);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint_map() {
        // <conv(x), y> == <x, conv_backward_input(y)> when bias is zero: the
        // forward map and its input gradient are adjoint linear operators.
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(11, "kernels-adjoint");
        let mut rand_t = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f32))
        };
        let x = rand_t(&[3, 8, 8]);
        let w = rand_t(&[5, 3, 4, 4]);
        let y = rand_t(&[5, 4, 4]);
        let zeros5 = Tensor::zeros(&[5]);
        let conv_x = conv2d_forward(&x, &w, &zeros5, 2, 1).unwrap();
        let gi = conv2d_backward_input(x.shape(), &w, &y, 2, 1).unwrap();
        let lhs: f64 = conv_x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a * b) as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(gi.data())
            .map(|(&a, &b)| (a * b) as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn convt_forward_equals_conv_input_gradient() {
        // A transposed convolution with weight W (layout [C_in, C_out]) is
        // the adjoint of the convolution holding the same buffer as
        // [C_out, C_in]; feeding y through one must match back-propagating y
        // through the other.
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(12, "kernels-convt");
        let mut rand_t = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f32))
        };
        let w = rand_t(&[3, 5, 4, 4]);
        let y = rand_t(&[3, 4, 4]);
        let zeros5 = Tensor::zeros(&[5]);
        let up = convt2d_forward(&y, &w, &zeros5, 2, 1).unwrap();
        let gi = conv2d_backward_input(&[5, 8, 8], &w, &y, 2, 1).unwrap();
        assert_eq!(up.shape(), gi.shape());
        for (a, b) in up.data().iter().zip(gi.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn affine_matches_hand_product() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap();
        let y = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 0.5]);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let x = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 15.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let q = softmax(&[101.0, 102.0, 103.0]);
        let total: f32 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
