//! 3D cross-correlation and its transpose.
//!
//! Weights for `conv3d` are laid out (out, in, kd, kh, kw). Weights for
//! `deconv3d` are laid out (in, out, kd, kh, kw), so a deconvolution with
//! weight `W` is the input-gradient of a convolution with the same `W`.

use rayon::prelude::*;

use super::tensor::{Shape5, Tensor5};
use crate::error::{Error, Result};

/// Range of output positions `o` with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn valid_outputs(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let p = pad as isize;
    let s = stride as isize;
    // o*s >= p - k
    let lo_num = p - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    // o*s <= in_len - 1 + p - k
    let hi_num = in_len as isize - 1 + p - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output shape of a convolution, or a configuration error naming both shapes.
pub fn conv3d_output_shape(input: Shape5, weight: Shape5, stride: usize, pad: usize) -> Result<Shape5> {
    if stride == 0 {
        return Err(Error::config("conv3d stride must be positive"));
    }
    if input.channels() != weight.0[1] {
        return Err(Error::config(format!(
            "conv3d: input {input} has {} channels but kernel {weight} expects {}",
            input.channels(),
            weight.0[1]
        )));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = conv_out_extent(input.spatial()[a], weight.0[2 + a], stride, pad).ok_or_else(|| {
            Error::config(format!(
                "conv3d: kernel {weight} with stride {stride} pad {pad} yields an empty output for input {input}"
            ))
        })?;
    }
    Ok(Shape5([input.batch(), weight.0[0], out[0], out[1], out[2]]))
}

/// Output shape of a transposed convolution.
pub fn deconv3d_output_shape(input: Shape5, weight: Shape5, stride: usize, pad: usize) -> Result<Shape5> {
    if stride == 0 {
        return Err(Error::config("deconv3d stride must be positive"));
    }
    if input.channels() != weight.0[0] {
        return Err(Error::config(format!(
            "deconv3d: input {input} has {} channels but kernel {weight} expects {}",
            input.channels(),
            weight.0[0]
        )));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let full = (input.spatial()[a].max(1) - 1) * stride + weight.0[2 + a];
        if input.spatial()[a] == 0 || full <= 2 * pad {
            return Err(Error::config(format!(
                "deconv3d: kernel {weight} with stride {stride} pad {pad} yields an empty output for input {input}"
            )));
        }
        out[a] = full - 2 * pad;
    }
    Ok(Shape5([input.batch(), weight.0[1], out[0], out[1], out[2]]))
}

fn check_bias(bias: &[f64], channels: usize, op: &str) -> Result<()> {
    if bias.len() != channels {
        return Err(Error::config(format!(
            "{op}: bias has {} entries for {channels} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// out[w0..w1] += a * inp[strided], the row primitive shared by every loop below.
#[inline]
fn axpy_row(out: &mut [f64], a: f64, inp: &[f64], in_start: usize, in_step: usize) {
    if in_step == 1 {
        for (o, i) in out.iter_mut().zip(&inp[in_start..]) {
            *o += a * i;
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            *o += a * inp[in_start + j * in_step];
        }
    }
}

/// Forward 3D convolution (cross-correlation), isotropic stride and zero padding.
pub fn conv3d(input: &Tensor5, weight: &Tensor5, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor5> {
    let out_shape = conv3d_output_shape(input.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, out_shape.channels(), "conv3d")?;
    let [_, cin, d, h, w] = input.shape().0;
    let [_, cout, od, oh, ow] = out_shape.0;
    let [_, _, kd, kh, kw] = weight.shape().0;
    let in_slab = d * h * w;
    let out_slab = od * oh * ow;
    let mut out = Tensor5::zeros(out_shape);
    if out_slab == 0 {
        return Ok(out);
    }
    let x = input.data();
    let wt = weight.data();
    out.data_mut()
        .par_chunks_mut(out_slab)
        .enumerate()
        .for_each(|(slab_idx, dst)| {
            let n = slab_idx / cout;
            let o = slab_idx % cout;
            dst.fill(bias[o]);
            for c in 0..cin {
                let src = &x[(n * cin + c) * in_slab..(n * cin + c + 1) * in_slab];
                let wbase = (o * cin + c) * kd * kh * kw;
                for a in 0..kd {
                    let (z0, z1) = valid_outputs(od, d, a, stride, pad);
                    for b in 0..kh {
                        let (y0, y1) = valid_outputs(oh, h, b, stride, pad);
                        for e in 0..kw {
                            let (x0, x1) = valid_outputs(ow, w, e, stride, pad);
                            let wv = wt[wbase + (a * kh + b) * kw + e];
                            if wv == 0.0 || x0 >= x1 {
                                continue;
                            }
                            for z in z0..z1 {
                                let iz = z * stride + a - pad;
                                for y in y0..y1 {
                                    let iy = y * stride + b - pad;
                                    let row = &mut dst[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                                    let ix0 = x0 * stride + e - pad;
                                    axpy_row(row, wv, &src[(iz * h + iy) * w..(iz * h + iy + 1) * w], ix0, stride);
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of a convolution's output with respect to its input.
pub fn conv3d_input_grad(
    grad_out: &Tensor5,
    weight: &Tensor5,
    input_shape: Shape5,
    stride: usize,
    pad: usize,
) -> Result<Tensor5> {
    let expected = conv3d_output_shape(input_shape, weight.shape(), stride, pad)?;
    grad_out.expect_shape(expected, "conv3d backward grad_out")?;
    let [_, cin, d, h, w] = input_shape.0;
    let [_, cout, od, oh, ow] = expected.0;
    let [_, _, kd, kh, kw] = weight.shape().0;
    let in_slab = d * h * w;
    let out_slab = od * oh * ow;
    let mut gin = Tensor5::zeros(input_shape);
    if in_slab == 0 {
        return Ok(gin);
    }
    let g = grad_out.data();
    let wt = weight.data();
    gin.data_mut()
        .par_chunks_mut(in_slab)
        .enumerate()
        .for_each(|(slab_idx, dst)| {
            let n = slab_idx / cin;
            let c = slab_idx % cin;
            for o in 0..cout {
                let src = &g[(n * cout + o) * out_slab..(n * cout + o + 1) * out_slab];
                let wbase = (o * cin + c) * kd * kh * kw;
                for a in 0..kd {
                    let (z0, z1) = valid_outputs(od, d, a, stride, pad);
                    for b in 0..kh {
                        let (y0, y1) = valid_outputs(oh, h, b, stride, pad);
                        for e in 0..kw {
                            let (x0, x1) = valid_outputs(ow, w, e, stride, pad);
                            let wv = wt[wbase + (a * kh + b) * kw + e];
                            if wv == 0.0 || x0 >= x1 {
                                continue;
                            }
                            for z in z0..z1 {
                                let iz = z * stride + a - pad;
                                for y in y0..y1 {
                                    let iy = y * stride + b - pad;
                                    let grow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                    let drow = &mut dst[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                    let ix0 = x0 * stride + e - pad;
                                    if stride == 1 {
                                        for (t, gv) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                            *t += wv * gv;
                                        }
                                    } else {
                                        for (j, gv) in grow[x0..x1].iter().enumerate() {
                                            drow[ix0 + j * stride] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(gin)
}

/// Gradient of a convolution's output with respect to its kernel.
pub fn conv3d_weight_grad(
    input: &Tensor5,
    grad_out: &Tensor5,
    kernel: [usize; 3],
    stride: usize,
    pad: usize,
) -> Result<Tensor5> {
    let [n_batch, cin, d, h, w] = input.shape().0;
    let cout = grad_out.shape().channels();
    let wshape = Shape5([cout, cin, kernel[0], kernel[1], kernel[2]]);
    let expected = conv3d_output_shape(input.shape(), wshape, stride, pad)?;
    grad_out.expect_shape(expected, "conv3d weight grad_out")?;
    let [_, _, od, oh, ow] = expected.0;
    let [kd, kh, kw] = kernel;
    let in_slab = d * h * w;
    let out_slab = od * oh * ow;
    let per_out = cin * kd * kh * kw;
    let mut gw = Tensor5::zeros(wshape);
    if per_out == 0 {
        return Ok(gw);
    }
    let x = input.data();
    let g = grad_out.data();
    gw.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, dst)| {
            for c in 0..cin {
                for a in 0..kd {
                    let (z0, z1) = valid_outputs(od, d, a, stride, pad);
                    for b in 0..kh {
                        let (y0, y1) = valid_outputs(oh, h, b, stride, pad);
                        for e in 0..kw {
                            let (x0, x1) = valid_outputs(ow, w, e, stride, pad);
                            let mut acc = 0.0;
                            if x0 < x1 {
                                for n in 0..n_batch {
                                    let src = &x[(n * cin + c) * in_slab..(n * cin + c + 1) * in_slab];
                                    let gsrc = &g[(n * cout + o) * out_slab..(n * cout + o + 1) * out_slab];
                                    for z in z0..z1 {
                                        let iz = z * stride + a - pad;
                                        for y in y0..y1 {
                                            let iy = y * stride + b - pad;
                                            let grow = &gsrc[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                                            let irow = &src[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                            let ix0 = x0 * stride + e - pad;
                                            if stride == 1 {
                                                acc += grow
                                                    .iter()
                                                    .zip(&irow[ix0..ix0 + grow.len()])
                                                    .map(|(p, q)| p * q)
                                                    .sum::<f64>();
                                            } else {
                                                for (j, gv) in grow.iter().enumerate() {
                                                    acc += gv * irow[ix0 + j * stride];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            dst[((c * kd + a) * kh + b) * kw + e] = acc;
                        }
                    }
                }
            }
        });
    Ok(gw)
}

/// Per-channel sum of an output gradient; the bias gradient of conv and deconv.
pub fn bias_grad(grad_out: &Tensor5) -> Vec<f64> {
    let [n_batch, c, ..] = grad_out.shape().0;
    (0..c)
        .map(|ch| (0..n_batch).map(|n| grad_out.slab(n, ch).iter().sum::<f64>()).sum())
        .collect()
}

/// Gradients of a convolution: (input, weight, bias).
pub struct ConvGrads {
    pub input: Tensor5,
    pub weight: Tensor5,
    pub bias: Vec<f64>,
}

pub fn conv3d_backward(
    input: &Tensor5,
    weight: &Tensor5,
    grad_out: &Tensor5,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let k = [weight.shape().0[2], weight.shape().0[3], weight.shape().0[4]];
    Ok(ConvGrads {
        input: conv3d_input_grad(grad_out, weight, input.shape(), stride, pad)?,
        weight: conv3d_weight_grad(input, grad_out, k, stride, pad)?,
        bias: bias_grad(grad_out),
    })
}

/// Transposed 3D convolution computed by scattering each input voxel.
pub fn deconv3d(input: &Tensor5, weight: &Tensor5, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor5> {
    let out_shape = deconv3d_output_shape(input.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, out_shape.channels(), "deconv3d")?;
    let [_, cin, d, h, w] = input.shape().0;
    let [_, cout, od, oh, ow] = out_shape.0;
    let [_, _, kd, kh, kw] = weight.shape().0;
    let in_slab = d * h * w;
    let out_slab = od * oh * ow;
    let mut out = Tensor5::zeros(out_shape);
    let x = input.data();
    let wt = weight.data();
    out.data_mut()
        .par_chunks_mut(out_slab)
        .enumerate()
        .for_each(|(slab_idx, dst)| {
            let n = slab_idx / cout;
            let co = slab_idx % cout;
            dst.fill(bias[co]);
            for ci in 0..cin {
                let src = &x[(n * cin + ci) * in_slab..(n * cin + ci + 1) * in_slab];
                for a in 0..kd {
                    for b in 0..kh {
                        for e in 0..kw {
                            let wv = wt[(((ci * cout + co) * kd + a) * kh + b) * kw + e];
                            if wv == 0.0 {
                                continue;
                            }
                            for iz in 0..d {
                                let tz = (iz * stride + a) as isize - pad as isize;
                                if tz < 0 || tz >= od as isize {
                                    continue;
                                }
                                for iy in 0..h {
                                    let ty = (iy * stride + b) as isize - pad as isize;
                                    if ty < 0 || ty >= oh as isize {
                                        continue;
                                    }
                                    let srow = &src[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                    let base = (tz as usize * oh + ty as usize) * ow;
                                    for (ix, sv) in srow.iter().enumerate() {
                                        let tx = (ix * stride + e) as isize - pad as isize;
                                        if tx >= 0 && (tx as usize) < ow {
                                            dst[base + tx as usize] += wv * sv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn deconv3d_backward(
    input: &Tensor5,
    weight: &Tensor5,
    grad_out: &Tensor5,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let expected = deconv3d_output_shape(input.shape(), weight.shape(), stride, pad)?;
    grad_out.expect_shape(expected, "deconv3d backward grad_out")?;
    let zero_bias = vec![0.0; weight.shape().0[0]];
    let k = [weight.shape().0[2], weight.shape().0[3], weight.shape().0[4]];
    // A transposed convolution's input-gradient is the forward convolution
    // with the same kernel, and its kernel gradient swaps the conv roles.
    let gin = conv3d(grad_out, weight, &zero_bias, stride, pad)?;
    let gw = conv3d_weight_grad(grad_out, input, k, stride, pad)?;
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: bias_grad(grad_out),
    })
}
