use rayon::prelude::*;

use super::tensor::{Shape5, Tensor5};
use crate::error::{Error, Result};

/// Argmax positions recorded by [`maxpool3d`].
///
/// `indices[k]` is the flat offset, into the pooled input tensor, of the
/// maximal element of the window that produced output `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub shape: Shape5,
    pub input_shape: Shape5,
    pub indices: Vec<usize>,
}

/// Output shape of a non-overlapping max pool with cubic window `k`.
pub fn maxpool3d_output_shape(input: Shape5, k: usize) -> Result<Shape5> {
    if k == 0 {
        return Err(Error::config("max pool window must be positive"));
    }
    let s = input.spatial();
    if s.iter().any(|&e| e == 0 || e % k != 0) {
        return Err(Error::config(format!(
            "max pool window {k} does not divide spatial extents of {input}"
        )));
    }
    Ok(input.with_spatial([s[0] / k, s[1] / k, s[2] / k]))
}

/// Max pool with window == stride == `k`. Ties go to the first element in
/// (z, y, x) window order.
pub fn maxpool3d(input: &Tensor5, k: usize) -> Result<(Tensor5, PoolIndices)> {
    let out_shape = maxpool3d_output_shape(input.shape(), k)?;
    let [_, _, d, h, w] = input.shape().0;
    let [_, _, od, oh, ow] = out_shape.0;
    let in_slab = d * h * w;
    let out_slab = od * oh * ow;
    let mut out = Tensor5::zeros(out_shape);
    let mut idx = vec![0usize; out_shape.numel()];
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(out_slab)
        .zip(idx.par_chunks_mut(out_slab))
        .enumerate()
        .for_each(|(slab, (dst, dst_idx))| {
            let base = slab * in_slab;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = usize::MAX;
                        for a in 0..k {
                            for b in 0..k {
                                let row = base + ((z * k + a) * h + y * k + b) * w + xo * k;
                                for e in 0..k {
                                    let v = x[row + e];
                                    if best_at == usize::MAX || v > best {
                                        best = v;
                                        best_at = row + e;
                                    }
                                }
                            }
                        }
                        let o = (z * oh + y) * ow + xo;
                        dst[o] = best;
                        dst_idx[o] = best_at;
                    }
                }
            }
        });
    Ok((
        out,
        PoolIndices {
            shape: out_shape,
            input_shape: input.shape(),
            indices: idx,
        },
    ))
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool3d_backward(grad_out: &Tensor5, indices: &PoolIndices) -> Result<Tensor5> {
    grad_out.expect_shape(indices.shape, "maxpool3d backward")?;
    let mut gin = Tensor5::zeros(indices.input_shape);
    let g = gin.data_mut();
    for (&i, &v) in indices.indices.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(gin)
}

/// Scatters `input` to the positions in `indices`; everything else is zero.
pub fn max_unpool3d(input: &Tensor5, indices: &PoolIndices, output_shape: Shape5) -> Result<Tensor5> {
    if input.shape() != indices.shape {
        return Err(Error::config(format!(
            "max_unpool3d: input {} does not match index shape {}",
            input.shape(),
            indices.shape
        )));
    }
    let mut out = Tensor5::zeros(output_shape);
    let n = output_shape.numel();
    let o = out.data_mut();
    for (&i, &v) in indices.indices.iter().zip(input.data()) {
        if i >= n {
            return Err(Error::data(format!(
                "unpool index {i} lies outside output shape {output_shape}"
            )));
        }
        o[i] = v;
    }
    Ok(out)
}

pub fn max_unpool3d_backward(grad_out: &Tensor5, indices: &PoolIndices) -> Result<Tensor5> {
    let g = grad_out.data();
    let data = indices
        .indices
        .iter()
        .map(|&i| {
            g.get(i).copied().ok_or_else(|| {
                Error::data(format!("unpool index {i} outside gradient shape {}", grad_out.shape()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor5::from_vec(indices.shape, data)
}

pub fn avgpool3d_output_shape(input: Shape5, window: usize, stride: usize) -> Result<Shape5> {
    if window == 0 || stride == 0 {
        return Err(Error::config("average pool window and stride must be positive"));
    }
    let s = input.spatial();
    let mut out = [0; 3];
    for a in 0..3 {
        if s[a] < window || (s[a] - window) % stride != 0 {
            return Err(Error::config(format!(
                "average pool window {window} stride {stride} does not tile input {input}"
            )));
        }
        out[a] = (s[a] - window) / stride + 1;
    }
    Ok(input.with_spatial(out))
}

/// Arithmetic mean over each (possibly overlapping) window.
pub fn avgpool3d(input: &Tensor5, window: usize, stride: usize) -> Result<Tensor5> {
    let out_shape = avgpool3d_output_shape(input.shape(), window, stride)?;
    let [_, _, d, h, w] = input.shape().0;
    let [_, _, od, oh, ow] = out_shape.0;
    let norm = 1.0 / (window * window * window) as f64;
    let in_slab = d * h * w;
    let mut out = Tensor5::zeros(out_shape);
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(slab, dst)| {
            let src = &x[slab * in_slab..(slab + 1) * in_slab];
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..window {
                            for b in 0..window {
                                let row = ((z * stride + a) * h + y * stride + b) * w + xo * stride;
                                acc += src[row..row + window].iter().sum::<f64>();
                            }
                        }
                        dst[(z * oh + y) * ow + xo] = acc * norm;
                    }
                }
            }
        });
    Ok(out)
}

/// Spreads each pooled gradient evenly over its window.
pub fn avgpool3d_backward(grad_out: &Tensor5, input_shape: Shape5, window: usize, stride: usize) -> Result<Tensor5> {
    let expected = avgpool3d_output_shape(input_shape, window, stride)?;
    grad_out.expect_shape(expected, "avgpool3d backward")?;
    let [_, _, _, h, w] = input_shape.0;
    let [_, _, od, oh, ow] = expected.0;
    let norm = 1.0 / (window * window * window) as f64;
    let mut gin = Tensor5::zeros(input_shape);
    let in_slab = input_shape.slab();
    let out_slab = expected.slab();
    let g = grad_out.data();
    gin.data_mut()
        .par_chunks_mut(in_slab)
        .enumerate()
        .for_each(|(slab, dst)| {
            let src = &g[slab * out_slab..(slab + 1) * out_slab];
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let v = src[(z * oh + y) * ow + xo] * norm;
                        for a in 0..window {
                            for b in 0..window {
                                let row = ((z * stride + a) * h + y * stride + b) * w + xo * stride;
                                for t in &mut dst[row..row + window] {
                                    *t += v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(gin)
}
