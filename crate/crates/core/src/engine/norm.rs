use super::tensor::Tensor5;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values kept from a training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor5,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch statistics from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_channels(input: &Tensor5, v: &[f64], what: &str) -> Result<()> {
    if v.len() != input.shape().channels() {
        return Err(Error::config(format!(
            "batchnorm3d: {what} has {} entries for input {} with {} channels",
            v.len(),
            input.shape(),
            input.shape().channels()
        )));
    }
    Ok(())
}

/// Normalizes each channel over (batch, depth, height, width) with the batch's own statistics.
pub fn batchnorm3d_train(
    input: &Tensor5,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<(Tensor5, BatchNormCache, BatchStats)> {
    check_channels(input, scale, "scale")?;
    check_channels(input, shift, "shift")?;
    if eps <= 0.0 {
        return Err(Error::config("batchnorm3d: epsilon must be positive"));
    }
    let [n, c, ..] = input.shape().0;
    let slab = input.shape().slab();
    let count = n * slab;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += input.slab(b, ch).iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for b in 0..n {
            v += input.slab(b, ch).iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor5::zeros(input.shape());
    let mut out = Tensor5::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = input.slab(b, ch);
            let xh = xhat.slab_mut(b, ch);
            for (dst, &x) in xh.iter_mut().zip(src) {
                *dst = (x - mean[ch]) * inv_std[ch];
            }
            let (g, bt) = (scale[ch], shift[ch]);
            let xh = xhat.slab(b, ch).to_vec();
            for (dst, x) in out.slab_mut(b, ch).iter_mut().zip(xh) {
                *dst = g * x + bt;
            }
        }
    }
    Ok((out, BatchNormCache { xhat, inv_std }, BatchStats { mean, var, count }))
}

/// Normalizes with stored running statistics.
pub fn batchnorm3d_infer(
    input: &Tensor5,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor5> {
    check_channels(input, scale, "scale")?;
    check_channels(input, shift, "shift")?;
    check_channels(input, running_mean, "running mean")?;
    check_channels(input, running_var, "running variance")?;
    let [n, c, ..] = input.shape().0;
    let mut out = input.clone();
    for ch in 0..c {
        let a = scale[ch] / (running_var[ch] + eps).sqrt();
        let b = shift[ch] - a * running_mean[ch];
        for bi in 0..n {
            for v in out.slab_mut(bi, ch) {
                *v = a * *v + b;
            }
        }
    }
    Ok(out)
}

/// Exponential moving average update; variance uses the unbiased estimate.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats, momentum: f64) {
    let unbias = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * stats.mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * stats.var[ch] * unbias;
    }
}

/// Gradients of a training-mode batch norm: (input, scale, shift).
pub fn batchnorm3d_backward(
    grad_out: &Tensor5,
    cache: &BatchNormCache,
    scale: &[f64],
) -> Result<(Tensor5, Vec<f64>, Vec<f64>)> {
    grad_out.expect_shape(cache.xhat.shape(), "batchnorm3d backward")?;
    let [n, c, ..] = grad_out.shape().0;
    let m = (n * grad_out.shape().slab()) as f64;
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            for (g, x) in grad_out.slab(b, ch).iter().zip(cache.xhat.slab(b, ch)) {
                gshift[ch] += g;
                gscale[ch] += g * x;
            }
        }
    }
    let mut gin = Tensor5::zeros(grad_out.shape());
    for ch in 0..c {
        // d xhat = g * scale; sums of dxhat and dxhat*xhat are gshift*scale and gscale*scale.
        let sum_dx = gshift[ch] * scale[ch];
        let sum_dx_x = gscale[ch] * scale[ch];
        let k = cache.inv_std[ch] / m;
        for b in 0..n {
            let go = grad_out.slab(b, ch);
            let xh = cache.xhat.slab(b, ch);
            let gi = gin.slab_mut(b, ch);
            for i in 0..go.len() {
                gi[i] = k * (m * go[i] * scale[ch] - sum_dx - xh[i] * sum_dx_x);
            }
        }
    }
    Ok((gin, gscale, gshift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tensor::Shape5;

    fn ramp() -> Tensor5 {
        Tensor5::from_fn(Shape5::new(2, 3, 2, 2, 2), |i| {
            ((i[0] * 7 + i[1] * 13 + i[2] * 3 + i[3] * 5 + i[4]) % 11) as f64 * (i[1] + 1) as f64
        })
    }

    #[test]
    fn train_output_is_standardized() {
        let x = ramp();
        let (y, _, _) = batchnorm3d_train(&x, &[1.0; 3], &[0.0; 3], BN_EPSILON).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y.slab(b, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3, "variance {v}");
        }
    }

    #[test]
    fn zero_scale_gives_shift() {
        let x = ramp();
        let (y, _, _) = batchnorm3d_train(&x, &[0.0; 3], &[0.5, -1.0, 2.0], BN_EPSILON).unwrap();
        for b in 0..2 {
            for (ch, s) in [0.5, -1.0, 2.0].iter().enumerate() {
                assert!(y.slab(b, ch).iter().all(|v| v == s));
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = ramp();
        assert!(batchnorm3d_train(&x, &[1.0; 2], &[0.0; 3], BN_EPSILON).is_err());
        assert!(batchnorm3d_infer(&x, &[1.0; 3], &[0.0; 3], &[0.0; 4], &[1.0; 3], BN_EPSILON).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let x = ramp();
        let (_, _, stats) = batchnorm3d_train(&x, &[1.0; 3], &[0.0; 3], BN_EPSILON).unwrap();
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        update_running_stats(&mut rm, &mut rv, &stats, BN_MOMENTUM);
        for ch in 0..3 {
            assert!((rm[ch] - 0.1 * stats.mean[ch]).abs() < 1e-12);
            assert!(rv[ch] > 0.0);
        }
    }
}
