//! Stateful layers wrapping the pure ops with parameters and backward caches.

use super::activation::{relu, relu_backward};
use super::conv::{conv3d, conv3d_backward, deconv3d, deconv3d_backward};
use super::init::xavier_init;
use super::norm::{
    batchnorm3d_backward, batchnorm3d_infer, batchnorm3d_train, update_running_stats, BatchNormCache, BN_EPSILON,
    BN_MOMENTUM,
};
use super::param::{join, Layer, Mode, Param, Parameterized};
use super::pool::{max_unpool3d, max_unpool3d_backward, maxpool3d, maxpool3d_backward, PoolIndices};
use super::tensor::{Shape5, Tensor5};
use crate::error::{Error, Result};

fn missing_cache(layer: &str) -> Error {
    Error::config(format!("{layer}: backward called without a training-mode forward"))
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor5>,
}

impl Conv3d {
    /// Cubic kernel `k`, Xavier-initialized from `seed`.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let p = xavier_init(Shape5::new(out_ch, in_ch, k, k, k), seed);
        Conv3d {
            weight: Param::from_tensor(p.weight),
            bias: Param::new(vec![out_ch], p.bias),
            stride,
            pad,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        super::conv::conv3d_output_shape(input, Shape5(self.weight.shape.clone().try_into().unwrap()), self.stride, self.pad)
    }
}

impl Parameterized for Conv3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for Conv3d {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let y = conv3d(x, &self.weight.tensor()?, &self.bias.value, self.stride, self.pad)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv3d"))?;
        let g = conv3d_backward(x, &self.weight.tensor()?, grad_out, self.stride, self.pad)?;
        self.weight.accumulate(g.weight.data());
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
pub struct Deconv3d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor5>,
}

impl Deconv3d {
    /// Kernel laid out (in, out, k, k, k).
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let p = xavier_init(Shape5::new(in_ch, out_ch, k, k, k), seed);
        Deconv3d {
            weight: Param::from_tensor(p.weight),
            bias: Param::new(vec![out_ch], vec![0.0; out_ch]),
            stride,
            pad,
            input: None,
        }
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        super::conv::deconv3d_output_shape(
            input,
            Shape5(self.weight.shape.clone().try_into().unwrap()),
            self.stride,
            self.pad,
        )
    }
}

impl Parameterized for Deconv3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for Deconv3d {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let y = deconv3d(x, &self.weight.tensor()?, &self.bias.value, self.stride, self.pad)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("deconv3d"))?;
        let g = deconv3d_backward(x, &self.weight.tensor()?, grad_out, self.stride, self.pad)?;
        self.weight.accumulate(g.weight.data());
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BatchNormCache>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            scale: Param::new(vec![channels], vec![1.0; channels]),
            shift: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }
}

impl Parameterized for BatchNorm3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl Layer for BatchNorm3d {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        match mode {
            Mode::Train => {
                let (y, cache, stats) = batchnorm3d_train(x, &self.scale.value, &self.shift.value, self.eps)?;
                update_running_stats(&mut self.running_mean.value, &mut self.running_var.value, &stats, self.momentum);
                self.cache = Some(cache);
                Ok(y)
            }
            Mode::Infer => {
                self.cache = None;
                batchnorm3d_infer(
                    x,
                    &self.scale.value,
                    &self.shift.value,
                    &self.running_mean.value,
                    &self.running_var.value,
                    self.eps,
                )
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm3d"))?;
        let (gin, gscale, gshift) = batchnorm3d_backward(grad_out, cache, &self.scale.value)?;
        self.scale.accumulate(&gscale);
        self.shift.accumulate(&gshift);
        Ok(gin)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    input: Option<Tensor5>,
}

impl Parameterized for Relu {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("relu"))?;
        relu_backward(x, grad_out)
    }
}

/// Window-2 stride-2 max pool that keeps its argmax indices for unpooling.
#[derive(Clone, Debug, Default)]
pub struct MaxPool3d {
    indices: Option<PoolIndices>,
}

impl MaxPool3d {
    pub const WINDOW: usize = 2;

    pub fn indices(&self) -> Option<&PoolIndices> {
        self.indices.as_ref()
    }
}

impl Parameterized for MaxPool3d {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for MaxPool3d {
    fn forward(&mut self, x: &Tensor5, _mode: Mode) -> Result<Tensor5> {
        let (y, idx) = maxpool3d(x, Self::WINDOW)?;
        self.indices = Some(idx);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let idx = self.indices.as_ref().ok_or_else(|| missing_cache("maxpool3d"))?;
        maxpool3d_backward(grad_out, idx)
    }
}

/// Unpooling driven by indices borrowed from a max pool elsewhere in the graph.
#[derive(Clone, Debug, Default)]
pub struct MaxUnpool3d {
    indices: Option<PoolIndices>,
}

impl MaxUnpool3d {
    pub fn forward(&mut self, x: &Tensor5, indices: &PoolIndices) -> Result<Tensor5> {
        let out_shape = indices.input_shape;
        let y = max_unpool3d(x, indices, out_shape)?;
        self.indices = Some(indices.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let idx = self.indices.as_ref().ok_or_else(|| missing_cache("max_unpool3d"))?;
        max_unpool3d_backward(grad_out, idx)
    }
}

/// Fully connected layer on (N, C, 1, 1, 1) tensors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor5>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, seed: u64) -> Self {
        let p = xavier_init(Shape5::new(out_features, in_features, 1, 1, 1), seed);
        Linear {
            weight: Param::new(vec![out_features, in_features], p.weight.into_vec()),
            bias: Param::new(vec![out_features], p.bias),
            input: None,
        }
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let (out_f, in_f) = (self.weight.shape[0], self.weight.shape[1]);
        let s = x.shape();
        if s.channels() != in_f || s.slab() != 1 {
            return Err(Error::config(format!("linear: expected (N,{in_f},1,1,1), got {s}")));
        }
        let n = s.batch();
        let mut y = Tensor5::zeros(Shape5::new(n, out_f, 1, 1, 1));
        for b in 0..n {
            let xi = &x.data()[b * in_f..(b + 1) * in_f];
            for o in 0..out_f {
                let w = &self.weight.value[o * in_f..(o + 1) * in_f];
                let v = self.bias.value[o] + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                y.data_mut()[b * out_f + o] = v;
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let (out_f, in_f) = (self.weight.shape[0], self.weight.shape[1]);
        let n = x.shape().batch();
        grad_out.expect_shape(Shape5::new(n, out_f, 1, 1, 1), "linear backward")?;
        let mut gin = Tensor5::zeros(x.shape());
        for b in 0..n {
            for o in 0..out_f {
                let g = grad_out.data()[b * out_f + o];
                self.bias.grad[o] += g;
                for i in 0..in_f {
                    self.weight.grad[o * in_f + i] += g * x.data()[b * in_f + i];
                    gin.data_mut()[b * in_f + i] += g * self.weight.value[o * in_f + i];
                }
            }
        }
        Ok(gin)
    }
}

/// Mean over all spatial positions: (N, C, D, H, W) -> (N, C, 1, 1, 1).
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Shape5>,
}

impl Parameterized for GlobalAvgPool {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor5, _mode: Mode) -> Result<Tensor5> {
        let s = x.shape();
        let inv = 1.0 / s.slab() as f64;
        let mut y = Tensor5::zeros(Shape5::new(s.batch(), s.channels(), 1, 1, 1));
        for n in 0..s.batch() {
            for c in 0..s.channels() {
                y.data_mut()[n * s.channels() + c] = x.slab(n, c).iter().sum::<f64>() * inv;
            }
        }
        self.input_shape = Some(s);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let s = self.input_shape.ok_or_else(|| missing_cache("global average pool"))?;
        let inv = 1.0 / s.slab() as f64;
        let mut gin = Tensor5::zeros(s);
        for n in 0..s.batch() {
            for c in 0..s.channels() {
                let g = grad_out.data()[n * s.channels() + c] * inv;
                gin.slab_mut(n, c).fill(g);
            }
        }
        Ok(gin)
    }
}

/// Row-wise softmax over the channel axis of (N, C, 1, 1, 1).
pub fn softmax_channels(logits: &Tensor5) -> Tensor5 {
    let s = logits.shape();
    let c = s.channels();
    let mut out = logits.clone();
    for n in 0..s.batch() {
        let row = &mut out.data_mut()[n * c..(n + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}
