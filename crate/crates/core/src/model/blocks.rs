//! Composite blocks of the detector.

use crate::engine::param::join;
use crate::engine::{
    concat_channels, split_channels, BatchNorm3d, Conv3d, Deconv3d, Layer, MaxPool3d, MaxUnpool3d, Mode, Param,
    Parameterized, PoolIndices, Relu, Shape5, Tensor5,
};
use crate::error::{Error, Result};

/// Conv-BN-ReLU with an optional window-2 max pool. The convolution keeps
/// the spatial extent (padding k/2).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    relu: Relu,
    pool: Option<MaxPool3d>,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, pool: bool, seed: u64) -> Self {
        ConvBlock {
            conv: Conv3d::new(in_ch, out_ch, k, 1, k / 2, seed),
            bn: BatchNorm3d::new(out_ch),
            relu: Relu::default(),
            pool: pool.then(MaxPool3d::default),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        let s = self.conv.output_shape(input)?;
        match self.pool {
            Some(_) => crate::engine::pool::maxpool3d_output_shape(s, MaxPool3d::WINDOW),
            None => Ok(s),
        }
    }

    pub fn pool_indices(&self) -> Option<&PoolIndices> {
        self.pool.as_ref().and_then(|p| p.indices())
    }
}

impl Parameterized for ConvBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }
}

impl Layer for ConvBlock {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        let y = self.relu.forward(&y, mode)?;
        match &mut self.pool {
            Some(p) => p.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5> {
        let g = match &mut self.pool {
            Some(p) => p.backward(grad_out)?,
            None => grad_out.clone(),
        };
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

/// Expanding-pathway block: unpool with borrowed indices, 3x3x3 transposed
/// convolution, BN, ReLU, concatenation with the skip, then a 1x1x1
/// Conv-BN-ReLU fusion.
#[derive(Clone, Debug)]
pub struct DecovBlock {
    unpool: MaxUnpool3d,
    pub deconv: Deconv3d,
    pub bn: BatchNorm3d,
    relu: Relu,
    pub fuse: ConvBlock,
    up_channels: usize,
}

impl DecovBlock {
    pub fn new(in_ch: usize, skip_ch: usize, out_ch: usize, seed: u64) -> Self {
        DecovBlock {
            unpool: MaxUnpool3d::default(),
            deconv: Deconv3d::new(in_ch, in_ch, 3, 1, 1, seed),
            bn: BatchNorm3d::new(in_ch),
            relu: Relu::default(),
            fuse: ConvBlock::new(in_ch + skip_ch, out_ch, 1, false, seed.wrapping_add(1)),
            up_channels: in_ch,
        }
    }

    /// Shape after unpooling `input` to the skip's extent and fusing.
    pub fn output_shape(&self, input: Shape5, skip: Shape5) -> Result<Shape5> {
        let s = skip.spatial();
        let x = input.spatial();
        if input.channels() != self.up_channels || s != [2 * x[0], 2 * x[1], 2 * x[2]] || input.batch() != skip.batch() {
            return Err(Error::config(format!(
                "decov block: input {input} cannot be unpooled onto skip {skip}"
            )));
        }
        let up = self.deconv.output_shape(input.with_spatial(s))?;
        self.fuse.output_shape(up.with_channels(up.channels() + skip.channels()))
    }

    pub fn forward(&mut self, x: &Tensor5, indices: &PoolIndices, skip: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let u = self.unpool.forward(x, indices)?;
        let u = self.deconv.forward(&u, mode)?;
        let u = self.bn.forward(&u, mode)?;
        let u = self.relu.forward(&u, mode)?;
        let cat = concat_channels(&u, skip)?;
        self.fuse.forward(&cat, mode)
    }

    /// Returns gradients for (input, skip).
    pub fn backward(&mut self, grad_out: &Tensor5) -> Result<(Tensor5, Tensor5)> {
        let g = self.fuse.backward(grad_out)?;
        let (gu, gskip) = split_channels(&g, self.up_channels)?;
        let g = self.relu.backward(&gu)?;
        let g = self.bn.backward(&g)?;
        let g = self.deconv.backward(&g)?;
        Ok((self.unpool.backward(&g)?, gskip))
    }
}

impl Parameterized for DecovBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.deconv.visit_params(&join(prefix, "deconv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.deconv.visit_params_mut(&join(prefix, "deconv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
    }
}

/// Box regressor and classifier convolutions for one scale.
#[derive(Clone, Debug)]
pub struct Head {
    pub boxes: Conv3d,
    pub scores: Conv3d,
}

impl Head {
    pub fn new(in_ch: usize, anchors: usize, seed: u64) -> Self {
        Head {
            boxes: Conv3d::new(in_ch, 4 * anchors, 3, 1, 1, seed),
            scores: Conv3d::new(in_ch, 2 * anchors, 3, 1, 1, seed.wrapping_add(1)),
        }
    }

    pub fn output_shapes(&self, input: Shape5) -> Result<(Shape5, Shape5)> {
        Ok((self.boxes.output_shape(input)?, self.scores.output_shape(input)?))
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<(Tensor5, Tensor5)> {
        Ok((self.boxes.forward(x, mode)?, self.scores.forward(x, mode)?))
    }

    pub fn backward(&mut self, grad_boxes: &Tensor5, grad_scores: &Tensor5) -> Result<Tensor5> {
        let mut g = self.boxes.backward(grad_boxes)?;
        g.add_assign(&self.scores.backward(grad_scores)?)?;
        Ok(g)
    }
}

impl Parameterized for Head {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.boxes.visit_params(&join(prefix, "boxes"), f);
        self.scores.visit_params(&join(prefix, "scores"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.boxes.visit_params_mut(&join(prefix, "boxes"), f);
        self.scores.visit_params_mut(&join(prefix, "scores"), f);
    }
}
