use super::blocks::{ConvBlock, DecovBlock, Head};
use super::config::{PiaNetConfig, ScaleSpec};
use crate::engine::param::join;
use crate::engine::{
    avgpool3d, avgpool3d_backward, concat_channels, split_channels, Layer, Mode, Param, Parameterized, Shape5, Tensor5,
};
use crate::error::{Error, Result};

pub(crate) fn layer_seed(seed: u64, k: u64) -> u64 {
    seed ^ (k + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One row of the layer table: row number, layer name, output shape(s).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeRow {
    pub row: usize,
    pub name: &'static str,
    pub shapes: Vec<Shape5>,
}

impl ProbeRow {
    fn new(row: usize, name: &'static str, shapes: Vec<Shape5>) -> Self {
        ProbeRow { row, name, shapes }
    }
}

const PYRAMID_LEVELS: usize = 4;

fn pyramid(x: &Tensor5, levels: usize) -> Result<Vec<Tensor5>> {
    let mut out: Vec<Tensor5> = Vec::with_capacity(levels);
    for k in 0..levels {
        let prev = if k == 0 { x } else { &out[k - 1] };
        let next = avgpool3d(prev, 2, 2)?;
        out.push(next);
    }
    Ok(out)
}

/// Successive window-2 average pools of the input cube, one per pooled
/// contracting block.
pub fn source_pyramid(cube: &Tensor5, config: &PiaNetConfig) -> Result<Vec<Tensor5>> {
    let s = config.input_cube_side;
    let want = Shape5::new(cube.shape().batch(), 1, s, s, s);
    if cube.shape() != want {
        return Err(Error::config(format!(
            "source pyramid expects cube shape {want}, got {}",
            cube.shape()
        )));
    }
    pyramid(cube, PYRAMID_LEVELS)
}

/// Contracting and expanding pathways.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub contract: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    pub reduce: ConvBlock,
    pub decov: Vec<DecovBlock>,
    widths: Vec<usize>,
    input_shape: Option<Shape5>,
    trace: Vec<ProbeRow>,
}

impl FeatureExtractor {
    pub fn new(config: &PiaNetConfig, seed: u64) -> Self {
        let c = &config.contracting_widths;
        let e = &config.expanding_widths;
        let mut contract = Vec::with_capacity(4);
        let mut in_ch = 1;
        for (i, &w) in c[..4].iter().enumerate() {
            contract.push(ConvBlock::new(in_ch, w, 3, true, layer_seed(seed, i as u64)));
            in_ch = w + 1;
        }
        FeatureExtractor {
            contract,
            bottleneck: ConvBlock::new(in_ch, c[4], 3, false, layer_seed(seed, 4)),
            reduce: ConvBlock::new(c[4], e[0], 1, false, layer_seed(seed, 5)),
            decov: vec![
                DecovBlock::new(e[0], c[2] + 1, e[1], layer_seed(seed, 6)),
                DecovBlock::new(e[1], c[1] + 1, e[2], layer_seed(seed, 7)),
            ],
            widths: c[..4].to_vec(),
            input_shape: None,
            trace: Vec::new(),
        }
    }

    /// Output channels of the three feature maps, finest first.
    pub fn output_channels(&self) -> [usize; 3] {
        [
            self.decov[1].fuse.out_channels(),
            self.decov[0].fuse.out_channels(),
            self.reduce.out_channels(),
        ]
    }

    /// Shape propagation without arithmetic. Returns table rows 0..=12 and
    /// the three feature-map shapes, finest first.
    pub fn infer_shapes(&self, input: Shape5) -> Result<(Vec<ProbeRow>, [Shape5; 3])> {
        let mut rows = vec![ProbeRow::new(0, "Input", vec![input])];
        let mut h = input;
        let mut level = input;
        let mut concats = Vec::new();
        for (i, block) in self.contract.iter().enumerate() {
            let c = block.output_shape(h)?;
            level = crate::engine::pool::avgpool3d_output_shape(level, 2, 2)?;
            rows.push(ProbeRow::new(2 * i + 1, "Conv block", vec![c]));
            if c.spatial() != level.spatial() {
                return Err(Error::config(format!(
                    "contract block {i} output {c} does not match source level {level}"
                )));
            }
            h = c.with_channels(c.channels() + level.channels());
            rows.push(ProbeRow::new(2 * i + 2, "Concat OP", vec![h]));
            concats.push(h);
        }
        let b = self.bottleneck.output_shape(h)?;
        rows.push(ProbeRow::new(9, "Conv block (No pooling)", vec![b]));
        let r = self.reduce.output_shape(b)?;
        rows.push(ProbeRow::new(10, "1x1x1Conv", vec![r]));
        let d1 = self.decov[0].output_shape(r, concats[2])?;
        rows.push(ProbeRow::new(11, "Decov OP", vec![d1]));
        let d2 = self.decov[1].output_shape(d1, concats[1])?;
        rows.push(ProbeRow::new(12, "Decov OP", vec![d2]));
        Ok((rows, [d2, d1, r]))
    }

    /// Shapes recorded by the most recent forward pass.
    pub fn last_trace(&self) -> &[ProbeRow] {
        &self.trace
    }

    /// Returns the feature maps at side/4, side/8 and side/16.
    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<[Tensor5; 3]> {
        let s = x.shape();
        if s.channels() != 1 || s.spatial().iter().any(|&e| e == 0 || e % 16 != 0) {
            return Err(Error::config(format!(
                "feature extractor needs a single-channel input with sides divisible by 16, got {s}"
            )));
        }
        self.trace.clear();
        self.trace.push(ProbeRow::new(0, "Input", vec![s]));
        let levels = pyramid(x, PYRAMID_LEVELS)?;
        let mut skips: [Option<Tensor5>; 2] = [None, None];
        let mut h = x.clone();
        for i in 0..4 {
            let c = self.contract[i].forward(&h, mode)?;
            c.check_finite(&format!("features.contract.{i}"))?;
            self.trace.push(ProbeRow::new(2 * i + 1, "Conv block", vec![c.shape()]));
            h = concat_channels(&c, &levels[i])?;
            self.trace.push(ProbeRow::new(2 * i + 2, "Concat OP", vec![h.shape()]));
            if i == 1 || i == 2 {
                skips[i - 1] = Some(h.clone());
            }
        }
        let b = self.bottleneck.forward(&h, mode)?;
        drop(h);
        b.check_finite("features.bottleneck")?;
        self.trace.push(ProbeRow::new(9, "Conv block (No pooling)", vec![b.shape()]));
        let r = self.reduce.forward(&b, mode)?;
        r.check_finite("features.reduce")?;
        self.trace.push(ProbeRow::new(10, "1x1x1Conv", vec![r.shape()]));
        let idx3 = self.contract[3].pool_indices().cloned().expect("pooled block records indices");
        let skip = skips[1].take().expect("skip recorded");
        let d1 = self.decov[0].forward(&r, &idx3, &skip, mode)?;
        d1.check_finite("features.decov.0")?;
        self.trace.push(ProbeRow::new(11, "Decov OP", vec![d1.shape()]));
        let idx2 = self.contract[2].pool_indices().cloned().expect("pooled block records indices");
        let skip = skips[0].take().expect("skip recorded");
        let d2 = self.decov[1].forward(&d1, &idx2, &skip, mode)?;
        d2.check_finite("features.decov.1")?;
        self.trace.push(ProbeRow::new(12, "Decov OP", vec![d2.shape()]));
        self.input_shape = Some(s);
        Ok([d2, d1, r])
    }

    /// Takes gradients for the three feature maps and returns the input gradient.
    pub fn backward(&mut self, grads: [Tensor5; 3]) -> Result<Tensor5> {
        let input_shape = self
            .input_shape
            .ok_or_else(|| Error::config("feature extractor: backward called before forward"))?;
        let [g2, mut g1, mut g0] = grads;
        let (gd1, gskip1) = self.decov[1].backward(&g2)?;
        g1.add_assign(&gd1)?;
        let (gr, gskip2) = self.decov[0].backward(&g1)?;
        g0.add_assign(&gr)?;
        let gb = self.reduce.backward(&g0)?;
        let mut gh = self.bottleneck.backward(&gb)?;
        let mut glevels: Vec<Option<Tensor5>> = vec![None; 4];
        for i in (0..4).rev() {
            if i == 2 {
                gh.add_assign(&gskip2)?;
            } else if i == 1 {
                gh.add_assign(&gskip1)?;
            }
            let (gc, gp) = split_channels(&gh, self.widths[i])?;
            glevels[i] = Some(gp);
            gh = self.contract[i].backward(&gc)?;
        }
        // Pyramid levels are nested average pools of the input.
        let mut shapes = vec![input_shape];
        for k in 0..3 {
            shapes.push(crate::engine::pool::avgpool3d_output_shape(shapes[k], 2, 2)?);
        }
        let mut g = glevels[3].take().expect("level gradient");
        for k in (0..4).rev() {
            g = avgpool3d_backward(&g, shapes[k], 2, 2)?;
            if k > 0 {
                g.add_assign(glevels[k - 1].as_ref().expect("level gradient"))?;
            }
        }
        gh.add_assign(&g)?;
        Ok(gh)
    }
}

impl Parameterized for FeatureExtractor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.contract.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("contract.{i}")), f);
        }
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        for (i, b) in self.decov.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("decov.{i}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.contract.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("contract.{i}")), f);
        }
        self.bottleneck.visit_params_mut(&join(prefix, "bottleneck"), f);
        self.reduce.visit_params_mut(&join(prefix, "reduce"), f);
        for (i, b) in self.decov.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("decov.{i}")), f);
        }
    }
}

/// Probability of the GGO class from the (background, GGO) logit pair.
pub fn ggo_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Head outputs at one scale: boxes (N, 4A, S, S, S), scores (N, 2A, S, S, S).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput {
    pub side: usize,
    pub anchors: usize,
    pub boxes: Tensor5,
    pub scores: Tensor5,
}

/// Raw detector output.
///
/// Flattened rows are ordered scale-major (finest first), then z, y, x of
/// the feature cell, then anchor-size index. Anchor generation uses the
/// same order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub scales: Vec<ScaleOutput>,
}

impl RawPrediction {
    pub fn zeros(layout: &[ScaleSpec], batch: usize) -> Self {
        RawPrediction {
            scales: layout
                .iter()
                .map(|s| ScaleOutput {
                    side: s.side,
                    anchors: s.anchors,
                    boxes: Tensor5::zeros(Shape5::new(batch, 4 * s.anchors, s.side, s.side, s.side)),
                    scores: Tensor5::zeros(Shape5::new(batch, 2 * s.anchors, s.side, s.side, s.side)),
                })
                .collect(),
        }
    }

    pub fn layout(&self) -> Vec<ScaleSpec> {
        self.scales
            .iter()
            .map(|s| ScaleSpec {
                side: s.side,
                anchors: s.anchors,
            })
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.scales.first().map_or(0, |s| s.boxes.shape().batch())
    }

    pub fn total_anchors(&self) -> usize {
        self.scales.iter().map(|s| s.side.pow(3) * s.anchors).sum()
    }

    /// Calls `f(scale, voxel, anchor, slab)` in flattened row order.
    fn for_each_row(&self, mut f: impl FnMut(&ScaleOutput, usize, usize, usize)) {
        for s in &self.scales {
            let slab = s.side.pow(3);
            for v in 0..slab {
                for a in 0..s.anchors {
                    f(s, v, a, slab);
                }
            }
        }
    }

    pub fn flat_boxes(&self, n: usize) -> Vec<[f64; 4]> {
        let mut out = Vec::with_capacity(self.total_anchors());
        self.for_each_row(|s, v, a, slab| {
            let d = s.boxes.data();
            let base = (n * 4 * s.anchors + 4 * a) * slab + v;
            out.push([d[base], d[base + slab], d[base + 2 * slab], d[base + 3 * slab]]);
        });
        out
    }

    pub fn flat_scores(&self, n: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.total_anchors());
        self.for_each_row(|s, v, a, slab| {
            let d = s.scores.data();
            let base = (n * 2 * s.anchors + 2 * a) * slab + v;
            out.push([d[base], d[base + slab]]);
        });
        out
    }

    pub fn ggo_probabilities(&self, n: usize) -> Vec<f64> {
        self.flat_scores(n).into_iter().map(ggo_probability).collect()
    }

    /// The (N, T, 4, 1, 1) and (N, T, 2, 1, 1) flattened views.
    pub fn flattened(&self) -> (Tensor5, Tensor5) {
        let n = self.batch();
        let t = self.total_anchors();
        let mut b = Vec::with_capacity(n * t * 4);
        let mut c = Vec::with_capacity(n * t * 2);
        for i in 0..n {
            b.extend(self.flat_boxes(i).into_iter().flatten());
            c.extend(self.flat_scores(i).into_iter().flatten());
        }
        (
            Tensor5::from_vec(Shape5::new(n, t, 4, 1, 1), b).expect("sized"),
            Tensor5::from_vec(Shape5::new(n, t, 2, 1, 1), c).expect("sized"),
        )
    }

    /// Inverse of the flattened view, one row list per batch item.
    pub fn from_flat(layout: &[ScaleSpec], boxes: &[Vec<[f64; 4]>], scores: &[Vec<[f64; 2]>]) -> Result<Self> {
        let batch = boxes.len();
        let mut out = RawPrediction::zeros(layout, batch);
        let total = out.total_anchors();
        if scores.len() != batch || boxes.iter().any(|b| b.len() != total) || scores.iter().any(|s| s.len() != total) {
            return Err(Error::config(format!(
                "flattened prediction needs {batch} x {total} rows for both boxes and scores"
            )));
        }
        for n in 0..batch {
            let mut row = 0;
            for s in &mut out.scales {
                let slab = s.side.pow(3);
                let (bd, sd) = (s.boxes.data_mut(), s.scores.data_mut());
                for v in 0..slab {
                    for a in 0..s.anchors {
                        let bb = (n * 4 * s.anchors + 4 * a) * slab + v;
                        for j in 0..4 {
                            bd[bb + j * slab] = boxes[n][row][j];
                        }
                        let sb = (n * 2 * s.anchors + 2 * a) * slab + v;
                        sd[sb] = scores[n][row][0];
                        sd[sb + slab] = scores[n][row][1];
                        row += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// The detector: feature extractor plus one head per prediction scale.
#[derive(Clone, Debug)]
pub struct PiaNet {
    config: PiaNetConfig,
    pub features: FeatureExtractor,
    pub heads: Vec<Head>,
    trace: Vec<ProbeRow>,
}

/// Layer table implied by `config` for a batch of one.
pub fn expected_layer_table(config: &PiaNetConfig) -> Vec<ProbeRow> {
    let s = config.input_cube_side;
    let c = &config.contracting_widths;
    let e = &config.expanding_widths;
    let cube = |ch: usize, side: usize| Shape5::new(1, ch, side, side, side);
    let mut rows = vec![ProbeRow::new(0, "Input", vec![cube(1, s)])];
    for i in 0..4 {
        let side = s >> (i + 1);
        rows.push(ProbeRow::new(2 * i + 1, "Conv block", vec![cube(c[i], side)]));
        rows.push(ProbeRow::new(2 * i + 2, "Concat OP", vec![cube(c[i] + 1, side)]));
    }
    rows.push(ProbeRow::new(9, "Conv block (No pooling)", vec![cube(c[4], s / 16)]));
    rows.push(ProbeRow::new(10, "1x1x1Conv", vec![cube(e[0], s / 16)]));
    rows.push(ProbeRow::new(11, "Decov OP", vec![cube(e[1], s / 8)]));
    rows.push(ProbeRow::new(12, "Decov OP", vec![cube(e[2], s / 4)]));
    for (k, p) in config.prediction_scales.iter().enumerate() {
        rows.push(ProbeRow::new(
            13 + k,
            "BoxRegressor/Classifier",
            vec![cube(4 * p.anchors, p.side), cube(2 * p.anchors, p.side)],
        ));
    }
    let t = config.total_anchors();
    rows.push(ProbeRow::new(16, "Output", vec![Shape5::new(1, t, 4, 1, 1), Shape5::new(1, t, 2, 1, 1)]));
    rows
}

fn compare_tables(got: &[ProbeRow], want: &[ProbeRow]) -> Result<()> {
    if got.len() != want.len() {
        return Err(Error::config(format!(
            "layer table has {} rows, expected {}",
            got.len(),
            want.len()
        )));
    }
    for (g, w) in got.iter().zip(want) {
        if g.shapes != w.shapes || g.row != w.row {
            return Err(Error::config(format!(
                "layer {} ({}) has shape {:?}, expected {:?}",
                w.row, w.name, g.shapes, w.shapes
            )));
        }
    }
    Ok(())
}

/// Builds the detector and checks its probed layer shapes against `config`.
pub fn build_pianet(config: PiaNetConfig, seed: u64) -> Result<PiaNet> {
    PiaNet::new(config, seed)
}

impl PiaNet {
    pub fn new(config: PiaNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let features = FeatureExtractor::new(&config, seed);
        let ch = features.output_channels();
        let heads = config
            .prediction_scales
            .iter()
            .enumerate()
            .map(|(k, p)| Head::new(ch[k], p.anchors, layer_seed(seed, 8 + 2 * k as u64)))
            .collect();
        let model = PiaNet {
            config,
            features,
            heads,
            trace: Vec::new(),
        };
        compare_tables(&model.probe_shapes()?, &expected_layer_table(&model.config))?;
        Ok(model)
    }

    pub fn config(&self) -> &PiaNetConfig {
        &self.config
    }

    fn input_shape(&self, batch: usize) -> Shape5 {
        let s = self.config.input_cube_side;
        Shape5::new(batch, 1, s, s, s)
    }

    /// Layer table obtained by propagating a batch-1 input shape through
    /// every layer.
    pub fn probe_shapes(&self) -> Result<Vec<ProbeRow>> {
        let (mut rows, maps) = self.features.infer_shapes(self.input_shape(1))?;
        let mut total = 0;
        for (k, head) in self.heads.iter().enumerate() {
            let (b, c) = head.output_shapes(maps[k])?;
            total += b.numel() / 4;
            rows.push(ProbeRow::new(13 + k, "BoxRegressor/Classifier", vec![b, c]));
        }
        rows.push(ProbeRow::new(
            16,
            "Output",
            vec![Shape5::new(1, total, 4, 1, 1), Shape5::new(1, total, 2, 1, 1)],
        ));
        Ok(rows)
    }

    /// Shapes recorded by the most recent forward pass.
    pub fn last_trace(&self) -> &[ProbeRow] {
        &self.trace
    }

    pub fn forward(&mut self, cube: &Tensor5, mode: Mode) -> Result<RawPrediction> {
        let n = cube.shape().batch();
        if n == 0 || cube.shape() != self.input_shape(n) {
            return Err(Error::config(format!(
                "detector expects input {} (any batch), got {}",
                self.input_shape(1),
                cube.shape()
            )));
        }
        cube.check_finite("input")?;
        let scale = self.config.input_scale;
        let x = cube.map(|v| v * scale);
        let maps = self.features.forward(&x, mode)?;
        drop(x);
        let mut trace = self.features.last_trace().to_vec();
        let mut scales = Vec::with_capacity(3);
        for (k, head) in self.heads.iter_mut().enumerate() {
            let (b, c) = head.forward(&maps[k], mode)?;
            b.check_finite(&format!("heads.{k}.boxes"))?;
            c.check_finite(&format!("heads.{k}.scores"))?;
            trace.push(ProbeRow::new(13 + k, "BoxRegressor/Classifier", vec![b.shape(), c.shape()]));
            let p = self.config.prediction_scales[k];
            scales.push(ScaleOutput {
                side: p.side,
                anchors: p.anchors,
                boxes: b,
                scores: c,
            });
        }
        let pred = RawPrediction { scales };
        let t = pred.total_anchors();
        trace.push(ProbeRow::new(16, "Output", vec![Shape5::new(n, t, 4, 1, 1), Shape5::new(n, t, 2, 1, 1)]));
        self.trace = trace;
        Ok(pred)
    }

    /// Back-propagates head-output gradients; returns the input gradient.
    pub fn backward(&mut self, grad: &RawPrediction) -> Result<Tensor5> {
        if grad.scales.len() != self.heads.len() {
            return Err(Error::config("prediction gradient has the wrong number of scales"));
        }
        let mut maps = Vec::with_capacity(3);
        for (head, g) in self.heads.iter_mut().zip(&grad.scales) {
            maps.push(head.backward(&g.boxes, &g.scores)?);
        }
        let maps: [Tensor5; 3] = maps.try_into().expect("three scales");
        let gx = self.features.backward(maps)?;
        let scale = self.config.input_scale;
        Ok(gx.map(|v| v * scale))
    }
}

impl Parameterized for PiaNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.features.visit_params(&join(prefix, "features"), f);
        for (k, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("heads.{k}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.features.visit_params_mut(&join(prefix, "features"), f);
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("heads.{k}")), f);
        }
    }
}
