//! Finite-difference verification suite over every engine layer and the
//! complete detector loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::{generate_anchors, match_anchors, AnchorSet, BoxCube};
use crate::engine::gradcheck::{gradcheck, GradCheckOptions, GradCheckReport, LayerObjective, Objective};
use crate::engine::{
    maxpool3d, BatchNorm3d, Conv3d, Deconv3d, GlobalAvgPool, Layer, Linear, MaxPool3d, MaxUnpool3d, Mode, Param,
    Parameterized, PoolIndices, Relu, Shape5, Tensor5,
};
use crate::error::Result;
use crate::loss::{logit_gradients, multitask_loss, LossConfig, LossTargets};
use crate::model::{PiaNet, PiaNetConfig, RawPrediction};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn uniform(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn layer_case<L: Layer>(
    name: &str,
    layer: L,
    input: Shape5,
    output: Shape5,
    kink_radius: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SuiteEntry> {
    let x = uniform(input, rng);
    let mut obj = LayerObjective::new(layer, uniform(output, rng));
    obj.kink_radius = kink_radius;
    let report = gradcheck(&mut obj, &x, LAYER_TOLERANCE, &GradCheckOptions::default())?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

struct UnpoolProbe {
    indices: PoolIndices,
    probe: Tensor5,
    layer: MaxUnpool3d,
}

impl Objective for UnpoolProbe {
    fn loss(&mut self, input: &Tensor5) -> Result<f64> {
        let y = self.layer.forward(input, &self.indices)?;
        Ok(y.data().iter().zip(self.probe.data()).map(|(a, b)| a * b).sum())
    }

    fn loss_and_grad(&mut self, input: &Tensor5) -> Result<(f64, Tensor5)> {
        let l = self.loss(input)?;
        Ok((l, self.layer.backward(&self.probe)?))
    }

    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Checks every layer type on small random instances at 1e-4.
pub fn layer_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new;
    let mut bn = BatchNorm3d::new(3);
    bn.scale.value = vec![0.5, 1.5, -0.7];
    bn.shift.value = vec![0.1, -0.2, 0.3];
    let mut out = vec![
        layer_case("conv3d", Conv3d::new(2, 3, 3, 1, 1, seed), s(2, 2, 4, 4, 4), s(2, 3, 4, 4, 4), None, &mut rng)?,
        layer_case("conv3d_stride2", Conv3d::new(2, 2, 3, 2, 1, seed + 1), s(1, 2, 5, 5, 5), s(1, 2, 3, 3, 3), None, &mut rng)?,
        layer_case("conv3d_1x1", Conv3d::new(4, 2, 1, 1, 0, seed + 2), s(2, 4, 3, 3, 3), s(2, 2, 3, 3, 3), None, &mut rng)?,
        layer_case("deconv3d", Deconv3d::new(3, 2, 3, 1, 1, seed + 3), s(1, 3, 3, 3, 3), s(1, 2, 3, 3, 3), None, &mut rng)?,
        layer_case("deconv3d_stride2", Deconv3d::new(3, 2, 2, 2, 0, seed + 4), s(1, 3, 3, 3, 3), s(1, 2, 6, 6, 6), None, &mut rng)?,
        layer_case("batchnorm3d", bn, s(2, 3, 3, 3, 3), s(2, 3, 3, 3, 3), None, &mut rng)?,
        layer_case("relu", Relu::default(), s(1, 2, 3, 3, 3), s(1, 2, 3, 3, 3), Some(1e-4), &mut rng)?,
        layer_case("maxpool3d", MaxPool3d::default(), s(1, 2, 4, 4, 4), s(1, 2, 2, 2, 2), None, &mut rng)?,
        layer_case("linear", Linear::new(4, 2, seed + 5), s(3, 4, 1, 1, 1), s(3, 2, 1, 1, 1), None, &mut rng)?,
        layer_case("global_avgpool", GlobalAvgPool::default(), s(2, 3, 2, 3, 2), s(2, 3, 1, 1, 1), None, &mut rng)?,
    ];
    let src = uniform(s(1, 2, 4, 4, 4), &mut rng);
    let (pooled, indices) = maxpool3d(&src, 2)?;
    let mut obj = UnpoolProbe {
        indices,
        probe: uniform(src.shape(), &mut rng),
        layer: MaxUnpool3d::default(),
    };
    out.push(SuiteEntry {
        name: "maxunpool3d".into(),
        report: gradcheck(&mut obj, &pooled, LAYER_TOLERANCE, &GradCheckOptions::default())?,
    });
    Ok(out)
}

/// Multi-task loss of the whole detector against fixed targets.
pub struct DetectorLoss {
    pub net: PiaNet,
    pub targets: Vec<LossTargets>,
    pub loss: LossConfig,
}

impl DetectorLoss {
    /// One nodule per cube, matched against the anchors, with a random subset
    /// of the negatives held fixed.
    pub fn new(config: PiaNetConfig, batch: usize, seed: u64) -> Result<(Self, Tensor5)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = config.input_cube_side;
        let anchors: AnchorSet = generate_anchors(&config)?;
        let mut targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let r = rng.gen_range(4.0..side as f64 / 3.0);
            let lo = r / 2.0 + 1.0;
            let hi = side as f64 - lo;
            let gt = BoxCube::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi), r);
            let m = match_anchors(&anchors, &[gt], 0.02)?;
            let negs = m.negatives();
            let keep = sample(&mut rng, negs.len(), negs.len().min(32)).into_iter().map(|i| negs[i]).collect();
            targets.push(LossTargets::from_assignment(&m, &anchors, &[gt], Some(keep))?);
        }
        let x = Tensor5::from_fn(Shape5::new(batch, 1, side, side, side), |_| rng.gen_range(8.0..248.0));
        let net = PiaNet::new(config, seed)?;
        Ok((
            DetectorLoss {
                net,
                targets,
                loss: LossConfig::default(),
            },
            x,
        ))
    }
}

impl Objective for DetectorLoss {
    fn loss(&mut self, input: &Tensor5) -> Result<f64> {
        let pred = self.net.forward(input, Mode::Train)?;
        let mut total = 0.0;
        for (n, t) in self.targets.iter().enumerate() {
            total += multitask_loss(t, &pred.ggo_probabilities(n), &pred.flat_boxes(n), &self.loss)?.0.total;
        }
        Ok(total)
    }

    fn loss_and_grad(&mut self, input: &Tensor5) -> Result<(f64, Tensor5)> {
        let pred = self.net.forward(input, Mode::Train)?;
        let mut total = 0.0;
        let mut gb = Vec::new();
        let mut gs = Vec::new();
        for (n, t) in self.targets.iter().enumerate() {
            let probs = pred.ggo_probabilities(n);
            let (b, g) = multitask_loss(t, &probs, &pred.flat_boxes(n), &self.loss)?;
            total += b.total;
            gs.push(logit_gradients(&probs, &g.prob));
            gb.push(g.offsets);
        }
        let grad = RawPrediction::from_flat(&pred.layout(), &gb, &gs)?;
        self.net.zero_grad();
        let gin = self.net.backward(&grad)?;
        Ok((total, gin))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut("", f);
    }
}

/// Sampled finite-difference check of the full loss through `config`.
pub fn network_check(config: PiaNetConfig, seed: u64, param_fraction: f64, input_entries: usize) -> Result<SuiteEntry> {
    let (mut obj, x) = DetectorLoss::new(config, 2, seed)?;
    let opts = GradCheckOptions {
        param_fraction,
        max_input_entries: Some(input_entries),
        skip_kinks: true,
        max_skip_fraction: 0.2,
        abs_floor: 1e-4,
        seed,
        ..Default::default()
    };
    Ok(SuiteEntry {
        name: "detector_loss".into(),
        report: gradcheck(&mut obj, &x, NETWORK_TOLERANCE, &opts)?,
    })
}
