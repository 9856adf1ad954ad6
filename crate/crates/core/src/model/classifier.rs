use super::config::PiaNetConfig;
use super::pianet::{layer_seed, FeatureExtractor, PiaNet};
use crate::engine::param::join;
use crate::engine::{
    import_params, layers::softmax_channels, GlobalAvgPool, Layer, Linear, Mode, NamedTensor, Param, Parameterized,
    Shape5, Tensor5,
};
use crate::error::{Error, Result};

/// Prefix shared by the feature-extractor parameters of both models.
pub const FEATURE_PREFIX: &str = "features";

/// Patch classifier used for pretraining: feature extractor, global average
/// pooling over the finest map, and a linear layer to two logits
/// (non-GGO, GGO).
#[derive(Clone, Debug)]
pub struct Stage1Classifier {
    pub features: FeatureExtractor,
    gap: GlobalAvgPool,
    pub fc: Linear,
    patch_side: usize,
    input_scale: f64,
}

pub fn build_stage1_classifier(features: FeatureExtractor, config: &PiaNetConfig, seed: u64) -> Result<Stage1Classifier> {
    config.validate()?;
    let patch = config.classifier_patch_side();
    if patch % 16 != 0 {
        return Err(Error::config(format!(
            "classifier patch side {patch} must be divisible by 16 (cube side multiple of 32)"
        )));
    }
    let (_, maps) = features.infer_shapes(Shape5::new(1, 1, patch, patch, patch))?;
    let ch = maps[0].channels();
    if ch != config.expanding_widths[2] {
        return Err(Error::config(format!(
            "feature module ends with {ch} channels, configuration declares {}",
            config.expanding_widths[2]
        )));
    }
    Ok(Stage1Classifier {
        features,
        gap: GlobalAvgPool::default(),
        fc: Linear::new(ch, 2, layer_seed(seed, 100)),
        patch_side: patch,
        input_scale: config.input_scale,
    })
}

impl Stage1Classifier {
    /// Classifier with a freshly initialized feature extractor.
    pub fn new(config: &PiaNetConfig, seed: u64) -> Result<Self> {
        build_stage1_classifier(FeatureExtractor::new(config, seed), config, seed)
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    /// Raw logits, shape (N, 2, 1, 1, 1), for patches on the same intensity
    /// scale as detector cubes.
    pub fn logits(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let p = self.patch_side;
        let s = x.shape();
        if s.batch() == 0 || s != Shape5::new(s.batch(), 1, p, p, p) {
            return Err(Error::config(format!(
                "classifier expects patches of shape {}, got {s}",
                Shape5::new(1, 1, p, p, p)
            )));
        }
        x.check_finite("input")?;
        let scale = self.input_scale;
        let [fine, _, _] = self.features.forward(&x.map(|v| v * scale), mode)?;
        let pooled = self.gap.forward(&fine, mode)?;
        let y = self.fc.forward(&pooled, mode)?;
        y.check_finite("classifier.fc")?;
        Ok(y)
    }

    /// Class probabilities, shape (N, 2, 1, 1, 1).
    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        Ok(softmax_channels(&self.logits(x, mode)?))
    }

    /// Back-propagates a logit gradient; returns the patch gradient.
    pub fn backward(&mut self, grad_logits: &Tensor5) -> Result<Tensor5> {
        let g = self.fc.backward(grad_logits)?;
        let fine = self.gap.backward(&g)?;
        let n = fine.shape().batch();
        let p = self.patch_side;
        let ch = self.features.output_channels();
        let zeros = |c: usize, side: usize| Tensor5::zeros(Shape5::new(n, c, side, side, side));
        let g = self.features.backward([fine, zeros(ch[1], p / 8), zeros(ch[2], p / 16)])?;
        let scale = self.input_scale;
        Ok(g.map(|v| v * scale))
    }
}

impl Parameterized for Stage1Classifier {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.features.visit_params(&join(prefix, FEATURE_PREFIX), f);
        self.fc.visit_params(&join(prefix, "classifier.fc"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.features.visit_params_mut(&join(prefix, FEATURE_PREFIX), f);
        self.fc.visit_params_mut(&join(prefix, "classifier.fc"), f);
    }
}

/// Mean softmax cross-entropy over the batch and its logit gradient.
pub fn softmax_cross_entropy(logits: &Tensor5, labels: &[usize]) -> Result<(f64, Tensor5)> {
    let s = logits.shape();
    let c = s.channels();
    if s.slab() != 1 || labels.len() != s.batch() || labels.iter().any(|&l| l >= c) {
        return Err(Error::config(format!(
            "cross-entropy needs (N,C,1,1,1) logits and N labels below C; got {s} and {} labels",
            labels.len()
        )));
    }
    let probs = softmax_channels(logits);
    let n = s.batch() as f64;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs.data()[i * c + l].max(1e-300).ln();
        grad.data_mut()[i * c + l] -= 1.0;
    }
    for g in grad.data_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// Copies every feature-extractor tensor from `source` into `model`,
/// leaving the heads untouched. Fails without writing anything if a tensor
/// is missing or has the wrong shape.
pub fn transfer_features(source: &[NamedTensor], model: &mut PiaNet) -> Result<usize> {
    let prefix = format!("{FEATURE_PREFIX}.");
    import_params(model, source, &|name: &str| name.starts_with(&prefix))
}
