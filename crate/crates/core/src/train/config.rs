use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::engine::SgdConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the rate at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of `epochs`.
    pub lr_milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub loss: LossConfig,
    pub hard_negative_mining: bool,
    /// K = max(factor * positives in the batch, floor).
    pub hard_negative_factor: usize,
    pub hard_negative_floor: usize,
    /// Random pool size = pool_factor * K.
    pub pool_factor: usize,
    /// Anchors whose best IoU is below this are negative candidates.
    pub neg_iou_max: f64,
    /// Share of stage-2 cubes drawn away from nodules.
    pub background_fraction: f64,
    /// Largest offset of a nodule from the cube center, as a fraction of the side.
    pub center_jitter: f64,
    /// Stage-2 cubes per epoch; 0 means one per training scan.
    pub cubes_per_epoch: usize,
    pub augment: AugmentConfig,
    /// Stop after this many completed epochs; the schedule still follows `epochs`.
    pub stop_after_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            learning_rate: 0.01,
            lr_decay: 0.1,
            lr_milestones: vec![0.6, 0.85],
            momentum: 0.9,
            weight_decay: 1e-4,
            stage1_batch: 8,
            stage2_batch: 2,
            loss: LossConfig::default(),
            hard_negative_mining: true,
            hard_negative_factor: 2,
            hard_negative_floor: 8,
            pool_factor: 16,
            neg_iou_max: 0.02,
            background_fraction: 0.2,
            center_jitter: 0.25,
            cubes_per_epoch: 0,
            augment: AugmentConfig::default(),
            stop_after_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay {} must be positive", self.lr_decay));
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.hard_negative_floor == 0 || self.pool_factor == 0 {
            return bad("hard negative K and pool factor must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return bad(format!("background_fraction {} outside [0, 1]", self.background_fraction));
        }
        if !(0.0..0.5).contains(&self.center_jitter) {
            return bad(format!("center_jitter {} outside [0, 0.5)", self.center_jitter));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones must be fractions in [0, 1]".into());
        }
        self.loss.validate()
    }

    /// Epoch index at which this run stops.
    pub fn end_epoch(&self) -> usize {
        self.stop_after_epoch.map_or(self.epochs, |s| s.min(self.epochs))
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.epochs as f64).round())
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Number of hard negatives kept for a batch with `positives` positives.
    pub fn hard_negative_k(&self, positives: usize) -> usize {
        (self.hard_negative_factor * positives).max(self.hard_negative_floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig {
            epochs: 20,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(11), 0.01);
        assert!((c.lr_at(12) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(17) - 0.0001).abs() < 1e-15);
        assert_eq!(c.hard_negative_k(1), 8);
        assert_eq!(c.hard_negative_k(7), 14);
    }
}
