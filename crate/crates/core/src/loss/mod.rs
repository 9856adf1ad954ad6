//! Multi-task detection loss: binary cross-entropy on the GGO confidence
//! plus a weighted smooth-L1 box regression term.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode_box, AnchorSet, BoxCube, MatchAssignment};
use crate::error::{Error, Result};

/// Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the localization term.
    pub alpha: f64,
    /// Center-versus-size balance inside the localization term.
    pub beta: f64,
    /// Average instead of sum: confidence over used anchors, localization
    /// over positives.
    pub mean_reduction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.6,
            mean_reduction: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("loss alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("loss beta {} must lie in [0, 1]", self.beta)));
        }
        Ok(())
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Anchors entering one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    /// (anchor index, encoded regression target).
    pub positives: Vec<(usize, [f64; 4])>,
    pub negatives: Vec<usize>,
}

impl LossTargets {
    /// Positives from the assignment; `negatives` overrides the full
    /// negative-candidate list (e.g. with a mined subset).
    pub fn from_assignment(
        assignment: &MatchAssignment,
        anchors: &AnchorSet,
        gts: &[BoxCube],
        negatives: Option<Vec<usize>>,
    ) -> Result<Self> {
        let positives = assignment
            .positives()
            .into_iter()
            .map(|(a, g)| Ok((a, encode_box(&gts[g], &anchors.boxes[a])?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossTargets {
            positives,
            negatives: negatives.unwrap_or_else(|| assignment.negatives()),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub confidence: f64,
    pub localization: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Gradients with respect to the per-anchor GGO probability and offsets.
/// Entries for anchors outside the targets are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub prob: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

fn clamped(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

/// Cross-entropy over positives and the given negatives; returns the loss
/// and accumulates d/dp into `grad`.
pub fn confidence_loss(positives: &[usize], negatives: &[usize], probs: &[f64], grad: &mut [f64], weight: f64) -> f64 {
    let mut loss = 0.0;
    for &i in positives {
        let (p, live) = clamped(probs[i]);
        loss -= p.ln();
        if live {
            grad[i] -= weight / p;
        }
    }
    for &i in negatives {
        let (p, live) = clamped(probs[i]);
        loss -= (1.0 - p).ln();
        if live {
            grad[i] += weight / (1.0 - p);
        }
    }
    loss
}

/// Weighted smooth-L1 over positives; accumulates d/d(offset) into `grad`.
pub fn localization_loss(positives: &[(usize, [f64; 4])], offsets: &[[f64; 4]], beta: f64, grad: &mut [[f64; 4]], weight: f64) -> f64 {
    let mut loss = 0.0;
    for &(i, t) in positives {
        let p = offsets[i];
        for k in 0..4 {
            let w = if k < 3 { beta } else { 1.0 - beta };
            let d = t[k] - p[k];
            loss += w * smooth_l1(d);
            grad[i][k] -= weight * w * smooth_l1_grad(d);
        }
    }
    loss
}

/// Full objective and its gradients.
pub fn multitask_loss(targets: &LossTargets, probs: &[f64], offsets: &[[f64; 4]], cfg: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    cfg.validate()?;
    let n = probs.len();
    if offsets.len() != n {
        return Err(Error::config(format!("{n} probabilities but {} offset rows", offsets.len())));
    }
    let bad = targets
        .positives
        .iter()
        .map(|p| p.0)
        .chain(targets.negatives.iter().copied())
        .find(|&i| i >= n);
    if let Some(i) = bad {
        return Err(Error::config(format!("loss target anchor {i} out of range ({n} anchors)")));
    }
    let pos: Vec<usize> = targets.positives.iter().map(|p| p.0).collect();
    let (cw, lw) = if cfg.mean_reduction {
        (
            1.0 / (pos.len() + targets.negatives.len()).max(1) as f64,
            1.0 / pos.len().max(1) as f64,
        )
    } else {
        (1.0, 1.0)
    };
    let mut grads = LossGrads {
        prob: vec![0.0; n],
        offsets: vec![[0.0; 4]; n],
    };
    let conf = cw * confidence_loss(&pos, &targets.negatives, probs, &mut grads.prob, cw);
    let loc = lw * localization_loss(&targets.positives, offsets, cfg.beta, &mut grads.offsets, cfg.alpha * lw);
    let breakdown = LossBreakdown {
        total: conf + cfg.alpha * loc,
        confidence: conf,
        localization: loc,
        positives: pos.len(),
        negatives: targets.negatives.len(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::numeric("loss", format!("total loss is {}", breakdown.total)));
    }
    Ok((breakdown, grads))
}

/// Chains d/dp through p = softmax(l)[1] to the (background, GGO) logits.
pub fn logit_gradients(probs: &[f64], dprob: &[f64]) -> Vec<[f64; 2]> {
    probs
        .iter()
        .zip(dprob)
        .map(|(&p, &g)| {
            let d = g * p * (1.0 - p);
            [-d, d]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-3.0), 2.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert!((smooth_l1(1.0 - 1e-12) - 0.5).abs() < 1e-11);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert!((smooth_l1_grad(1.0 - 1e-12) - 1.0).abs() < 1e-11);
        assert_eq!(smooth_l1_grad(-1.0), -1.0);
    }

    #[test]
    fn worked_totals() {
        let targets = LossTargets {
            positives: vec![(0, [0.5, 0.0, 0.0, 0.0])],
            negatives: vec![],
        };
        let (b, _) = multitask_loss(&targets, &[0.5], &[[0.0; 4]], &LossConfig::default()).unwrap();
        assert!((b.confidence - 2f64.ln()).abs() < 1e-12);
        assert!((b.localization - 0.075).abs() < 1e-12);
        assert!((b.total - (2f64.ln() + 0.075)).abs() < 1e-12);
        assert!((b.total - 0.7681).abs() < 1e-4);
        let no_loc = LossConfig { alpha: 0.0, ..Default::default() };
        let (b, g) = multitask_loss(&targets, &[0.5], &[[0.0; 4]], &no_loc).unwrap();
        assert_eq!(b.total, b.confidence);
        assert_eq!(g.offsets[0], [0.0; 4]);
    }

    #[test]
    fn empty_targets_give_zero() {
        let (b, g) = multitask_loss(&LossTargets::default(), &[0.3, 0.9], &[[1.0; 4]; 2], &LossConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.prob.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_positive_is_nearly_free() {
        let t = LossTargets {
            positives: vec![(0, [0.0; 4])],
            negatives: vec![],
        };
        let (b, _) = multitask_loss(&t, &[1.0 - 1e-9], &[[0.0; 4]], &LossConfig::default()).unwrap();
        assert!(b.total < 1e-6);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(LossConfig { beta: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
    }
}
