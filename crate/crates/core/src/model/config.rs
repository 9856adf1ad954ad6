use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature-map side and number of anchor sizes for one prediction scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub side: usize,
    pub anchors: usize,
}

/// Architecture hyperparameters of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiaNetConfig {
    pub input_cube_side: usize,
    /// Four pooled Conv blocks followed by the unpooled one.
    pub contracting_widths: Vec<usize>,
    /// 1x1x1 reduction at side/16, then the two Decov outputs.
    pub expanding_widths: Vec<usize>,
    /// Finest scale first.
    pub prediction_scales: Vec<ScaleSpec>,
    pub anchor_sides_mm: Vec<f64>,
    /// Multiplier applied to voxel values on entry.
    pub input_scale: f64,
}

impl Default for PiaNetConfig {
    fn default() -> Self {
        PiaNetConfig {
            input_cube_side: 128,
            contracting_widths: vec![24, 32, 64, 64, 64],
            expanding_widths: vec![64, 64, 128],
            prediction_scales: vec![
                ScaleSpec { side: 32, anchors: 1 },
                ScaleSpec { side: 16, anchors: 3 },
                ScaleSpec { side: 8, anchors: 5 },
            ],
            anchor_sides_mm: vec![4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 26.0, 32.0],
            input_scale: 1.0 / 255.0,
        }
    }
}

impl PiaNetConfig {
    /// Default layout at a smaller cube side with every width divided by
    /// `width_divisor` (rounded up). Anchor sides and grid steps stay in mm.
    pub fn reduced(side: usize, width_divisor: usize) -> Self {
        let base = PiaNetConfig::default();
        let div = |w: &usize| w.div_ceil(width_divisor.max(1));
        PiaNetConfig {
            input_cube_side: side,
            contracting_widths: base.contracting_widths.iter().map(div).collect(),
            expanding_widths: base.expanding_widths.iter().map(div).collect(),
            prediction_scales: base
                .prediction_scales
                .iter()
                .map(|s| ScaleSpec {
                    side: side * s.side / base.input_cube_side,
                    anchors: s.anchors,
                })
                .collect(),
            anchor_sides_mm: base.anchor_sides_mm.clone(),
            input_scale: base.input_scale,
        }
    }

    pub fn total_anchors(&self) -> usize {
        self.prediction_scales.iter().map(|s| s.side.pow(3) * s.anchors).sum()
    }

    /// Feature-map side of prediction scale `k` implied by the architecture.
    pub fn scale_side(&self, k: usize) -> usize {
        self.input_cube_side >> (2 + k)
    }

    pub fn classifier_patch_side(&self) -> usize {
        self.input_cube_side / 2
    }

    /// Anchor sides belonging to prediction scale `k`.
    pub fn anchor_sides_for_scale(&self, k: usize) -> &[f64] {
        let start: usize = self.prediction_scales[..k].iter().map(|s| s.anchors).sum();
        &self.anchor_sides_mm[start..start + self.prediction_scales[k].anchors]
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.input_cube_side;
        if side < 16 || side % 16 != 0 {
            return Err(Error::config(format!("input_cube_side {side} must be a positive multiple of 16")));
        }
        if self.contracting_widths.len() != 5 || self.contracting_widths.contains(&0) {
            return Err(Error::config("contracting_widths needs five positive entries"));
        }
        if self.expanding_widths.len() != 3 || self.expanding_widths.contains(&0) {
            return Err(Error::config("expanding_widths needs three positive entries"));
        }
        let (c, e) = (&self.contracting_widths, &self.expanding_widths);
        // Unpooling reuses the contracting max-pool indices, so the widths must agree.
        if e[0] != c[3] || e[1] != c[2] {
            return Err(Error::config(format!(
                "expanding widths {:?} must reuse contracting widths 4 and 3 ({} and {}) before each unpooling",
                e, c[3], c[2]
            )));
        }
        if self.prediction_scales.len() != 3 {
            return Err(Error::config("prediction_scales needs three entries, finest first"));
        }
        for (k, s) in self.prediction_scales.iter().enumerate() {
            if s.side != self.scale_side(k) {
                return Err(Error::config(format!(
                    "prediction scale {k} has side {}, the architecture produces {}",
                    s.side,
                    self.scale_side(k)
                )));
            }
            if s.anchors == 0 {
                return Err(Error::config(format!("prediction scale {k} has no anchor sizes")));
            }
        }
        let want: usize = self.prediction_scales.iter().map(|s| s.anchors).sum();
        if self.anchor_sides_mm.len() != want {
            return Err(Error::config(format!(
                "anchor_sides_mm has {} entries, prediction scales declare {want}",
                self.anchor_sides_mm.len()
            )));
        }
        if self.anchor_sides_mm.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("anchor sides must be positive and finite"));
        }
        if self.anchor_sides_mm.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("anchor_sides_mm must be strictly increasing"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::config("input_scale must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_totals() {
        let c = PiaNetConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_anchors(), 47_616);
        assert_eq!(c.anchor_sides_for_scale(1), &[6.0, 8.0, 10.0]);
        assert_eq!(c.classifier_patch_side(), 64);
    }

    #[test]
    fn reduced_is_valid() {
        let c = PiaNetConfig::reduced(32, 4);
        c.validate().unwrap();
        assert_eq!(c.contracting_widths, vec![6, 8, 16, 16, 16]);
        assert_eq!(c.expanding_widths, vec![16, 16, 32]);
        assert_eq!(c.total_anchors(), 8usize.pow(3) + 3 * 64 + 5 * 8);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = PiaNetConfig::default();
        c.anchor_sides_mm.swap(0, 1);
        assert!(c.validate().is_err());
        let mut c = PiaNetConfig::default();
        c.prediction_scales[2].anchors = 4;
        assert!(c.validate().is_err());
        let mut c = PiaNetConfig::default();
        c.input_cube_side = 120;
        assert!(c.validate().is_err());
        let mut c = PiaNetConfig::default();
        c.expanding_widths[0] = 32;
        assert!(c.validate().is_err());
    }
}
