//! Inference: cube forward pass, decoding, suppression and scan-level stitching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{decode_box, generate_anchors, nms, AnchorSet, Detection, DEFAULT_NMS_THRESHOLD};
use crate::data::{cube_at, cube_origins, stitch_detections, DetectionRecord, Volume};
use crate::engine::Mode;
use crate::error::{Error, Result};
use crate::model::{PiaNet, RawPrediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Anchors scoring below this are dropped before suppression.
    pub score_threshold: f64,
    /// Highest-scoring anchors kept per cube before suppression.
    pub pre_nms_top_k: usize,
    pub nms_threshold: f64,
    /// Cap on detections per scan after stitching (0 = no cap).
    pub max_detections: usize,
    /// Tiling stride; 0 means half the cube side.
    pub stride: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.01,
            pre_nms_top_k: 200,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            max_detections: 100,
            stride: 0,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::config("score_threshold and nms_threshold must lie in [0, 1]"));
        }
        if self.pre_nms_top_k == 0 {
            return Err(Error::config("pre_nms_top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Cube-local detections of batch item `n`.
pub fn decode_predictions(pred: &RawPrediction, n: usize, anchors: &AnchorSet, cfg: &DetectConfig) -> Vec<Detection> {
    let probs = pred.ggo_probabilities(n);
    let offsets = pred.flat_boxes(n);
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= cfg.score_threshold).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(cfg.pre_nms_top_k);
    let dets: Vec<Detection> = idx
        .into_iter()
        .map(|i| Detection {
            cube: decode_box(&offsets[i], &anchors.boxes[i]),
            score: probs[i],
        })
        .filter(|d| d.cube.is_valid())
        .collect();
    nms(&dets, cfg.nms_threshold)
}

/// Tiles a preprocessed volume, detects in every cube and stitches the
/// results in scan voxel coordinates. Cubes run in parallel; the output
/// does not depend on the thread count.
pub fn detect_volume(net: &PiaNet, v: &Volume, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let side = net.config().input_cube_side;
    let stride = if cfg.stride == 0 { side / 2 } else { cfg.stride };
    let anchors = generate_anchors(net.config())?;
    let origins = cube_origins(v.extents, side, stride)?;
    let shared: &PiaNet = net;
    let per_cube = origins
        .par_iter()
        .map_init(
            || shared.clone(),
            |local, o| {
                let origin = o.map(|x| x as i64);
                let sample = cube_at(v, origin, side, &[]);
                let pred = local.forward(&sample.cube, Mode::Infer)?;
                Ok((origin, decode_predictions(&pred, 0, &anchors, cfg)))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let mut dets = stitch_detections(&per_cube, cfg.nms_threshold);
    if cfg.max_detections > 0 {
        dets.truncate(cfg.max_detections);
    }
    Ok(dets)
}

/// World-coordinate records for the detections CSV.
pub fn to_records(v: &Volume, scan_id: &str, dets: &[Detection]) -> Vec<DetectionRecord> {
    dets.iter()
        .map(|d| {
            let w = v.voxel_to_world(d.cube.center());
            DetectionRecord {
                scan_id: scan_id.to_string(),
                x_mm: w[0],
                y_mm: w[1],
                z_mm: w[2],
                r_mm: d.cube.r * v.spacing[2],
                score: d.score,
            }
        })
        .collect()
}
