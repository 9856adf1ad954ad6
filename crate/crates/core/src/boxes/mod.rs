//! Cube boxes, the anchor grid, ground-truth matching, offset encoding and
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PiaNetConfig;

/// Axis-aligned cube: center (x, y, z) in voxels and side `r` in mm
/// (1 voxel = 1 mm after resampling).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCube {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl BoxCube {
    pub const fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        BoxCube { x, y, z, r }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_valid(&self) -> bool {
        self.r > 0.0 && self.r.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn volume(&self) -> f64 {
        self.r * self.r * self.r
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        BoxCube::new(self.x + d[0], self.y + d[1], self.z + d[2], self.r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cube: BoxCube,
    pub score: f64,
}

fn overlap_1d(a: f64, ar: f64, b: f64, br: f64) -> f64 {
    let lo = (a - ar / 2.0).max(b - br / 2.0);
    let hi = (a + ar / 2.0).min(b + br / 2.0);
    (hi - lo).max(0.0)
}

/// Intersection over union of two cubes.
pub fn iou_cube(a: &BoxCube, b: &BoxCube) -> f64 {
    if a == b {
        return 1.0;
    }
    let ix = overlap_1d(a.x, a.r, b.x, b.r);
    if ix == 0.0 {
        return 0.0;
    }
    let iy = overlap_1d(a.y, a.r, b.y, b.r);
    if iy == 0.0 {
        return 0.0;
    }
    let iz = overlap_1d(a.z, a.r, b.z, b.r);
    let inter = ix * iy * iz;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Every anchor of the detector, in flattened prediction-row order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BoxCube>,
    pub scale: Vec<u8>,
    pub size_index: Vec<u8>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Anchors centered on feature cells: cell n of a side-S map covering a
/// side-D cube sits at (n + 0.5) * D / S.
pub fn generate_anchors(config: &PiaNetConfig) -> Result<AnchorSet> {
    config.validate()?;
    let total = config.total_anchors();
    let mut set = AnchorSet {
        boxes: Vec::with_capacity(total),
        scale: Vec::with_capacity(total),
        size_index: Vec::with_capacity(total),
    };
    let d = config.input_cube_side as f64;
    for (k, spec) in config.prediction_scales.iter().enumerate() {
        let step = d / spec.side as f64;
        let sides = config.anchor_sides_for_scale(k);
        let c = |n: usize| (n as f64 + 0.5) * step;
        for z in 0..spec.side {
            for y in 0..spec.side {
                for x in 0..spec.side {
                    for (a, &r) in sides.iter().enumerate() {
                        set.boxes.push(BoxCube::new(c(x), c(y), c(z), r));
                        set.scale.push(k as u8);
                        set.size_index.push(a as u8);
                    }
                }
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to ground truth `usize`.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// Matched anchor per ground truth; `None` only if it overlaps no anchor.
    pub gt_anchor: Vec<Option<usize>>,
    pub gt_iou: Vec<f64>,
    pub labels: Vec<AnchorLabel>,
}

impl MatchAssignment {
    /// (anchor, ground truth) pairs in ground-truth order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.gt_anchor
            .iter()
            .enumerate()
            .filter_map(|(g, a)| a.map(|a| (a, g)))
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Each ground truth takes its highest-IoU anchor. Conflicts over one
/// anchor are resolved greedily: the globally largest remaining IoU is
/// assigned first (ties to the lower anchor index, then the lower ground
/// truth index), and the loser moves to its next-best free anchor. Anchors
/// whose IoU with every ground truth is below `neg_iou_max` are negative;
/// the rest are ignored.
pub fn match_anchors(anchors: &AnchorSet, gts: &[BoxCube], neg_iou_max: f64) -> Result<MatchAssignment> {
    if anchors.is_empty() {
        return Err(Error::config("anchor matching needs at least one anchor"));
    }
    if let Some(g) = gts.iter().find(|g| !g.is_valid()) {
        return Err(Error::data(format!("invalid ground-truth box {g:?}")));
    }
    let n = anchors.len();
    let mut max_iou = vec![0.0f64; n];
    // Per gt: overlapping anchors sorted best first.
    let mut cands: Vec<Vec<(f64, usize)>> = Vec::with_capacity(gts.len());
    for g in gts {
        let mut c = Vec::new();
        for (i, a) in anchors.boxes.iter().enumerate() {
            let v = iou_cube(a, g);
            if v > 0.0 {
                c.push((v, i));
                if v > max_iou[i] {
                    max_iou[i] = v;
                }
            }
        }
        c.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        cands.push(c);
    }
    let mut taken = vec![false; n];
    let mut cursor = vec![0usize; gts.len()];
    let mut gt_anchor = vec![None; gts.len()];
    let mut gt_iou = vec![0.0; gts.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for g in 0..gts.len() {
            if gt_anchor[g].is_some() {
                continue;
            }
            while cursor[g] < cands[g].len() && taken[cands[g][cursor[g]].1] {
                cursor[g] += 1;
            }
            if let Some(&(v, a)) = cands[g].get(cursor[g]) {
                let better = match best {
                    None => true,
                    Some((bv, ba, bg)) => v > bv || (v == bv && (a < ba || (a == ba && g < bg))),
                };
                if better {
                    best = Some((v, a, g));
                }
            }
        }
        let Some((v, a, g)) = best else { break };
        taken[a] = true;
        gt_anchor[g] = Some(a);
        gt_iou[g] = v;
    }
    for (g, a) in gt_anchor.iter().enumerate() {
        if a.is_none() {
            log::warn!("ground truth {g} overlaps no anchor and stays unmatched");
        }
    }
    let mut labels: Vec<AnchorLabel> = max_iou
        .iter()
        .map(|&v| if v < neg_iou_max { AnchorLabel::Negative } else { AnchorLabel::Ignored })
        .collect();
    for (g, a) in gt_anchor.iter().enumerate() {
        if let Some(a) = a {
            labels[*a] = AnchorLabel::Positive(g);
        }
    }
    Ok(MatchAssignment { gt_anchor, gt_iou, labels })
}

/// Regression target of `gt` relative to `anchor`.
pub fn encode_box(gt: &BoxCube, anchor: &BoxCube) -> Result<[f64; 4]> {
    if !(gt.r > 0.0 && anchor.r > 0.0) {
        return Err(Error::data(format!(
            "box encoding needs positive sides, got gt r={} anchor r={}",
            gt.r, anchor.r
        )));
    }
    Ok([
        (gt.x - anchor.x) / anchor.r,
        (gt.y - anchor.y) / anchor.r,
        (gt.z - anchor.z) / anchor.r,
        (gt.r / anchor.r).ln(),
    ])
}

pub fn decode_box(pred: &[f64; 4], anchor: &BoxCube) -> BoxCube {
    BoxCube::new(
        anchor.x + pred[0] * anchor.r,
        anchor.y + pred[1] * anchor.r,
        anchor.z + pred[2] * anchor.r,
        anchor.r * pred[3].exp(),
    )
}

/// Default IoU threshold for suppression.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.1;

/// Greedy suppression: keep the best remaining detection, drop everything
/// overlapping it with IoU strictly above `iou_threshold`. Output is sorted by
/// descending score, ties by original position.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| iou_cube(&k.cube, &d.cube) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_closed_forms() {
        let a = BoxCube::new(0.0, 0.0, 0.0, 2.0);
        assert_eq!(iou_cube(&a, &a), 1.0);
        assert_eq!(iou_cube(&a, &BoxCube::new(5.0, 0.0, 0.0, 2.0)), 0.0);
        let b = BoxCube::new(1.0, 0.0, 0.0, 2.0);
        assert!((iou_cube(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn worked_encoding() {
        let a = BoxCube::new(10.0, 10.0, 10.0, 8.0);
        let g = BoxCube::new(12.0, 10.0, 10.0, 16.0);
        let t = encode_box(&g, &a).unwrap();
        assert!((t[0] - 0.25).abs() < 1e-12 && t[1] == 0.0 && t[2] == 0.0);
        assert!((t[3] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(decode_box(&t, &a), g);
        assert_eq!(decode_box(&[0.0; 4], &a), a);
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
        assert!(encode_box(&BoxCube::new(0.0, 0.0, 0.0, 0.0), &a).is_err());
    }

    #[test]
    fn default_anchor_grid() {
        let set = generate_anchors(&PiaNetConfig::default()).unwrap();
        assert_eq!(set.len(), 47_616);
        assert_eq!(set.boxes[0], BoxCube::new(2.0, 2.0, 2.0, 4.0));
        assert_eq!(set.boxes[1], BoxCube::new(6.0, 2.0, 2.0, 4.0));
        assert_eq!(set.boxes[32_768], BoxCube::new(4.0, 4.0, 4.0, 6.0));
        assert_eq!(set.boxes[32_770], BoxCube::new(4.0, 4.0, 4.0, 10.0));
        assert!(set.boxes.iter().all(|b| b.center().iter().all(|&c| c > 0.0 && c < 128.0)));
    }

    #[test]
    fn nms_basics() {
        let c = BoxCube::new(5.0, 5.0, 5.0, 4.0);
        assert!(nms(&[], 0.1).is_empty());
        let one = [Detection { cube: c, score: 0.3 }];
        assert_eq!(nms(&one, 0.1), one.to_vec());
        let two = [Detection { cube: c, score: 0.8 }, Detection { cube: c, score: 0.9 }];
        assert_eq!(nms(&two, 0.1), vec![two[1]]);
    }

    #[test]
    fn matching_without_truth() {
        let set = generate_anchors(&PiaNetConfig::reduced(32, 4)).unwrap();
        let m = match_anchors(&set, &[], 0.02).unwrap();
        assert!(m.positives().is_empty());
        assert_eq!(m.negatives().len(), set.len());
    }

    #[test]
    fn exact_anchor_match() {
        let set = generate_anchors(&PiaNetConfig::default()).unwrap();
        let g = set.boxes[40_000];
        let m = match_anchors(&set, &[g], 0.02).unwrap();
        assert_eq!(m.gt_anchor, vec![Some(40_000)]);
        assert_eq!(m.gt_iou, vec![1.0]);
        assert_eq!(m.labels[40_000], AnchorLabel::Positive(0));
    }
}
