//! Detection-to-truth matching, FROC analysis and CPM scoring.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use report::{parse_report_csv, parse_report_json, report_csv, report_json, report_plot_data, write_report, ReportFormat};

use crate::boxes::{iou_cube, BoxCube};
use crate::data::{DetectionRecord, ScanAnnotation};
use crate::error::{Error, Result};

/// FP rates (per scan) at which CPM samples the curve.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// When a detection counts as hitting a finding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HitRule {
    /// Center within `factor` times the finding's radius of its center.
    CenterWithin { factor: f64 },
    /// Box IoU (finding side = diameter) of at least `min`.
    Iou { min: f64 },
}

impl Default for HitRule {
    fn default() -> Self {
        HitRule::CenterWithin { factor: 1.0 }
    }
}

impl HitRule {
    /// Smaller is better; `None` when not a hit.
    fn distance(&self, det: &DetectionRecord, center: [f64; 3], diameter: f64) -> Option<f64> {
        let d = ((det.x_mm - center[0]).powi(2) + (det.y_mm - center[1]).powi(2) + (det.z_mm - center[2]).powi(2)).sqrt();
        match *self {
            HitRule::CenterWithin { factor } => (d <= factor * diameter / 2.0).then_some(d),
            HitRule::Iou { min } => {
                let a = BoxCube::new(det.x_mm, det.y_mm, det.z_mm, det.r_mm);
                let b = BoxCube::new(center[0], center[1], center[2], diameter);
                let iou = iou_cube(&a, &b);
                (iou >= min && iou > 0.0).then_some(1.0 - iou)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetLabel {
    /// First (highest-scoring) hit on the target finding with this index.
    TruePositive(usize),
    FalsePositive,
    /// Duplicate hit on a target, or a hit on a non-target finding.
    Excused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMatch {
    pub scan_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<DetLabel>,
    /// Per nodule of the annotation; always false for non-targets.
    pub nodule_hit: Vec<bool>,
    pub targets: usize,
}

/// Labels the detections of one scan. Each detection is assigned to the
/// nearest finding it hits; per target the highest score (ties to the
/// earlier detection) is the true positive.
pub fn match_to_truth(dets: &[DetectionRecord], annotation: &ScanAnnotation, rule: HitRule) -> ScanMatch {
    let nods = &annotation.nodules;
    let assigned: Vec<Option<usize>> = dets
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (k, n) in nods.iter().enumerate() {
                if let Some(dist) = rule.distance(d, n.center_mm, n.diameter_mm) {
                    if best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, k));
                    }
                }
            }
            best.map(|b| b.1)
        })
        .collect();
    let mut winner: Vec<Option<usize>> = vec![None; nods.len()];
    for (i, a) in assigned.iter().enumerate() {
        if let Some(k) = *a {
            if nods[k].is_target() && winner[k].is_none_or(|w| dets[i].score > dets[w].score) {
                winner[k] = Some(i);
            }
        }
    }
    let labels = assigned
        .iter()
        .enumerate()
        .map(|(i, a)| match *a {
            None => DetLabel::FalsePositive,
            Some(k) if winner[k] == Some(i) => DetLabel::TruePositive(k),
            Some(_) => DetLabel::Excused,
        })
        .collect();
    ScanMatch {
        scan_id: annotation.scan_id.clone(),
        scores: dets.iter().map(|d| d.score).collect(),
        labels,
        nodule_hit: winner.iter().map(Option::is_some).collect(),
        targets: annotation.targets().count(),
    }
}

/// Matches every scan in `scans`; detections naming other scans are an error.
pub fn match_all(dets: &[DetectionRecord], scans: &[ScanAnnotation], rule: HitRule) -> Result<Vec<ScanMatch>> {
    let mut by_scan: BTreeMap<&str, Vec<DetectionRecord>> = scans.iter().map(|s| (s.scan_id.as_str(), Vec::new())).collect();
    for d in dets {
        by_scan
            .get_mut(d.scan_id.as_str())
            .ok_or_else(|| Error::data(format!("detection for unknown scan id {:?}", d.scan_id)))?
            .push(d.clone());
    }
    Ok(scans.iter().map(|s| match_to_truth(&by_scan[s.scan_id.as_str()], s, rule)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub sensitivity: f64,
}

/// One point per distinct score of a non-excused detection, from the highest
/// threshold down. With no such detections the curve is the single point
/// (0, 0) at threshold 1.
pub fn froc(matches: &[ScanMatch]) -> Result<Vec<FrocPoint>> {
    if matches.is_empty() {
        return Err(Error::data("FROC needs at least one scan"));
    }
    let total: usize = matches.iter().map(|m| m.targets).sum();
    if total == 0 {
        return Err(Error::data("no target nodules: sensitivity is undefined"));
    }
    let scans = matches.len() as f64;
    let mut events: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| {
            m.scores.iter().zip(&m.labels).filter_map(|(&s, l)| match l {
                DetLabel::TruePositive(_) => Some((s, true)),
                DetLabel::FalsePositive => Some((s, false)),
                DetLabel::Excused => None,
            })
        })
        .collect();
    if events.is_empty() {
        return Ok(vec![FrocPoint {
            threshold: 1.0,
            fps_per_scan: 0.0,
            sensitivity: 0.0,
        }]);
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(FrocPoint {
            threshold: t,
            fps_per_scan: fp as f64 / scans,
            sensitivity: tp as f64 / total as f64,
        });
    }
    Ok(curve)
}

/// Sensitivity of the best point whose FP rate does not exceed `rate`
/// (0 if none).
pub fn sensitivity_at(curve: &[FrocPoint], rate: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.fps_per_scan <= rate)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpmReport {
    pub fps_per_scan: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub cpm: f64,
    pub curve: Vec<FrocPoint>,
}

pub fn cpm(curve: &[FrocPoint]) -> CpmReport {
    let sensitivities: Vec<f64> = CPM_RATES.iter().map(|&r| sensitivity_at(curve, r)).collect();
    CpmReport {
        fps_per_scan: CPM_RATES.to_vec(),
        cpm: sensitivities.iter().sum::<f64>() / CPM_RATES.len() as f64,
        sensitivities,
        curve: curve.to_vec(),
    }
}
