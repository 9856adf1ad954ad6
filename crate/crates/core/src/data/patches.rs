use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugOp, AugmentConfig};
use super::tiling::{cube_at, scan_boxes};
use super::volume::{ScanAnnotation, Volume};
use crate::boxes::{iou_cube, BoxCube};
use crate::engine::Tensor5;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch_side: usize,
    pub positives_per_nodule: usize,
    pub negatives_per_positive: usize,
    pub max_negative_attempts: usize,
    pub augment: AugmentConfig,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_side: 64,
            positives_per_nodule: 1,
            negatives_per_positive: 3,
            max_negative_attempts: 1000,
            augment: AugmentConfig::default(),
        }
    }
}

/// Labeled patches: 1 = contains a target nodule, 0 = background.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Tensor5>,
    pub labels: Vec<usize>,
    /// Patch box in scan voxel coordinates, before augmentation.
    pub boxes: Vec<BoxCube>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Stacks the selected patches into one (N, 1, P, P, P) batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor5, Vec<usize>)> {
        let items: Vec<Tensor5> = idx.iter().map(|&i| self.patches[i].clone()).collect();
        Ok((Tensor5::stack(&items)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    fn push(&mut self, patch: Tensor5, label: usize, b: BoxCube) {
        self.patches.push(patch);
        self.labels.push(label);
        self.boxes.push(b);
    }
}

/// Positives around every target nodule (jittered by at most side/8 and
/// augmented with all five operators) and background negatives from inside
/// the lung mask that do not touch any annotated finding.
pub fn crop_patches<R: Rng + ?Sized>(
    scans: &[(Volume, ScanAnnotation)],
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<PatchSet> {
    let p = cfg.patch_side;
    if p == 0 {
        return Err(Error::config("patch_side must be positive"));
    }
    let mut set = PatchSet::default();
    let jitter = (p / 8) as i64;
    for (v, ann) in scans {
        let targets = scan_boxes(v, ann);
        let all: Vec<BoxCube> = ann
            .nodules
            .iter()
            .map(|n| {
                let c = v.world_to_voxel(n.center_mm);
                BoxCube::new(c[0], c[1], c[2], n.diameter_mm / v.spacing[2])
            })
            .collect();
        let mut positives = 0;
        for t in &targets {
            if t.r > p as f64 {
                log::warn!(
                    "scan {}: nodule of {:.1} voxels at ({:.1}, {:.1}, {:.1}) exceeds the {p}-voxel patch; skipped",
                    ann.scan_id,
                    t.r,
                    t.x,
                    t.y,
                    t.z
                );
                continue;
            }
            for _ in 0..cfg.positives_per_nodule {
                let j = [0; 3].map(|_: i64| rng.gen_range(-jitter..=jitter));
                let center = [t.z.floor() as i64 + j[0], t.y.floor() as i64 + j[1], t.x.floor() as i64 + j[2]];
                let origin = center.map(|c| c - (p / 2) as i64);
                let sample = cube_at(v, origin, p, std::slice::from_ref(t));
                debug_assert_eq!(sample.gts.len(), 1);
                let aug = augment(&sample, &AugOp::ALL, &cfg.augment, rng);
                let half = p as f64 / 2.0;
                let b = BoxCube::new(origin[2] as f64 + half, origin[1] as f64 + half, origin[0] as f64 + half, p as f64);
                set.push(aug.cube, 1, b);
                positives += 1;
            }
        }
        let want = positives * cfg.negatives_per_positive;
        let mask = v.mask.as_ref();
        let mut got = 0;
        let mut attempts = 0;
        while got < want && attempts < cfg.max_negative_attempts * want.max(1) {
            attempts += 1;
            let c = [0, 1, 2].map(|a| rng.gen_range(0..v.extents[a]));
            if let Some(m) = mask {
                if !m[v.index(c[0], c[1], c[2])] {
                    continue;
                }
            }
            let half = p as f64 / 2.0;
            let origin = c.map(|x| x as i64 - (p / 2) as i64);
            let b = BoxCube::new(origin[2] as f64 + half, origin[1] as f64 + half, origin[0] as f64 + half, p as f64);
            if all.iter().any(|n| iou_cube(n, &b) > 0.0) {
                continue;
            }
            set.push(cube_at(v, origin, p, &[]).cube, 0, b);
            got += 1;
        }
        if got < want {
            log::warn!("scan {}: only {got} of {want} negative patches found", ann.scan_id);
        }
    }
    Ok(set)
}
