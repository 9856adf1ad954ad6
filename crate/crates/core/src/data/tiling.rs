use super::volume::{ScanAnnotation, Volume};
use crate::boxes::{nms, BoxCube, Detection};
use crate::engine::{Shape5, Tensor5};
use crate::error::{Error, Result};

/// A fixed-side cube cut from a scan with its local ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeSample {
    /// (1, 1, S, S, S).
    pub cube: Tensor5,
    /// Voxel offset (z, y, x) of the cube within the scan; may be negative for
    /// cubes cut around a point near the border.
    pub origin: [i64; 3],
    /// Cube-local continuous coordinates.
    pub gts: Vec<BoxCube>,
}

impl CubeSample {
    pub fn side(&self) -> usize {
        self.cube.shape().spatial()[0]
    }

    /// Every box center lies inside the cube and has positive size.
    pub fn is_valid(&self) -> bool {
        let s = self.side() as f64;
        self.gts
            .iter()
            .all(|b| b.is_valid() && b.center().iter().all(|&c| (0.0..s).contains(&c)))
    }
}

/// Origins along one axis: multiples of `stride`, the last one clamped so the
/// cube ends at the volume edge. One origin at 0 if the extent fits.
pub fn axis_origins(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    if extent <= side {
        return vec![0];
    }
    let n = (extent - side).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(extent - side)).collect()
}

/// Cube origins (z, y, x) in z-major order.
pub fn cube_origins(extents: [usize; 3], side: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    if side == 0 || stride == 0 || stride > side {
        return Err(Error::config(format!(
            "cube side {side} and stride {stride} must satisfy 0 < stride <= side"
        )));
    }
    let per: Vec<Vec<usize>> = extents.iter().map(|&e| axis_origins(e, side, stride)).collect();
    let mut out = Vec::with_capacity(per.iter().map(Vec::len).product());
    for &z in &per[0] {
        for &y in &per[1] {
            for &x in &per[2] {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Target nodules of `annotation` as boxes in scan voxel coordinates.
pub fn scan_boxes(v: &Volume, annotation: &ScanAnnotation) -> Vec<BoxCube> {
    annotation
        .targets()
        .map(|n| {
            let c = v.world_to_voxel(n.center_mm);
            BoxCube::new(c[0], c[1], c[2], n.diameter_mm / v.spacing[2])
        })
        .collect()
}

/// Copies the cube at `origin` (zero outside the volume) and translates
/// `boxes` into it, keeping those whose centers fall inside.
pub fn cube_at(v: &Volume, origin: [i64; 3], side: usize, boxes: &[BoxCube]) -> CubeSample {
    let mut cube = Tensor5::zeros(Shape5([1, 1, side, side, side]));
    let [d, h, w] = v.extents.map(|e| e as i64);
    let dst = cube.data_mut();
    let x_lo = origin[2].max(0);
    let x_hi = (origin[2] + side as i64).min(w);
    if x_lo < x_hi {
        for lz in 0..side as i64 {
            let z = origin[0] + lz;
            if z < 0 || z >= d {
                continue;
            }
            for ly in 0..side as i64 {
                let y = origin[1] + ly;
                if y < 0 || y >= h {
                    continue;
                }
                let src = v.index(z as usize, y as usize, x_lo as usize);
                let off = ((lz * side as i64 + ly) * side as i64 + (x_lo - origin[2])) as usize;
                let n = (x_hi - x_lo) as usize;
                dst[off..off + n].copy_from_slice(&v.data[src..src + n]);
            }
        }
    }
    let shift = [-origin[2] as f64, -origin[1] as f64, -origin[0] as f64];
    let s = side as f64;
    let gts = boxes
        .iter()
        .map(|b| b.translated(shift))
        .filter(|b| b.center().iter().all(|&c| (0.0..s).contains(&c)))
        .collect();
    CubeSample { cube, origin, gts }
}

/// Sliding-window tiling of a preprocessed scan.
pub fn extract_cubes(v: &Volume, side: usize, stride: usize, annotation: &ScanAnnotation) -> Result<Vec<CubeSample>> {
    v.validate()?;
    let boxes = scan_boxes(v, annotation);
    Ok(cube_origins(v.extents, side, stride)?
        .into_iter()
        .map(|o| cube_at(v, o.map(|x| x as i64), side, &boxes))
        .collect())
}

/// Translates per-cube detections to scan voxel coordinates and runs one
/// global NMS.
pub fn stitch_detections(per_cube: &[([i64; 3], Vec<Detection>)], nms_threshold: f64) -> Vec<Detection> {
    let pooled: Vec<Detection> = per_cube
        .iter()
        .flat_map(|(o, dets)| {
            let d = [o[2] as f64, o[1] as f64, o[0] as f64];
            dets.iter().map(move |det| Detection {
                cube: det.cube.translated(d),
                score: det.score,
            })
        })
        .collect();
    nms(&pooled, nms_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins() {
        assert_eq!(axis_origins(128, 128, 64), vec![0]);
        assert_eq!(axis_origins(100, 128, 64), vec![0]);
        assert_eq!(axis_origins(252, 128, 64), vec![0, 64, 124]);
        assert_eq!(axis_origins(192, 128, 64), vec![0, 64]);
        assert_eq!(cube_origins([252, 222, 192], 128, 64).unwrap().len(), 18);
    }

    #[test]
    fn padded_cube() {
        let v = Volume::filled([3, 4, 5], [1.0; 3], 7.0);
        let c = cube_at(&v, [0, 0, 0], 8, &[BoxCube::new(1.0, 1.0, 1.0, 2.0)]);
        assert_eq!(c.cube.sum(), 7.0 * 60.0);
        assert_eq!(c.cube.get([0, 0, 2, 3, 4]), 7.0);
        assert_eq!(c.cube.get([0, 0, 3, 0, 0]), 0.0);
        assert_eq!(c.gts.len(), 1);
        let shifted = cube_at(&v, [-2, 1, 1], 8, &[BoxCube::new(1.0, 1.0, 1.0, 2.0)]);
        assert_eq!(shifted.gts, vec![BoxCube::new(0.0, 0.0, 3.0, 2.0)]);
        assert_eq!(shifted.cube.get([0, 0, 2, 0, 0]), 7.0);
        assert_eq!(shifted.cube.get([0, 0, 1, 0, 0]), 0.0);
    }

    #[test]
    fn stitch_duplicate() {
        let a = Detection {
            cube: BoxCube::new(70.0, 10.0, 10.0, 8.0),
            score: 0.9,
        };
        let b = Detection {
            cube: BoxCube::new(6.5, 10.0, 10.0, 8.0),
            score: 0.7,
        };
        let out = stitch_detections(&[([0, 0, 0], vec![a]), ([0, 0, 64], vec![b])], 0.1);
        assert_eq!(out, vec![a]);
        assert!(stitch_detections(&[], 0.1).is_empty());
    }
}
