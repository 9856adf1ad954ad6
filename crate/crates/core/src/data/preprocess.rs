use serde::{Deserialize, Serialize};

use super::volume::{Intensity, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub hu_min: f64,
    pub hu_max: f64,
    /// Zero everything outside the lung mask (a mask is then required).
    pub apply_mask: bool,
    /// Crop to the bounding box of the lung mask.
    pub crop_to_lung: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            hu_min: -1200.0,
            hu_max: 600.0,
            apply_mask: true,
            crop_to_lung: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hu_min < self.hu_max) || !self.hu_min.is_finite() || !self.hu_max.is_finite() {
            return Err(Error::config(format!(
                "hu_min ({}) must be below hu_max ({})",
                self.hu_min, self.hu_max
            )));
        }
        Ok(())
    }
}

/// Sample positions (continuous, voxel-center indexed) along one axis of the
/// 1 mm output grid.
fn axis_samples(extent: usize, spacing: f64) -> Vec<(usize, usize, f64, usize)> {
    let n = (extent as f64 * spacing).round() as usize;
    (0..n)
        .map(|j| {
            let u = (j as f64 + 0.5) / spacing;
            let c = (u - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = (c.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            let nearest = (u.floor() as usize).min(extent - 1);
            (i0, i1, c - i0 as f64, nearest)
        })
        .collect()
}

/// Trilinear resampling to 1 mm isotropic spacing; the mask is resampled by
/// nearest neighbour.
pub fn resample_isotropic(v: &Volume) -> Result<Volume> {
    v.validate()?;
    if let Some(axis) = v.extents.iter().position(|&e| e < 2) {
        return Err(Error::config(format!(
            "cannot resample volume {:?}: axis {axis} has a single voxel",
            v.extents
        )));
    }
    let samples: Vec<_> = (0..3).map(|a| axis_samples(v.extents[a], v.spacing[a])).collect();
    if samples.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!(
            "volume {:?} at spacing {:?} resamples to an empty grid",
            v.extents, v.spacing
        )));
    }
    let out_ext = [samples[0].len(), samples[1].len(), samples[2].len()];
    let [_, h, w] = v.extents;
    let mut data = vec![0.0; out_ext.iter().product()];
    let plane = out_ext[1] * out_ext[2];
    use rayon::prelude::*;
    data.par_chunks_mut(plane).enumerate().for_each(|(oz, slab)| {
        let (z0, z1, tz, _) = samples[0][oz];
        for (oy, &(y0, y1, ty, _)) in samples[1].iter().enumerate() {
            for (ox, &(x0, x1, tx, _)) in samples[2].iter().enumerate() {
                let g = |z: usize, y: usize, x: usize| v.data[(z * h + y) * w + x];
                let c00 = g(z0, y0, x0) * (1.0 - tx) + g(z0, y0, x1) * tx;
                let c01 = g(z0, y1, x0) * (1.0 - tx) + g(z0, y1, x1) * tx;
                let c10 = g(z1, y0, x0) * (1.0 - tx) + g(z1, y0, x1) * tx;
                let c11 = g(z1, y1, x0) * (1.0 - tx) + g(z1, y1, x1) * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                slab[oy * out_ext[2] + ox] = c0 * (1.0 - tz) + c1 * tz;
            }
        }
    });
    let mask = v.mask.as_ref().map(|m| {
        let mut out = Vec::with_capacity(data.len());
        for s0 in &samples[0] {
            for s1 in &samples[1] {
                for s2 in &samples[2] {
                    out.push(m[(s0.3 * h + s1.3) * w + s2.3]);
                }
            }
        }
        out
    });
    let mut origin = [0.0; 3];
    for a in 0..3 {
        origin[a] = v.origin[a] - 0.5 * v.spacing[a] + 0.5;
    }
    Ok(Volume {
        extents: out_ext,
        spacing: [1.0; 3],
        origin,
        intensity: v.intensity,
        data,
        mask,
    })
}

/// Linear window [hu_min, hu_max] -> [0, 255] with clamping. Normalized
/// volumes pass through unchanged.
pub fn normalize_intensity(v: &Volume, hu_min: f64, hu_max: f64) -> Result<Volume> {
    if !(hu_min < hu_max) {
        return Err(Error::config(format!("hu_min ({hu_min}) must be below hu_max ({hu_max})")));
    }
    let mut out = v.clone();
    if v.intensity == Intensity::Normalized {
        return Ok(out);
    }
    let scale = 255.0 / (hu_max - hu_min);
    for x in &mut out.data {
        *x = ((*x - hu_min) * scale).clamp(0.0, 255.0);
    }
    out.intensity = Intensity::Normalized;
    Ok(out)
}

pub fn apply_lung_mask(v: &Volume) -> Result<Volume> {
    let mask = v.mask.as_ref().ok_or_else(|| {
        Error::config("volume has no lung mask; supply one (e.g. --mask <file.mhd>) or disable masking")
    })?;
    let mut out = v.clone();
    for (x, &m) in out.data.iter_mut().zip(mask) {
        if !m {
            *x = 0.0;
        }
    }
    Ok(out)
}

/// Half-open voxel bounds `[lo, hi)` per axis of the true mask voxels.
pub fn mask_bounds(v: &Volume) -> Option<[(usize, usize); 3]> {
    let mask = v.mask.as_ref()?;
    let [_, h, w] = v.extents;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = [i / (h * w), (i / w) % h, i % w];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    (lo[0] != usize::MAX).then(|| [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])])
}

/// Sub-volume `[lo, hi)` per axis, origin adjusted so world positions are kept.
pub fn crop(v: &Volume, bounds: [(usize, usize); 3]) -> Result<Volume> {
    for a in 0..3 {
        let (lo, hi) = bounds[a];
        if lo >= hi || hi > v.extents[a] {
            return Err(Error::config(format!("crop bounds {bounds:?} outside {:?}", v.extents)));
        }
    }
    let ext = [bounds[0].1 - bounds[0].0, bounds[1].1 - bounds[1].0, bounds[2].1 - bounds[2].0];
    let mut data = Vec::with_capacity(ext.iter().product());
    let mut mask = v.mask.as_ref().map(|_| Vec::with_capacity(data.capacity()));
    for z in bounds[0].0..bounds[0].1 {
        for y in bounds[1].0..bounds[1].1 {
            let start = v.index(z, y, bounds[2].0);
            data.extend_from_slice(&v.data[start..start + ext[2]]);
            if let (Some(out), Some(m)) = (mask.as_mut(), v.mask.as_ref()) {
                out.extend_from_slice(&m[start..start + ext[2]]);
            }
        }
    }
    let mut origin = v.origin;
    for a in 0..3 {
        origin[a] += bounds[a].0 as f64 * v.spacing[a];
    }
    Ok(Volume {
        extents: ext,
        spacing: v.spacing,
        origin,
        intensity: v.intensity,
        data,
        mask,
    })
}

/// Resample, window, mask and crop. A second application is the identity.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let mut out = if v.spacing == [1.0; 3] { v.clone() } else { resample_isotropic(v)? };
    out = normalize_intensity(&out, cfg.hu_min, cfg.hu_max)?;
    if cfg.apply_mask {
        out = apply_lung_mask(&out)?;
    }
    if cfg.crop_to_lung {
        let bounds = mask_bounds(&out)
            .ok_or_else(|| Error::data("lung mask is missing or empty; cannot crop to the lung"))?;
        if bounds.iter().zip(out.extents).any(|(b, e)| *b != (0, e)) {
            out = crop(&out, bounds)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_endpoints() {
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![-1200.0, 600.0, -300.0, -5000.0]).unwrap();
        let n = normalize_intensity(&v, -1200.0, 600.0).unwrap();
        assert_eq!(n.data, vec![0.0, 255.0, 127.5, 0.0]);
    }

    #[test]
    fn ramp_resample() {
        let (d, h, w) = (3, 3, 8);
        let mut data = Vec::new();
        for _ in 0..d * h {
            data.extend((0..w).map(|x| x as f64));
        }
        let mut v = Volume::new([d, h, w], [1.0, 1.0, 2.0], data).unwrap();
        v.origin = [0.0, 0.0, 10.0];
        let r = resample_isotropic(&v).unwrap();
        assert_eq!(r.extents, [3, 3, 16]);
        assert_eq!(r.origin, [0.0, 0.0, 9.5]);
        // Interior output x samples input index x/2 - 0.25.
        for x in 1..15 {
            let expect = x as f64 / 2.0 - 0.25;
            assert!((r.get(1, 1, x) - expect).abs() < 1e-9, "{x}");
        }
        let same = resample_isotropic(&r).unwrap();
        assert_eq!(same, r);
    }

    #[test]
    fn degenerate_axis() {
        let v = Volume::filled([1, 4, 4], [1.0; 3], 0.0);
        assert!(matches!(resample_isotropic(&v), Err(Error::Config(_))));
    }

    #[test]
    fn missing_mask_is_config_error() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0);
        assert!(matches!(apply_lung_mask(&v), Err(Error::Config(_))));
    }

    #[test]
    fn crop_keeps_world_positions() {
        let mut v = Volume::filled([6, 6, 6], [1.0; 3], 0.0);
        v.origin = [1.0, 2.0, 3.0];
        let mut mask = vec![false; 216];
        mask[v.index(2, 3, 4)] = true;
        mask[v.index(4, 3, 1)] = true;
        v.mask = Some(mask);
        let b = mask_bounds(&v).unwrap();
        assert_eq!(b, [(2, 5), (3, 4), (1, 5)]);
        let c = crop(&v, b).unwrap();
        assert_eq!(c.extents, [3, 1, 4]);
        assert_eq!(c.voxel_to_world([0.5, 0.5, 0.5]), v.voxel_to_world([1.5, 3.5, 2.5]));
    }
}
