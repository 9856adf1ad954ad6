//! Synthetic chest-like volumes with soft low-contrast blobs standing in for
//! ground-glass opacities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::volume::{Intensity, Nodule, ScanAnnotation, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// (depth, height, width) voxels.
    pub extents: [usize; 3],
    /// (dz, dy, dx) mm.
    pub spacing: [f64; 3],
    /// Inclusive range.
    pub nodule_count: (usize, usize),
    pub diameter_mm: (f64, f64),
    /// Nodule minus background, HU.
    pub contrast_hu: (f64, f64),
    pub background_hu: f64,
    /// Standard deviation of the smoothed background texture, HU.
    pub noise_hu: f64,
    pub vessels: usize,
    /// Thin bright plates inside the lung.
    pub walls: usize,
    /// Width of the soft nodule edge, mm.
    pub edge_sigma_mm: f64,
    pub max_retries: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            extents: [64; 3],
            spacing: [1.0; 3],
            nodule_count: (1, 2),
            diameter_mm: (5.0, 10.0),
            contrast_hu: (250.0, 400.0),
            background_hu: -780.0,
            noise_hu: 25.0,
            vessels: 3,
            walls: 1,
            edge_sigma_mm: 0.7,
            max_retries: 500,
        }
    }
}

const AIR_HU: f64 = -1000.0;
const WALL_HU: f64 = 40.0;
const VESSEL_HU: f64 = -60.0;
const PLATE_HU: f64 = -350.0;
/// Ellipsoid radii (normalized) of the lung interior and the mask.
const LUNG_RADIUS: f64 = 0.85;
const MASK_RADIUS: f64 = 0.92;

impl PhantomSpec {
    pub fn cube(seed: u64, side: usize) -> Self {
        PhantomSpec {
            seed,
            extents: [side; 3],
            ..Default::default()
        }
    }

    fn physical(&self) -> [f64; 3] {
        [
            self.extents[0] as f64 * self.spacing[0],
            self.extents[1] as f64 * self.spacing[1],
            self.extents[2] as f64 * self.spacing[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let min_side = self.physical().into_iter().fold(f64::INFINITY, f64::min);
        let (dlo, dhi) = self.diameter_mm;
        if !(dlo > 0.0 && dlo <= dhi && dhi < min_side / 2.0) {
            return Err(Error::config(format!(
                "nodule diameters {:?} must lie in (0, {})",
                self.diameter_mm,
                min_side / 2.0
            )));
        }
        if !(self.contrast_hu.0 > 0.0 && self.contrast_hu.0 <= self.contrast_hu.1) {
            return Err(Error::config(format!("contrast {:?} must be positive", self.contrast_hu)));
        }
        if self.nodule_count.0 > self.nodule_count.1 {
            return Err(Error::config("nodule_count range is reversed"));
        }
        if self.extents.iter().any(|&e| e < 4) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("phantom extents must be >= 4 and spacing positive"));
        }
        if !(self.noise_hu >= 0.0 && self.edge_sigma_mm > 0.0) {
            return Err(Error::config("noise must be non-negative and edge width positive"));
        }
        Ok(())
    }
}

struct Grid {
    ext: [usize; 3],
    spacing: [f64; 3],
    half: [f64; 3],
}

impl Grid {
    /// Physical position (mm, z y x) of voxel center, relative to the volume corner.
    fn pos(&self, i: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (i[a] as f64 + 0.5) * self.spacing[a])
    }

    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.half[a]) / self.half[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Voxel index ranges covering the ball (center mm, radius mm).
    fn span(&self, c: [f64; 3], r: f64) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let lo = ((c[a] - r) / self.spacing[a] - 0.5).floor().max(0.0) as usize;
            let hi = (((c[a] + r) / self.spacing[a] - 0.5).ceil() as usize + 1).min(self.ext[a]);
            (lo.min(self.ext[a]), hi)
        })
    }

    fn idx(&self, i: [usize; 3]) -> usize {
        (i[0] * self.ext[1] + i[1]) * self.ext[2] + i[2]
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if len2 == 0.0 { 0.0 } else { (0..3).map(|k| ab[k] * ap[k]).sum::<f64>() / len2 };
    let t = t.clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

/// Separable 3-tap box blur, applied `passes` times.
fn blur(data: &mut [f64], ext: [usize; 3], passes: usize) {
    let strides = [ext[1] * ext[2], ext[2], 1];
    let mut tmp = vec![0.0; data.len()];
    for _ in 0..passes {
        for a in 0..3 {
            let (n, st) = (ext[a], strides[a]);
            for (i, t) in tmp.iter_mut().enumerate() {
                let c = (i / st) % n;
                let l = if c > 0 { data[i - st] } else { data[i] };
                let r = if c + 1 < n { data[i + st] } else { data[i] };
                *t = (l + data[i] + r) / 3.0;
            }
            data.copy_from_slice(&tmp);
        }
    }
}

fn random_point_in_lung<R: Rng>(g: &Grid, margin_mm: f64, rng: &mut R) -> Option<[f64; 3]> {
    for _ in 0..64 {
        let p = [0, 1, 2].map(|a| rng.gen_range(0.0..2.0 * g.half[a]));
        // Keep the whole ball inside the interior ellipsoid (conservative).
        let min_half = g.half.into_iter().fold(f64::INFINITY, f64::min);
        if g.radius(p) + margin_mm / min_half < LUNG_RADIUS {
            return Some(p);
        }
    }
    None
}

/// Builds a HU volume with lung mask and its target annotation (agreement 4,
/// relevant). Deterministic per `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec, scan_id: &str) -> Result<(Volume, ScanAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phys = spec.physical();
    let g = Grid {
        ext: spec.extents,
        spacing: spec.spacing,
        half: phys.map(|p| p / 2.0),
    };
    let n: usize = spec.extents.iter().product();

    // Background texture.
    let mut noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if spec.noise_hu > 0.0 {
        blur(&mut noise, spec.extents, 1);
        // One 3x3x3 box pass scales the variance by 1/27.
        let k = spec.noise_hu * 27f64.sqrt();
        noise.iter_mut().for_each(|x| *x *= k);
    } else {
        noise.fill(0.0);
    }

    let mut data = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut lung = vec![false; n];
    for z in 0..g.ext[0] {
        for y in 0..g.ext[1] {
            for x in 0..g.ext[2] {
                let i = g.idx([z, y, x]);
                let r = g.radius(g.pos([z, y, x]));
                data[i] = if r < LUNG_RADIUS {
                    lung[i] = true;
                    spec.background_hu + noise[i]
                } else if r < 1.0 {
                    WALL_HU + 0.5 * noise[i]
                } else {
                    AIR_HU
                };
                mask[i] = r < MASK_RADIUS;
            }
        }
    }

    // Nodules: non-overlapping including their soft edges.
    let count = rng.gen_range(spec.nodule_count.0..=spec.nodule_count.1);
    let sigma = spec.edge_sigma_mm;
    let mut placed: Vec<([f64; 3], f64, f64)> = Vec::new();
    for k in 0..count {
        let contrast = rng.gen_range(spec.contrast_hu.0..=spec.contrast_hu.1);
        // The diameter is redrawn with every attempt.
        let mut ok = None;
        let mut d = spec.diameter_mm.0;
        for _ in 0..spec.max_retries {
            d = rng.gen_range(spec.diameter_mm.0..=spec.diameter_mm.1);
            let reach = d / 2.0 + 3.0 * sigma;
            let Some(c) = random_point_in_lung(&g, reach + 1.0, &mut rng) else { continue };
            if placed.iter().all(|(pc, pd, _)| dist(c, *pc) > reach + pd / 2.0 + 3.0 * sigma + 2.0) {
                ok = Some(c);
                break;
            }
        }
        let c = ok.ok_or_else(|| {
            Error::data(format!(
                "could not place nodule {k} (last diameter {d:.2} mm) after {} attempts",
                spec.max_retries
            ))
        })?;
        placed.push((c, d, contrast));
    }

    // Distractors keep clear of every nodule.
    let clear = |p: [f64; 3], extra: f64| placed.iter().all(|(c, d, _)| dist(p, *c) > d / 2.0 + 3.0 * sigma + extra);
    for _ in 0..spec.vessels {
        let radius = rng.gen_range(0.6..1.4);
        let Some(a) = random_point_in_lung(&g, 2.0, &mut rng) else { continue };
        let Some(b) = random_point_in_lung(&g, 2.0, &mut rng) else { continue };
        let steps = (dist(a, b) / 1.0).ceil().max(1.0) as usize;
        let samples: Vec<[f64; 3]> = (0..=steps)
            .map(|s| {
                let t = s as f64 / steps as f64;
                [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]))
            })
            .collect();
        if !samples.iter().all(|&p| clear(p, radius + 3.0)) {
            continue;
        }
        let lo = [0, 1, 2].map(|k| a[k].min(b[k]));
        let hi = [0, 1, 2].map(|k| a[k].max(b[k]));
        let mid = [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0);
        let half = (0..3).map(|k| (hi[k] - lo[k]) / 2.0).fold(0.0, f64::max);
        let span = g.span(mid, half * 3f64.sqrt() + radius + 1.0);
        for z in span[0].0..span[0].1 {
            for y in span[1].0..span[1].1 {
                for x in span[2].0..span[2].1 {
                    let i = g.idx([z, y, x]);
                    if !lung[i] {
                        continue;
                    }
                    let w = (radius + 0.5 - dist_to_segment(g.pos([z, y, x]), a, b)).clamp(0.0, 1.0);
                    if w > 0.0 {
                        data[i] = data[i].max(data[i] * (1.0 - w) + VESSEL_HU * w);
                    }
                }
            }
        }
    }
    for _ in 0..spec.walls {
        let radius = rng.gen_range(4.0..10.0f64).min(g.half.into_iter().fold(f64::INFINITY, f64::min) / 2.0);
        let Some(c) = random_point_in_lung(&g, radius, &mut rng) else { continue };
        if !clear(c, radius + 3.0) {
            continue;
        }
        let normal_axis = rng.gen_range(0..3usize);
        let span = g.span(c, radius + 1.0);
        for z in span[0].0..span[0].1 {
            for y in span[1].0..span[1].1 {
                for x in span[2].0..span[2].1 {
                    let i = g.idx([z, y, x]);
                    let p = g.pos([z, y, x]);
                    let off = (p[normal_axis] - c[normal_axis]).abs();
                    if lung[i] && off < 0.75 && dist(p, c) < radius {
                        data[i] = data[i].max(PLATE_HU);
                    }
                }
            }
        }
    }

    // Nodule bodies: uniform core with a Gaussian tail, then a correction so
    // the measured contrast is at least the drawn one.
    for &(c, d, contrast) in &placed {
        let r = d / 2.0;
        let span = g.span(c, r + 4.0 * sigma + 1.0);
        for z in span[0].0..span[0].1 {
            for y in span[1].0..span[1].1 {
                for x in span[2].0..span[2].1 {
                    let dd = dist(g.pos([z, y, x]), c);
                    let f = if dd <= r { 1.0 } else { (-(dd - r).powi(2) / (2.0 * sigma * sigma)).exp() };
                    data[g.idx([z, y, x])] += contrast * f;
                }
            }
        }
        let (inside, ring) = measure(&g, &data, &lung, c, d, sigma);
        let deficit = contrast - (inside - ring);
        if deficit > 0.0 {
            let span = g.span(c, r);
            for z in span[0].0..span[0].1 {
                for y in span[1].0..span[1].1 {
                    for x in span[2].0..span[2].1 {
                        if dist(g.pos([z, y, x]), c) <= r {
                            data[g.idx([z, y, x])] += deficit;
                        }
                    }
                }
            }
        }
    }

    let mut volume = Volume {
        extents: spec.extents,
        spacing: spec.spacing,
        origin: [0.0; 3],
        intensity: Intensity::Hounsfield,
        data,
        mask: Some(mask),
    };
    volume.origin = [0.5 * spec.spacing[0], 0.5 * spec.spacing[1], 0.5 * spec.spacing[2]];
    let mut annotation = ScanAnnotation::new(scan_id);
    for &(c, d, _) in &placed {
        // Physical (z, y, x) relative to the corner equals world because the
        // origin is the center of voxel 0.
        annotation.nodules.push(Nodule {
            center_mm: [c[2], c[1], c[0]],
            diameter_mm: d,
            agreement: 4,
            relevant: true,
        });
    }
    Ok((volume, annotation))
}

/// Mean over voxels inside the nodule ball and over a lung ring just beyond
/// its soft edge.
fn measure(g: &Grid, data: &[f64], lung: &[bool], c: [f64; 3], d: f64, sigma: f64) -> (f64, f64) {
    let r = d / 2.0;
    let (r0, r1) = (r + 3.0 * sigma + 1.0, r + 3.0 * sigma + 4.0);
    let span = g.span(c, r1);
    let (mut si, mut ni, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for z in span[0].0..span[0].1 {
        for y in span[1].0..span[1].1 {
            for x in span[2].0..span[2].1 {
                let i = g.idx([z, y, x]);
                let dd = dist(g.pos([z, y, x]), c);
                if dd <= r {
                    si += data[i];
                    ni += 1;
                } else if dd >= r0 && dd <= r1 && lung[i] {
                    sr += data[i];
                    nr += 1;
                }
            }
        }
    }
    (si / ni.max(1) as f64, sr / nr.max(1) as f64)
}

/// Mean intensity inside each annotated nodule minus the surrounding ring
/// mean, in the volume's units.
pub fn measured_contrast(v: &Volume, annotation: &ScanAnnotation, edge_sigma_mm: f64) -> Vec<f64> {
    let phys = [0, 1, 2].map(|a| v.extents[a] as f64 * v.spacing[a]);
    let g = Grid {
        ext: v.extents,
        spacing: v.spacing,
        half: phys.map(|p| p / 2.0),
    };
    let lung: Vec<bool> = match &v.mask {
        Some(m) => m.clone(),
        None => vec![true; v.len()],
    };
    annotation
        .nodules
        .iter()
        .map(|n| {
            let cv = v.world_to_voxel(n.center_mm);
            let c = [cv[2] * v.spacing[0], cv[1] * v.spacing[1], cv[0] * v.spacing[2]];
            let (inside, ring) = measure(&g, &v.data, &lung, c, n.diameter_mm, edge_sigma_mm);
            inside - ring
        })
        .collect()
}
