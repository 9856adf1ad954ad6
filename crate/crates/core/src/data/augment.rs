use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tiling::CubeSample;
use crate::boxes::BoxCube;
use crate::engine::Tensor5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Flip,
    Resize,
    Translate,
    Rotate,
    AxisSwap,
}

impl AugOp {
    pub const ALL: [AugOp; 5] = [AugOp::Flip, AugOp::Resize, AugOp::Translate, AugOp::Rotate, AugOp::AxisSwap];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub resize_min: f64,
    pub resize_max: f64,
    pub max_shift: i64,
    /// When set, `Rotate` draws a free angle in [-deg, deg] instead of a
    /// quarter turn.
    pub free_rotation_deg: Option<f64>,
    pub max_redraws: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_min: 0.9,
            resize_max: 1.1,
            max_shift: 8,
            free_rotation_deg: None,
            max_redraws: 10,
        }
    }
}

/// Output axis k reads input axis `perm[k]`, mirrored when `flip[k]`.
/// Axes are volume axes (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignedPerm {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl SignedPerm {
    pub const IDENTITY: SignedPerm = SignedPerm {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    pub fn inverse(&self) -> SignedPerm {
        let mut inv = SignedPerm::IDENTITY;
        for k in 0..3 {
            inv.perm[self.perm[k]] = k;
            inv.flip[self.perm[k]] = self.flip[k];
        }
        inv
    }

    /// Quarter turn in the plane of volume axes (a, b).
    pub fn quarter_turn(a: usize, b: usize) -> SignedPerm {
        let mut p = SignedPerm::IDENTITY;
        p.perm[a] = b;
        p.perm[b] = a;
        p.flip[a] = true;
        p
    }

    fn point(&self, v: [f64; 3], side: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let c = v[self.perm[k]];
            out[k] = if self.flip[k] { side - c } else { c };
        }
        out
    }
}

fn zyx(b: &BoxCube) -> [f64; 3] {
    [b.z, b.y, b.x]
}

fn from_zyx(v: [f64; 3], r: f64) -> BoxCube {
    BoxCube::new(v[2], v[1], v[0], r)
}

fn side_of(t: &Tensor5) -> usize {
    t.shape().spatial()[0]
}

pub fn apply_signed_perm(sample: &CubeSample, p: SignedPerm) -> CubeSample {
    let s = side_of(&sample.cube);
    let src = sample.cube.data();
    let mut cube = sample.cube.clone();
    let dst = cube.data_mut();
    let stride = [s * s, s, 1];
    let mut i = 0;
    for a in 0..s {
        for b in 0..s {
            for c in 0..s {
                let out = [a, b, c];
                let mut off = 0;
                for k in 0..3 {
                    let j = if p.flip[k] { s - 1 - out[k] } else { out[k] };
                    off += j * stride[p.perm[k]];
                }
                dst[i] = src[off];
                i += 1;
            }
        }
    }
    let gts = sample
        .gts
        .iter()
        .map(|b| from_zyx(p.point(zyx(b), s as f64), b.r))
        .collect();
    CubeSample {
        cube,
        origin: sample.origin,
        gts,
    }
}

/// Integer shift (z, y, x); vacated voxels are zero.
pub fn translate(sample: &CubeSample, t: [i64; 3]) -> CubeSample {
    let s = side_of(&sample.cube) as i64;
    let src = sample.cube.data();
    let mut cube = sample.cube.clone();
    let dst = cube.data_mut();
    dst.fill(0.0);
    for z in 0..s {
        let sz = z - t[0];
        if !(0..s).contains(&sz) {
            continue;
        }
        for y in 0..s {
            let sy = y - t[1];
            if !(0..s).contains(&sy) {
                continue;
            }
            for x in 0..s {
                let sx = x - t[2];
                if (0..s).contains(&sx) {
                    dst[((z * s + y) * s + x) as usize] = src[((sz * s + sy) * s + sx) as usize];
                }
            }
        }
    }
    let gts = sample
        .gts
        .iter()
        .map(|b| b.translated([t[2] as f64, t[1] as f64, t[0] as f64]))
        .collect();
    CubeSample {
        cube,
        origin: sample.origin,
        gts,
    }
}

/// Resamples with `out(p) = in(C + M (p - C))` about the cube center, zero
/// outside; `m` acts on (z, y, x) continuous coordinates.
fn affine_resample(cube: &Tensor5, m: [[f64; 3]; 3]) -> Tensor5 {
    let s = side_of(cube);
    let src = cube.data();
    let mut out = cube.clone();
    let c = s as f64 / 2.0;
    let get = |z: i64, y: i64, x: i64| -> f64 {
        let si = s as i64;
        if z < 0 || y < 0 || x < 0 || z >= si || y >= si || x >= si {
            0.0
        } else {
            src[((z * si + y) * si + x) as usize]
        }
    };
    let dst = out.data_mut();
    let mut i = 0;
    for a in 0..s {
        for b in 0..s {
            for cc in 0..s {
                let p = [a as f64 + 0.5 - c, b as f64 + 0.5 - c, cc as f64 + 0.5 - c];
                let mut q = [0.0; 3];
                for r in 0..3 {
                    q[r] = c + m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] - 0.5;
                }
                let f = q.map(f64::floor);
                let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
                let (z0, y0, x0) = (f[0] as i64, f[1] as i64, f[2] as i64);
                let mut v = 0.0;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - t[0] } else { t[0] };
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - t[2] } else { t[2] };
                            let w = wz * wy * wx;
                            if w != 0.0 {
                                v += w * get(z0 + dz, y0 + dy, x0 + dx);
                            }
                        }
                    }
                }
                dst[i] = v;
                i += 1;
            }
        }
    }
    out
}

/// Uniform scale by `factor` about the cube center.
pub fn resize(sample: &CubeSample, factor: f64) -> CubeSample {
    let inv = 1.0 / factor;
    let cube = affine_resample(&sample.cube, [[inv, 0.0, 0.0], [0.0, inv, 0.0], [0.0, 0.0, inv]]);
    let c = side_of(&sample.cube) as f64 / 2.0;
    let gts = sample
        .gts
        .iter()
        .map(|b| from_zyx(zyx(b).map(|v| c + factor * (v - c)), b.r * factor))
        .collect();
    CubeSample {
        cube,
        origin: sample.origin,
        gts,
    }
}

/// Free rotation by `radians` in the plane of volume axes (a, b) about the
/// cube center. Box sides are kept.
pub fn rotate_free(sample: &CubeSample, a: usize, b: usize, radians: f64) -> CubeSample {
    let (sn, cs) = radians.sin_cos();
    let mut fwd = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    fwd[a][a] = cs;
    fwd[a][b] = -sn;
    fwd[b][a] = sn;
    fwd[b][b] = cs;
    let mut inv = fwd;
    inv[a][b] = sn;
    inv[b][a] = -sn;
    let cube = affine_resample(&sample.cube, inv);
    let c = side_of(&sample.cube) as f64 / 2.0;
    let gts = sample
        .gts
        .iter()
        .map(|bx| {
            let p = zyx(bx).map(|v| v - c);
            let mut q = [0.0; 3];
            for r in 0..3 {
                q[r] = c + fwd[r][0] * p[0] + fwd[r][1] * p[1] + fwd[r][2] * p[2];
            }
            from_zyx(q, bx.r)
        })
        .collect();
    CubeSample {
        cube,
        origin: sample.origin,
        gts,
    }
}

fn draw<R: Rng + ?Sized>(sample: &CubeSample, op: AugOp, cfg: &AugmentConfig, rng: &mut R) -> CubeSample {
    match op {
        AugOp::Flip => {
            let mut p = SignedPerm::IDENTITY;
            for f in &mut p.flip {
                *f = rng.gen_bool(0.5);
            }
            apply_signed_perm(sample, p)
        }
        AugOp::Resize => resize(sample, rng.gen_range(cfg.resize_min..=cfg.resize_max)),
        AugOp::Translate => {
            let m = cfg.max_shift;
            let t = [rng.gen_range(-m..=m), rng.gen_range(-m..=m), rng.gen_range(-m..=m)];
            translate(sample, t)
        }
        AugOp::Rotate => {
            let axis = rng.gen_range(0..3usize);
            let (a, b) = [(1, 2), (0, 2), (0, 1)][axis];
            match cfg.free_rotation_deg {
                Some(deg) => rotate_free(sample, a, b, rng.gen_range(-deg..=deg).to_radians()),
                None => {
                    let turns = rng.gen_range(1..=3);
                    let mut out = sample.clone();
                    for _ in 0..turns {
                        out = apply_signed_perm(&out, SignedPerm::quarter_turn(a, b));
                    }
                    out
                }
            }
        }
        AugOp::AxisSwap => {
            let mut perm = [0usize, 1, 2];
            perm.shuffle(rng);
            apply_signed_perm(
                sample,
                SignedPerm {
                    perm,
                    flip: [false; 3],
                },
            )
        }
    }
}

/// Applies each op in `ops` in order. A draw that pushes a box center out of
/// the cube is redrawn; once redraws run out the op is skipped.
pub fn augment<R: Rng + ?Sized>(sample: &CubeSample, ops: &[AugOp], cfg: &AugmentConfig, rng: &mut R) -> CubeSample {
    let mut cur = sample.clone();
    for &op in ops {
        let mut accepted = None;
        for _ in 0..=cfg.max_redraws {
            let cand = draw(&cur, op, cfg, rng);
            if cand.is_valid() {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(c) => cur = c,
            None => log::debug!("augmentation {op:?} skipped after {} redraws", cfg.max_redraws),
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape5;

    fn sample(s: usize) -> CubeSample {
        let cube = Tensor5::from_fn(Shape5([1, 1, s, s, s]), |i| (i[2] * 31 + i[3] * 7 + i[4]) as f64);
        CubeSample {
            cube,
            origin: [0; 3],
            gts: vec![BoxCube::new(2.25, 3.5, 1.75, 2.0)],
        }
    }

    #[test]
    fn signed_perm_inverse() {
        let s = sample(6);
        let p = SignedPerm {
            perm: [2, 0, 1],
            flip: [true, false, true],
        };
        let back = apply_signed_perm(&apply_signed_perm(&s, p), p.inverse());
        assert_eq!(back, s);
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let s = sample(5);
        let mut r = s.clone();
        for _ in 0..4 {
            r = apply_signed_perm(&r, SignedPerm::quarter_turn(0, 2));
        }
        assert_eq!(r, s);
    }

    #[test]
    fn translate_moves_data() {
        let s = sample(6);
        let t = translate(&s, [1, 0, -2]);
        assert_eq!(t.cube.get([0, 0, 1, 2, 0]), s.cube.get([0, 0, 0, 2, 2]));
        assert_eq!(t.cube.get([0, 0, 0, 2, 0]), 0.0);
        assert_eq!(t.gts[0], BoxCube::new(0.25, 3.5, 2.75, 2.0));
    }

    #[test]
    fn unit_resize_is_identity() {
        let s = sample(6);
        assert_eq!(resize(&s, 1.0), s);
    }
}
