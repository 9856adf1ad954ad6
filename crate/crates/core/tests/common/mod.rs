#![allow(dead_code)]

use pianet_core::boxes::{iou_cube, AnchorLabel, AnchorSet, BoxCube, Detection};
use pianet_core::engine::{Shape5, Tensor5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six-nested-loop reference convolution, independent of the engine kernels.
pub fn conv3d_oracle(x: &Tensor5, w: &Tensor5, bias: &[f64], stride: usize, pad: usize) -> Tensor5 {
    let [n, cin, d, h, wd] = x.shape().0;
    let [cout, _, kd, kh, kw] = w.shape().0;
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor5::zeros(Shape5::new(n, cout, od, oh, ow));
    for b in 0..n {
        for o in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * stride + a) as isize - pad as isize;
                                        let iy = (y * stride + bb) as isize - pad as isize;
                                        let ix = (xo * stride + e) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += w.get([o, c, a, bb, e]) * x.get([b, c, iz as usize, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.set([b, o, z, y, xo], acc);
                    }
                }
            }
        }
    }
    out
}

/// Window scan for a window == stride max pool; first maximum wins.
pub fn maxpool_oracle(x: &Tensor5, k: usize) -> (Tensor5, Vec<usize>) {
    let [n, c, d, h, w] = x.shape().0;
    let mut out = Tensor5::zeros(Shape5::new(n, c, d / k, h / k, w / k));
    let mut idx = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for z in 0..d / k {
                for y in 0..h / k {
                    for xo in 0..w / k {
                        let mut best = (f64::NEG_INFINITY, 0usize);
                        let mut first = true;
                        for a in 0..k {
                            for bb in 0..k {
                                for e in 0..k {
                                    let at = [b, ch, z * k + a, y * k + bb, xo * k + e];
                                    let v = x.get(at);
                                    if first || v > best.0 {
                                        best = (v, x.offset(at));
                                        first = false;
                                    }
                                }
                            }
                        }
                        out.set([b, ch, z, y, xo], best.0);
                        idx.push(best.1);
                    }
                }
            }
        }
    }
    (out, idx)
}

pub fn avgpool_oracle(x: &Tensor5, k: usize, s: usize) -> Tensor5 {
    let [n, c, d, h, w] = x.shape().0;
    let (od, oh, ow) = ((d - k) / s + 1, (h - k) / s + 1, (w - k) / s + 1);
    let mut out = Tensor5::zeros(Shape5::new(n, c, od, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..k {
                            for bb in 0..k {
                                for e in 0..k {
                                    acc += x.get([b, ch, z * s + a, y * s + bb, xo * s + e]);
                                }
                            }
                        }
                        out.set([b, ch, z, y, xo], acc / (k * k * k) as f64);
                    }
                }
            }
        }
    }
    out
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64, rmax: f64) -> BoxCube {
    BoxCube::new(
        r.gen_range(0.0..extent),
        r.gen_range(0.0..extent),
        r.gen_range(0.0..extent),
        r.gen_range(0.5..rmax),
    )
}

/// Full IoU matrix, then a keep/suppress sweep.
pub fn nms_oracle(d: &[Detection], thr: f64) -> Vec<Detection> {
    let n = d.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = iou_cube(&d[i].cube, &d[j].cube);
        }
    }
    let mut alive = vec![true; n];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if alive[i] && best.map_or(true, |b| d[i].score > d[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(d[b]);
        for j in 0..n {
            if m[b][j] > thr {
                alive[j] = false;
            }
        }
        alive[b] = false;
    }
    out
}

/// Greedy assignment over the full (gt, anchor) IoU table.
pub fn match_oracle(anchors: &AnchorSet, gts: &[BoxCube], neg: f64) -> (Vec<Option<usize>>, Vec<AnchorLabel>) {
    let table: Vec<Vec<f64>> = gts.iter().map(|g| anchors.boxes.iter().map(|a| iou_cube(a, g)).collect()).collect();
    let mut gt_anchor = vec![None; gts.len()];
    let mut taken = vec![false; anchors.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..anchors.len() {
            if taken[a] {
                continue;
            }
            for g in 0..gts.len() {
                let v = table[g][a];
                if gt_anchor[g].is_some() || v <= 0.0 {
                    continue;
                }
                if best.map_or(true, |(bv, _, _)| v > bv) {
                    best = Some((v, a, g));
                }
            }
        }
        let Some((_, a, g)) = best else { break };
        taken[a] = true;
        gt_anchor[g] = Some(a);
    }
    let mut labels = vec![AnchorLabel::Ignored; anchors.len()];
    for a in 0..anchors.len() {
        if gts.iter().enumerate().all(|(g, _)| table[g][a] < neg) {
            labels[a] = AnchorLabel::Negative;
        }
    }
    for (g, a) in gt_anchor.iter().enumerate() {
        if let Some(a) = a {
            labels[*a] = AnchorLabel::Positive(g);
        }
    }
    (gt_anchor, labels)
}
