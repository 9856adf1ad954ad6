mod common;

use common::{match_oracle, nms_oracle, random_box, rng};
use pianet_core::boxes::{
    decode_box, encode_box, generate_anchors, iou_cube, match_anchors, nms, AnchorLabel, BoxCube, Detection,
};
use pianet_core::model::PiaNetConfig;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn nms_equals_quadratic_oracle() {
    let mut r = rng(10);
    for case in 0..120 {
        let n = r.gen_range(0..=200);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                cube: random_box(&mut r, 40.0, 12.0),
                // Coarse scores so ties occur.
                score: (r.gen_range(0..50) as f64) / 49.0,
            })
            .collect();
        let thr = if case % 2 == 0 { 0.25 } else { r.gen_range(0.0..0.6) };
        let got = nms(&dets, thr);
        assert_eq!(got, nms_oracle(&dets, thr), "case {case}");
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                assert!(iou_cube(&a.cube, &b.cube) <= thr);
            }
        }
        for d in &dets {
            if !got.contains(d) {
                assert!(got.iter().any(|k| k.score >= d.score && iou_cube(&k.cube, &d.cube) > thr));
            }
        }
    }
}

#[test]
fn matching_equals_oracle_small_grid() {
    let anchors = generate_anchors(&PiaNetConfig::reduced(32, 4)).unwrap();
    let mut r = rng(11);
    for case in 0..120 {
        let k = r.gen_range(0..=50);
        let gts: Vec<BoxCube> = (0..k).map(|_| random_box(&mut r, 32.0, 9.0)).collect();
        let m = match_anchors(&anchors, &gts, 0.02).unwrap();
        let (ga, labels) = match_oracle(&anchors, &gts, 0.02);
        assert_eq!(m.gt_anchor, ga, "case {case}");
        assert_eq!(m.labels, labels, "case {case}");
    }
}

#[test]
fn matching_default_grid_hundred_truths() {
    let anchors = generate_anchors(&PiaNetConfig::default()).unwrap();
    let mut r = rng(12);
    let gts: Vec<BoxCube> = (0..100).map(|_| random_box(&mut r, 128.0, 30.0)).collect();
    let m = match_anchors(&anchors, &gts, 0.02).unwrap();
    let (ga, labels) = match_oracle(&anchors, &gts, 0.02);
    assert_eq!(m.gt_anchor, ga);
    assert_eq!(m.labels, labels);
    let positives = m.positives();
    assert_eq!(positives.len(), 100);
    let mut seen = std::collections::HashSet::new();
    for (a, _) in &positives {
        assert!(seen.insert(*a));
    }
    // A ground truth holds its global argmax anchor unless another one does.
    for (g, gt) in gts.iter().enumerate() {
        let ious: Vec<f64> = anchors.boxes.iter().map(|a| iou_cube(a, gt)).collect();
        let best = ious.iter().cloned().fold(0.0, f64::max);
        let argmax = ious.iter().position(|&v| v == best).unwrap();
        if m.gt_anchor[g] != Some(argmax) {
            assert!(matches!(m.labels[argmax], AnchorLabel::Positive(o) if o != g));
        } else {
            assert_eq!(m.gt_iou[g], best);
        }
    }
}

#[test]
fn anchor_distribution() {
    let set = generate_anchors(&PiaNetConfig::default()).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for b in &set.boxes {
        *counts.entry(b.r as u32).or_insert(0usize) += 1;
    }
    let want: Vec<(u32, usize)> = vec![
        (4, 32_768),
        (6, 4096),
        (8, 4096),
        (10, 4096),
        (12, 512),
        (16, 512),
        (20, 512),
        (26, 512),
        (32, 512),
    ];
    assert_eq!(counts.into_iter().collect::<Vec<_>>(), want);
}

#[test]
fn iou_matches_monte_carlo() {
    let mut r = rng(13);
    for _ in 0..4 {
        let a = random_box(&mut r, 4.0, 6.0);
        let b = BoxCube::new(a.x + r.gen_range(-2.0..2.0), a.y + r.gen_range(-2.0..2.0), a.z + r.gen_range(-2.0..2.0), r.gen_range(1.0..6.0));
        let lo = [a.x.min(b.x) - 4.0, a.y.min(b.y) - 4.0, a.z.min(b.z) - 4.0];
        let inside = |c: &BoxCube, p: [f64; 3]| (0..3).all(|k| (p[k] - c.center()[k]).abs() <= c.r / 2.0);
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..1_000_000 {
            let p = [lo[0] + r.gen_range(0.0..12.0), lo[1] + r.gen_range(0.0..12.0), lo[2] + r.gen_range(0.0..12.0)];
            let (ia, ib) = (inside(&a, p), inside(&b, p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        let est = inter as f64 / union as f64;
        assert!((est - iou_cube(&a, &b)).abs() < 0.01, "{est} vs {}", iou_cube(&a, &b));
    }
}

#[test]
fn encode_decode_round_trip_many() {
    let mut r = rng(14);
    for _ in 0..100_000 {
        let a = random_box(&mut r, 128.0, 32.0);
        let g = random_box(&mut r, 128.0, 32.0);
        let back = decode_box(&encode_box(&g, &a).unwrap(), &a);
        for (u, v) in [(back.x, g.x), (back.y, g.y), (back.z, g.z), (back.r, g.r)] {
            assert!((u - v).abs() < 1e-9);
        }
        let p = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let t = encode_box(&decode_box(&p, &a), &a).unwrap();
        for k in 0..4 {
            assert!((t[k] - p[k]).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(ax in -10.0..10.0f64, ay in -10.0..10.0f64, az in -10.0..10.0f64, ar in 0.1..8.0f64,
                                 bx in -10.0..10.0f64, by in -10.0..10.0f64, bz in -10.0..10.0f64, br in 0.1..8.0f64) {
        let a = BoxCube::new(ax, ay, az, ar);
        let b = BoxCube::new(bx, by, bz, br);
        let v = iou_cube(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou_cube(&b, &a));
        prop_assert_eq!(iou_cube(&a, &a), 1.0);
        if a != b {
            prop_assert!(v < 1.0);
        }
    }

    #[test]
    fn encoding_is_scale_free(s in 0.2..5.0f64, gx in 0.0..50.0f64, gr in 1.0..20.0f64, ax in 0.0..50.0f64, ar in 1.0..20.0f64) {
        let g = BoxCube::new(gx, 3.0, 7.0, gr);
        let a = BoxCube::new(ax, 4.0, 6.0, ar);
        let t = encode_box(&g, &a).unwrap();
        let ts = encode_box(&BoxCube::new(gx * s, 3.0 * s, 7.0 * s, gr * s), &BoxCube::new(ax * s, 4.0 * s, 6.0 * s, ar * s)).unwrap();
        for k in 0..4 {
            prop_assert!((t[k] - ts[k]).abs() < 1e-9);
        }
    }
}
