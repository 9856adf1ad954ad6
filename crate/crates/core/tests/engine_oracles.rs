mod common;

use common::{avgpool_oracle, conv3d_oracle, maxpool_oracle, random_tensor, rng};
use pianet_core::engine::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn conv3d_matches_nested_loops_on_spec_case() {
    let mut r = rng(11);
    let x = random_tensor(Shape5::new(2, 3, 6, 6, 6), &mut r);
    let w = random_tensor(Shape5::new(4, 3, 3, 3, 3), &mut r);
    let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let fast = conv3d(&x, &w, &b, 1, 1).unwrap();
    let slow = conv3d_oracle(&x, &w, &b, 1, 1);
    assert!(fast.max_abs_diff(&slow) < 1e-10);
}

#[test]
fn conv3d_random_shapes_strides_and_pads() {
    let mut r = rng(12);
    for _ in 0..40 {
        let n = r.gen_range(1..3);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let d = r.gen_range(k.max(2)..8);
        let x = random_tensor(Shape5::new(n, cin, d, d + 1, d), &mut r);
        let w = random_tensor(Shape5::new(cout, cin, k, k, k), &mut r);
        let b: Vec<f64> = (0..cout).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fast = conv3d(&x, &w, &b, stride, pad).unwrap();
        let slow = conv3d_oracle(&x, &w, &b, stride, pad);
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }
}

#[test]
fn maxpool_matches_window_scan() {
    let mut r = rng(13);
    let x = random_tensor(Shape5::new(1, 2, 8, 8, 8), &mut r);
    let (y, idx) = maxpool3d(&x, 2).unwrap();
    let (yo, io) = maxpool_oracle(&x, 2);
    assert_eq!(y, yo);
    assert_eq!(idx.indices, io);
}

#[test]
fn cascaded_average_pools_equal_wide_pools() {
    let mut r = rng(14);
    let x = random_tensor(Shape5::new(1, 1, 128, 128, 128), &mut r);
    let mut level = x.clone();
    for k in 1..=4 {
        level = avgpool3d(&level, 2, 2).unwrap();
        let direct = avgpool3d(&x, 1 << k, 1 << k).unwrap();
        assert!(level.max_abs_diff(&direct) < 1e-12, "level {k}");
    }
}

#[test]
fn unpool_roundtrip_keeps_maxima_in_place() {
    let mut r = rng(15);
    let x = random_tensor(Shape5::new(1, 2, 4, 4, 4), &mut r);
    let (p, idx) = maxpool3d(&x, 2).unwrap();
    let u = max_unpool3d(&p, &idx, x.shape()).unwrap();
    let nonzero = u.data().iter().filter(|v| **v != 0.0).count();
    assert_eq!(nonzero, p.len());
    for (&i, &v) in idx.indices.iter().zip(p.data()) {
        assert_eq!(u.data()[i], x.data()[i]);
        assert_eq!(u.data()[i], v);
    }
    let (again, _) = maxpool3d(&u, 2).unwrap();
    // Entries can be negative, in which case the zero fill wins the re-pool.
    for (a, b) in again.data().iter().zip(p.data()) {
        assert_eq!(*a, b.max(0.0));
    }
}

#[test]
fn unpool_of_zero_is_zero() {
    let mut r = rng(16);
    let x = random_tensor(Shape5::new(1, 1, 4, 4, 4), &mut r);
    let (p, idx) = maxpool3d(&x, 2).unwrap();
    let z = Tensor5::zeros(p.shape());
    assert!(max_unpool3d(&z, &idx, x.shape()).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn deconv_equals_conv_input_gradient() {
    let mut r = rng(17);
    for &(stride, pad) in &[(1, 1), (1, 0), (2, 0), (2, 1)] {
        let w = random_tensor(Shape5::new(3, 2, 3, 3, 3), &mut r);
        let conv_in = Shape5::new(2, 2, 7, 7, 7);
        let conv_out = pianet_core::engine::conv::conv3d_output_shape(conv_in, w.shape(), stride, pad).unwrap();
        let g = random_tensor(conv_out, &mut r);
        let via_conv = conv3d_input_grad(&g, &w, conv_in, stride, pad).unwrap();
        let via_deconv = deconv3d(&g, &w, &[0.0, 0.0], stride, pad).unwrap();
        // Transposed conv may be smaller when the forward conv dropped a remainder.
        let s = via_deconv.shape();
        for idx in 0..s.numel() {
            let [n, c, z, y, x] = unflatten(s, idx);
            let a = via_deconv.get([n, c, z, y, x]);
            let b = via_conv.get([n, c, z, y, x]);
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
        }
    }
}

fn unflatten(s: Shape5, mut i: usize) -> [usize; 5] {
    let mut out = [0; 5];
    for a in (0..5).rev() {
        out[a] = i % s.0[a];
        i /= s.0[a];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unpool_conserves_mass(seed in 0u64..10_000, c in 1usize..3, half in 1usize..4) {
        let mut r = rng(seed);
        let side = 2 * half;
        let x = random_tensor(Shape5::new(1, c, side, side, side), &mut r);
        let (p, idx) = maxpool3d(&x, 2).unwrap();
        let vals = random_tensor(p.shape(), &mut r);
        let u = max_unpool3d(&vals, &idx, x.shape()).unwrap();
        prop_assert!((u.sum() - vals.sum()).abs() < 1e-12);
    }

    #[test]
    fn avgpool_matches_oracle(seed in 0u64..10_000, k in 1usize..4, s in 1usize..3, extra in 0usize..3) {
        let mut r = rng(seed);
        let side = k + s * extra;
        let x = random_tensor(Shape5::new(1, 2, side, side, side), &mut r);
        let y = avgpool3d(&x, k, s).unwrap();
        prop_assert!(y.max_abs_diff(&avgpool_oracle(&x, k, s)) < 1e-12);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let x = random_tensor(Shape5::new(1, 2, 4, 4, 4), &mut r);
        let w = random_tensor(Shape5::new(3, 2, 3, 3, 3), &mut r);
        let a = conv3d(&x, &w, &[0.1, 0.2, 0.3], 1, 1).unwrap();
        let b = conv3d(&x, &w, &[0.1, 0.2, 0.3], 1, 1).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

#[test]
fn xavier_variance_matches_uniform_law() {
    let shape = Shape5::new(100, 37, 3, 3, 3); // 99,900 samples
    let p = xavier_init(shape, 5);
    let n = p.weight.len() as f64;
    let mean = p.weight.sum() / n;
    let var = p.weight.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let fan_in = 37.0 * 27.0;
    let fan_out = 100.0 * 27.0;
    let expected = 2.0 / (fan_in + fan_out);
    assert!(((var - expected) / expected).abs() < 0.05, "var {var} expected {expected}");
}
