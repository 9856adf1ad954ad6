use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pianet_core::boxes::{generate_anchors, iou_cube, match_anchors, nms, BoxCube, Detection};
use pianet_core::engine::{conv3d, conv3d_backward, maxpool3d, Mode, Shape5, Tensor5};
use pianet_core::model::{PiaNet, PiaNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(10);
    for (cin, cout, side) in [(1, 24, 32), (24, 32, 16), (64, 64, 8)] {
        let x = random(Shape5::new(1, cin, side, side, side), &mut rng);
        let w = random(Shape5::new(cout, cin, 3, 3, 3), &mut rng);
        let b = vec![0.0; cout];
        let id = format!("{cin}x{cout}@{side}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| conv3d(black_box(&x), &w, &b, 1, 1).unwrap())
        });
        let gy = random(Shape5::new(1, cout, side, side, side), &mut rng);
        g.bench_with_input(BenchmarkId::new("backward", &id), &(), |bench, _| {
            bench.iter(|| conv3d_backward(black_box(&x), &w, &gy, 1, 1).unwrap())
        });
    }
    let x = random(Shape5::new(1, 24, 32, 32, 32), &mut rng);
    g.bench_function("maxpool 24@32", |bench| bench.iter(|| maxpool3d(black_box(&x), 2).unwrap()));
    g.finish();
}

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BoxCube> {
    (0..n)
        .map(|_| BoxCube::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0), rng.gen_range(4.0..20.0)))
        .collect()
}

fn boxes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = PiaNetConfig::default();
    c.bench_function("generate_anchors default", |b| b.iter(|| generate_anchors(black_box(&cfg)).unwrap()));
    let anchors = generate_anchors(&cfg).unwrap();
    let gts = random_boxes(3, &mut rng);
    c.bench_function("match_anchors 3 gt", |b| b.iter(|| match_anchors(&anchors, black_box(&gts), 0.02).unwrap()));
    let pairs = random_boxes(2000, &mut rng);
    c.bench_function("iou_cube 1000 pairs", |b| {
        b.iter(|| pairs.chunks(2).map(|p| iou_cube(&p[0], &p[1])).sum::<f64>())
    });
    for n in [200, 2000] {
        let dets: Vec<Detection> = random_boxes(n, &mut rng)
            .into_iter()
            .map(|cube| Detection {
                cube,
                score: rng.gen_range(0.0..1.0),
            })
            .collect();
        c.bench_with_input(BenchmarkId::new("nms", n), &dets, |b, d| b.iter(|| nms(black_box(d), 0.1)));
    }
}

fn detector(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("detector");
    g.sample_size(10);
    let mut net = PiaNet::new(PiaNetConfig::reduced(64, 4), 0).unwrap();
    let x = Tensor5::from_fn(Shape5::new(1, 1, 64, 64, 64), |_| rng.gen_range(0.0..255.0));
    g.bench_function("forward reduced(64, 4)", |b| b.iter(|| net.forward(black_box(&x), Mode::Infer).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, boxes, detector);
criterion_main!(benches);
