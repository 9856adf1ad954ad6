mod common;

use common::{random_tensor, rng};
use pianet_core::engine::gradcheck::{gradcheck, GradCheckOptions, LayerObjective, Objective};
use pianet_core::engine::*;
use pianet_core::model::PiaNetConfig;

const TOL: f64 = 1e-4;

fn check<L: Layer>(layer: L, input: Tensor5, out_shape: Shape5, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let probe = random_tensor(out_shape, &mut r);
    let mut obj = LayerObjective::new(layer, probe);
    let rep = gradcheck(&mut obj, &input, TOL, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{:#?}", rep);
    rep
}

#[test]
fn conv3d_layer_gradients() {
    let mut r = rng(1);
    let x = random_tensor(Shape5::new(2, 2, 4, 4, 4), &mut r);
    let layer = Conv3d::new(2, 3, 3, 1, 1, 9);
    let rep = check(layer, x, Shape5::new(2, 3, 4, 4, 4), 2);
    assert!(rep.max_rel_error < TOL);
}

#[test]
fn strided_conv3d_gradients() {
    let mut r = rng(3);
    let x = random_tensor(Shape5::new(1, 2, 5, 5, 5), &mut r);
    check(Conv3d::new(2, 2, 3, 2, 1, 4), x, Shape5::new(1, 2, 3, 3, 3), 5);
}

#[test]
fn deconv3d_layer_gradients() {
    let mut r = rng(6);
    let x = random_tensor(Shape5::new(1, 3, 3, 3, 3), &mut r);
    check(Deconv3d::new(3, 2, 3, 1, 1, 7), x.clone(), Shape5::new(1, 2, 3, 3, 3), 8);
    check(Deconv3d::new(3, 2, 2, 2, 0, 7), x, Shape5::new(1, 2, 6, 6, 6), 8);
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng(9);
    let x = random_tensor(Shape5::new(2, 3, 3, 3, 3), &mut r);
    let mut bn = BatchNorm3d::new(3);
    bn.scale.value = vec![0.5, 1.5, -0.7];
    bn.shift.value = vec![0.1, -0.2, 0.3];
    check(bn, x, Shape5::new(2, 3, 3, 3, 3), 10);
}

#[test]
fn relu_gradients_away_from_zero() {
    let mut r = rng(11);
    let mut x = random_tensor(Shape5::new(1, 2, 3, 3, 3), &mut r);
    x.data_mut()[0] = 0.0;
    x.data_mut()[5] = 0.0;
    let probe = random_tensor(x.shape(), &mut r);
    let mut obj = LayerObjective::new(Relu::default(), probe);
    obj.kink_radius = Some(1e-5);
    let rep = gradcheck(&mut obj, &x, TOL, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{rep:#?}");
    assert!(rep.skipped >= 2);
}

#[test]
fn maxpool_gradients() {
    let mut r = rng(12);
    let x = random_tensor(Shape5::new(1, 2, 4, 4, 4), &mut r);
    check(MaxPool3d::default(), x, Shape5::new(1, 2, 2, 2, 2), 13);
}

#[test]
fn linear_and_global_pool_gradients() {
    let mut r = rng(14);
    let x = random_tensor(Shape5::new(3, 4, 1, 1, 1), &mut r);
    check(Linear::new(4, 2, 1), x, Shape5::new(3, 2, 1, 1, 1), 15);
    let x = random_tensor(Shape5::new(2, 3, 2, 3, 2), &mut r);
    check(GlobalAvgPool::default(), x, Shape5::new(2, 3, 1, 1, 1), 16);
}

/// sum(probe * unpool(x, idx)) with fixed indices.
struct UnpoolObjective {
    idx: PoolIndices,
    probe: Tensor5,
    layer: MaxUnpool3d,
}

impl Objective for UnpoolObjective {
    fn loss(&mut self, input: &Tensor5) -> pianet_core::Result<f64> {
        let y = self.layer.forward(input, &self.idx)?;
        Ok(y.data().iter().zip(self.probe.data()).map(|(a, b)| a * b).sum())
    }
    fn loss_and_grad(&mut self, input: &Tensor5) -> pianet_core::Result<(f64, Tensor5)> {
        let l = self.loss(input)?;
        Ok((l, self.layer.backward(&self.probe)?))
    }
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&str, &mut Param)) {}
}

#[test]
fn unpool_gradients() {
    let mut r = rng(17);
    let src = random_tensor(Shape5::new(1, 2, 4, 4, 4), &mut r);
    let (p, idx) = maxpool3d(&src, 2).unwrap();
    let probe = random_tensor(src.shape(), &mut r);
    let mut obj = UnpoolObjective {
        idx,
        probe,
        layer: MaxUnpool3d::default(),
    };
    let rep = gradcheck(&mut obj, &p, TOL, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{rep:#?}");
}

#[test]
fn nonfinite_input_gives_diagnostic_report() {
    let mut x = Tensor5::zeros(Shape5::new(1, 1, 3, 3, 3));
    x.data_mut()[4] = f64::NAN;
    let probe = Tensor5::full(Shape5::new(1, 1, 3, 3, 3), 1.0);
    let mut obj = LayerObjective::new(Conv3d::new(1, 1, 3, 1, 1, 0), probe);
    let rep = gradcheck(&mut obj, &x, TOL, &GradCheckOptions::default()).unwrap();
    assert!(!rep.passed);
    assert!(rep.nonfinite.is_some());
}

#[test]
fn library_suite_passes() {
    let suite = pianet_core::verify::layer_suite(3).unwrap();
    assert_eq!(suite.len(), 11);
    for e in &suite {
        assert!(e.report.passed, "{}: {:?}", e.name, e.report.worst);
    }
}

#[test]
fn full_loss_through_small_network() {
    let t = std::time::Instant::now();
    let e = pianet_core::verify::network_check(PiaNetConfig::reduced(32, 8), 4, 0.01, 30).unwrap();
    println!("{} entries ({} skipped) in {:?}, max rel {:.2e}", e.report.checked, e.report.skipped, t.elapsed(), e.report.max_rel_error);
    assert!(e.report.passed, "{:?}", e.report.worst);
}
