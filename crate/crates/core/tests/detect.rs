use pianet_core::boxes::iou_cube;
use pianet_core::data::{generate_phantom, preprocess, PhantomSpec, PreprocessConfig};
use pianet_core::detect::{detect_volume, to_records, DetectConfig};
use pianet_core::model::{PiaNet, PiaNetConfig};

#[test]
fn untrained_model_yields_valid_detections() {
    let (raw, _) = generate_phantom(&PhantomSpec::cube(5, 48), "s").unwrap();
    let v = preprocess(&raw, &PreprocessConfig::default()).unwrap();
    let net = PiaNet::new(PiaNetConfig::reduced(32, 8), 1).unwrap();
    let cfg = DetectConfig {
        score_threshold: 0.0,
        max_detections: 25,
        ..Default::default()
    };
    let dets = detect_volume(&net, &v, &cfg).unwrap();
    assert!(!dets.is_empty() && dets.len() <= 25);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    for d in &dets {
        assert!(d.cube.is_valid() && (0.0..=1.0).contains(&d.score));
    }
    for a in 0..dets.len() {
        for b in a + 1..dets.len() {
            assert!(iou_cube(&dets[a].cube, &dets[b].cube) <= cfg.nms_threshold + 1e-12);
        }
    }
    let again = detect_volume(&net, &v, &cfg).unwrap();
    assert_eq!(again, dets);
    let recs = to_records(&v, "s", &dets);
    assert_eq!(recs.len(), dets.len());
    assert!(recs.iter().all(|r| r.r_mm > 0.0 && r.x_mm.is_finite()));
}

#[test]
fn single_thread_matches_parallel() {
    let (raw, _) = generate_phantom(&PhantomSpec::cube(6, 48), "s").unwrap();
    let v = preprocess(&raw, &PreprocessConfig::default()).unwrap();
    let net = PiaNet::new(PiaNetConfig::reduced(32, 8), 2).unwrap();
    let cfg = DetectConfig::default();
    let par = detect_volume(&net, &v, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let seq = pool.install(|| detect_volume(&net, &v, &cfg).unwrap());
    assert_eq!(par, seq);
}
