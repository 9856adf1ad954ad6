use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_resume, make_checkpoint, mine_hard_negatives, restore_state, with_step, Checkpoint, StepRecord,
    TrainConfig, TrainOutcome,
};
use crate::boxes::{generate_anchors, match_anchors, AnchorSet, BoxCube};
use crate::data::{augment, cube_at, scan_boxes, AugOp, CubeSample, ScanAnnotation, Volume};
use crate::engine::{import_params, Mode, Parameterized, Sgd, Tensor5};
use crate::error::{Error, Result};
use crate::loss::{logit_gradients, multitask_loss, LossBreakdown, LossTargets};
use crate::model::{transfer_features, PiaNet, PiaNetConfig, RawPrediction};

const STAGE2_STREAM: u64 = 0x5354_4147_4532;

/// Starting point of stage 2.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Fresh,
    /// Feature-extractor weights from a stage-1 checkpoint.
    Pretrained(&'a Checkpoint),
}

/// Detector rebuilt from a stage-2 checkpoint.
pub fn detector_from(model: &PiaNetConfig, ckpt: &Checkpoint) -> Result<PiaNet> {
    let mut net = PiaNet::new(model.clone(), 0)?;
    import_params(&mut net, &ckpt.tensors, &|_| true)?;
    Ok(net)
}

/// One training cube: centered near a random target nodule (jitter up to
/// `center_jitter` of the side), or with probability `background_fraction` (or when the scan
/// has no targets) at a random position. Flip and resize are applied.
pub fn sample_training_cube<R: Rng + ?Sized>(
    v: &Volume,
    boxes: &[BoxCube],
    side: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> CubeSample {
    let background = boxes.is_empty() || rng.gen_bool(cfg.background_fraction);
    let origin = if background {
        [0, 1, 2].map(|a| rng.gen_range(0..=v.extents[a].saturating_sub(side)) as i64)
    } else {
        let t = boxes[rng.gen_range(0..boxes.len())];
        let j = (cfg.center_jitter * side as f64).floor() as i64;
        let c = [t.z, t.y, t.x];
        c.map(|x| x.floor() as i64 - (side / 2) as i64 + rng.gen_range(-j..=j))
    };
    let sample = cube_at(v, origin, side, boxes);
    augment(&sample, &[AugOp::Flip, AugOp::Resize], &cfg.augment, rng)
}

/// Loss and output gradients for one batch, with hard negatives mined over
/// the whole batch from this forward pass's scores.
fn batch_loss<R: Rng + ?Sized>(
    pred: &RawPrediction,
    gts: &[Vec<BoxCube>],
    anchors: &AnchorSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, RawPrediction)> {
    let batch = gts.len();
    let mut assignments = Vec::with_capacity(batch);
    let mut probs = Vec::with_capacity(batch);
    for (n, g) in gts.iter().enumerate() {
        assignments.push(match_anchors(anchors, g, cfg.neg_iou_max)?);
        probs.push(pred.ggo_probabilities(n));
    }
    let mut selected: Vec<Option<Vec<usize>>> = vec![None; batch];
    if cfg.hard_negative_mining {
        let positives: usize = assignments.iter().map(|a| a.positives().len()).sum();
        let k = cfg.hard_negative_k(positives);
        let cands: Vec<(usize, usize)> = assignments
            .iter()
            .enumerate()
            .flat_map(|(n, a)| a.negatives().into_iter().map(move |i| (n, i)))
            .collect();
        let scores: Vec<f64> = cands.iter().map(|&(n, i)| probs[n][i]).collect();
        let mut per: Vec<Vec<usize>> = vec![Vec::new(); batch];
        for c in mine_hard_negatives(&scores, cfg.pool_factor * k, k, rng) {
            per[cands[c].0].push(cands[c].1);
        }
        selected = per.into_iter().map(Some).collect();
    }
    let mut total = LossBreakdown::default();
    let mut gb = Vec::with_capacity(batch);
    let mut gs = Vec::with_capacity(batch);
    for n in 0..batch {
        let targets = LossTargets::from_assignment(&assignments[n], anchors, &gts[n], selected[n].take())?;
        let (b, grads) = multitask_loss(&targets, &probs[n], &pred.flat_boxes(n), &cfg.loss)?;
        total.total += b.total;
        total.confidence += b.confidence;
        total.localization += b.localization;
        total.positives += b.positives;
        total.negatives += b.negatives;
        gs.push(logit_gradients(&probs[n], &grads.prob));
        gb.push(grads.offsets);
    }
    Ok((total, RawPrediction::from_flat(&pred.layout(), &gb, &gs)?))
}

/// Multi-task fine-tuning of the full detector on preprocessed scans.
pub fn finetune_stage2(
    scans: &[(Volume, ScanAnnotation)],
    model: &PiaNetConfig,
    init: Init<'_>,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scans.is_empty() {
        return Err(Error::data("stage-2 fine-tuning needs at least one scan"));
    }
    let mut net = PiaNet::new(model.clone(), cfg.seed)?;
    if let Init::Pretrained(ck) = init {
        let n = transfer_features(&ck.tensors, &mut net)?;
        log::info!("loaded {n} pretrained feature tensors");
    }
    let anchors = generate_anchors(model)?;
    let side = model.input_cube_side;
    let boxes: Vec<Vec<BoxCube>> = scans.iter().map(|(v, a)| scan_boxes(v, a)).collect();
    let mut opt = Sgd::new(cfg.sgd(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STAGE2_STREAM);
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(ck) = resume {
        check_resume(ck, "stage2", cfg)?;
        restore_state(&mut net, &mut opt, ck)?;
        rng = ck.rng.restore();
        history = ck.loss_history.clone();
        start = ck.epoch;
    }
    let per_epoch = if cfg.cubes_per_epoch == 0 { scans.len() } else { cfg.cubes_per_epoch };
    let batches_per_epoch = per_epoch.div_ceil(cfg.stage2_batch);
    let mut step = start * batches_per_epoch;
    let mut steps = Vec::new();
    for epoch in start..cfg.end_epoch() {
        opt.config = cfg.sgd(epoch);
        let mut order: Vec<usize> = Vec::with_capacity(per_epoch);
        while order.len() < per_epoch {
            let mut round: Vec<usize> = (0..scans.len()).collect();
            round.shuffle(&mut rng);
            order.extend(round);
        }
        order.truncate(per_epoch);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.stage2_batch) {
            let samples: Vec<CubeSample> = idx
                .iter()
                .map(|&i| sample_training_cube(&scans[i].0, &boxes[i], side, cfg, &mut rng))
                .collect();
            let x = Tensor5::stack(&samples.iter().map(|s| s.cube.clone()).collect::<Vec<_>>())?;
            let gts: Vec<Vec<BoxCube>> = samples.into_iter().map(|s| s.gts).collect();
            net.zero_grad();
            let pred = net.forward(&x, Mode::Train).map_err(|e| with_step(step, e))?;
            let (b, grad) = batch_loss(&pred, &gts, &anchors, cfg, &mut rng).map_err(|e| with_step(step, e))?;
            net.backward(&grad).map_err(|e| with_step(step, e))?;
            opt.step(&mut net)?;
            steps.push(StepRecord {
                stage: 2,
                epoch,
                step,
                lr: opt.config.learning_rate,
                total: b.total,
                confidence: b.confidence,
                localization: b.localization,
                positives: b.positives,
                negatives: b.negatives,
                accuracy: None,
            });
            sum += b.total;
            step += 1;
        }
        history.push(sum / batches_per_epoch as f64);
        log::info!("stage 2 epoch {epoch}: mean loss {:.6}", history[history.len() - 1]);
    }
    let checkpoint = make_checkpoint("stage2", &net, &opt, model, cfg, cfg.end_epoch().max(start), &rng, history)?;
    Ok(TrainOutcome { checkpoint, steps })
}
