use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_resume, make_checkpoint, restore_state, with_step, Checkpoint, StepRecord, TrainConfig, TrainOutcome};
use crate::data::PatchSet;
use crate::engine::{import_params, Mode, Parameterized, Sgd, Shape5};
use crate::error::{Error, Result};
use crate::model::{softmax_cross_entropy, PiaNetConfig, Stage1Classifier};

const STAGE1_STREAM: u64 = 0x5354_4147_4531;

/// Classifier rebuilt from a stage-1 checkpoint.
pub fn stage1_classifier_from(model: &PiaNetConfig, ckpt: &Checkpoint) -> Result<Stage1Classifier> {
    let mut c = Stage1Classifier::new(model, 0)?;
    import_params(&mut c, &ckpt.tensors, &|_| true)?;
    Ok(c)
}

/// Mini-batch SGD on softmax cross-entropy over labeled patches.
pub fn pretrain_stage1(
    patches: &PatchSet,
    model: &PiaNetConfig,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::data("stage-1 pretraining needs a non-empty patch set"));
    }
    if patches.count(0) == 0 || patches.count(1) == 0 {
        return Err(Error::config(format!(
            "stage-1 patch set has {} positives and {} negatives; both classes are required",
            patches.count(1),
            patches.count(0)
        )));
    }
    let mut net = Stage1Classifier::new(model, cfg.seed)?;
    let p = net.patch_side();
    if let Some(bad) = patches.patches.iter().find(|t| t.shape() != Shape5([1, 1, p, p, p])) {
        return Err(Error::config(format!(
            "patch shape {} does not match the classifier's {p}^3 input",
            bad.shape()
        )));
    }
    let mut opt = Sgd::new(cfg.sgd(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STAGE1_STREAM);
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(ck) = resume {
        check_resume(ck, "stage1", cfg)?;
        restore_state(&mut net, &mut opt, ck)?;
        rng = ck.rng.restore();
        history = ck.loss_history.clone();
        start = ck.epoch;
    }
    let mut steps = Vec::new();
    let mut step = history.len() * patches.len().div_ceil(cfg.stage1_batch);
    for epoch in start..cfg.end_epoch() {
        opt.config = cfg.sgd(epoch);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.stage1_batch) {
            let (x, labels) = patches.batch(idx)?;
            net.zero_grad();
            let logits = net.logits(&x, Mode::Train).map_err(|e| with_step(step, e))?;
            let (loss, g) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(with_step(step, Error::numeric("stage-1 loss", format!("{loss}"))));
            }
            net.backward(&g).map_err(|e| with_step(step, e))?;
            opt.step(&mut net)?;
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(n, &l)| {
                    let pred = usize::from(logits.get([n, 1, 0, 0, 0]) > logits.get([n, 0, 0, 0, 0]));
                    pred == l
                })
                .count();
            let positives = labels.iter().filter(|&&l| l == 1).count();
            steps.push(StepRecord {
                stage: 1,
                epoch,
                step,
                lr: opt.config.learning_rate,
                total: loss,
                confidence: loss,
                localization: 0.0,
                positives,
                negatives: labels.len() - positives,
                accuracy: Some(correct as f64 / labels.len() as f64),
            });
            sum += loss;
            batches += 1;
            step += 1;
        }
        history.push(sum / batches as f64);
        log::info!("stage 1 epoch {epoch}: mean loss {:.6}", history[history.len() - 1]);
    }
    let checkpoint = make_checkpoint("stage1", &net, &opt, model, cfg, cfg.end_epoch().max(start), &rng, history)?;
    Ok(TrainOutcome { checkpoint, steps })
}
