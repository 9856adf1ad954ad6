//! Two-stage training: patch-classifier pretraining, then multi-task
//! fine-tuning of the detector with hard negative mining.

mod checkpoint;
mod config;
mod mining;
mod stage1;
mod stage2;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use mining::mine_hard_negatives;
pub use stage1::{pretrain_stage1, stage1_classifier_from};
pub use stage2::{detector_from, finetune_stage2, sample_training_cube, Init};

use crate::engine::{export_params, import_params, NamedTensor, Parameterized, Sgd};
use crate::error::{Error, Result};

/// One optimizer step, as written to the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub confidence: f64,
    pub localization: f64,
    pub positives: usize,
    pub negatives: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Mean step loss of a zero-based epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn write_jsonl(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for s in steps {
        text.push_str(&to_json(s)?);
        text.push('\n');
    }
    crate::data::write_text(path, &text)
}

fn velocity_tensors(model: &dyn Parameterized, opt: &Sgd) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        if let Some(v) = opt.velocity.get(name) {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: p.shape.clone(),
                data: v.clone(),
            });
        }
    });
    out
}

/// Loads parameters and optimizer velocity; checks everything first.
fn restore_state(model: &mut dyn Parameterized, opt: &mut Sgd, ckpt: &Checkpoint) -> Result<()> {
    let mut shapes = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        shapes.insert(name.to_string(), (p.shape.clone(), p.trainable));
    });
    let mut problems = Vec::new();
    for v in &ckpt.velocity {
        match shapes.get(&v.name) {
            Some((s, true)) if *s == v.shape => {}
            Some((s, _)) => problems.push(format!("velocity {} (shape {:?}, expected {:?})", v.name, v.shape, s)),
            None => problems.push(format!("velocity {} (unknown parameter)", v.name)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::data(format!("cannot resume: {}", problems.join(", "))));
    }
    import_params(model, &ckpt.tensors, &|_| true)?;
    opt.velocity = ckpt.velocity.iter().map(|v| (v.name.clone(), v.data.clone())).collect();
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::data(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn make_checkpoint(
    stage: &str,
    model: &dyn Parameterized,
    opt: &Sgd,
    model_config: &crate::model::PiaNetConfig,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &rand_chacha::ChaCha8Rng,
    history: Vec<f64>,
) -> Result<Checkpoint> {
    let mut manifest = BTreeMap::new();
    manifest.insert("stage".to_string(), stage.to_string());
    manifest.insert("model_config".to_string(), to_json(model_config)?);
    manifest.insert("train_config".to_string(), to_json(cfg)?);
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        manifest,
        tensors: export_params(model, ""),
        velocity: velocity_tensors(model, opt),
        epoch,
        rng: RngState::capture(rng),
        loss_history: history,
    })
}

fn check_resume(ckpt: &Checkpoint, stage: &str, cfg: &TrainConfig) -> Result<()> {
    if ckpt.stage() != Some(stage) {
        return Err(Error::config(format!(
            "checkpoint is from stage {:?}, cannot resume {stage}",
            ckpt.stage()
        )));
    }
    if ckpt.epoch > cfg.epochs {
        return Err(Error::config(format!(
            "checkpoint has {} epochs, configuration asks for {}",
            ckpt.epoch, cfg.epochs
        )));
    }
    Ok(())
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::Numeric {
            location: format!("step {step}: {location}"),
            detail,
        },
        other => other,
    }
}
