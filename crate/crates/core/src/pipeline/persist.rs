//! Typed metadata and save/load for encoder and model checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::AdamConfig;
use crate::checkpoint::Container;
use crate::config::{DiffusionConfig, RunConfig};
use crate::data::{Normalizer, SplitSpec, Task};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserShapes};
use crate::encoder::{DecoderParams, EncoderConfig, EncoderParams, PretrainConfig, Pretrainer};
use crate::error::{Result, UstdError};
use crate::pipeline::model::UstdModel;
use crate::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub task: Task,
    pub tau: usize,
    pub encoder: Option<EncoderConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub pretrain_step: u64,
    pub pretrain_losses: Vec<f64>,
    pub denoiser: Option<DenoiserConfig>,
    pub shapes: Option<DenoiserShapes>,
    pub diffusion: Option<DiffusionConfig>,
    /// Node partition the checkpoint was trained on.
    pub split: SplitSpec,
    pub normalizer: Option<Normalizer>,
    pub run_config: RunConfig,
    pub seed: u64,
}

fn meta_of(c: &Container) -> Result<CheckpointMeta> {
    serde_json::from_value(c.meta.clone()).map_err(|e| UstdError::Format(format!("checkpoint metadata: {e}")))
}

fn to_value(meta: &CheckpointMeta) -> Result<serde_json::Value> {
    serde_json::to_value(meta).map_err(|e| UstdError::Format(e.to_string()))
}

/// Fails with a config error when `meta` was written for another task.
pub fn check_task(meta: &CheckpointMeta, task: Task) -> Result<()> {
    if meta.task != task {
        return Err(UstdError::Config(format!(
            "checkpoint was trained for {} but {task} was requested",
            meta.task
        )));
    }
    Ok(())
}

/// Saves encoder, decoder and both optimizer states so pre-training can resume.
pub fn save_pretrainer(path: &Path, pre: &Pretrainer, task: Task, split: &SplitSpec, cfg: &RunConfig, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Encoder,
        task,
        tau: pre.encoder.config.tau()?,
        encoder: Some(pre.encoder.config.clone()),
        pretrain: Some(pre.config.clone()),
        pretrain_step: pre.step,
        pretrain_losses: pre.loss_history.clone(),
        denoiser: None,
        shapes: None,
        diffusion: None,
        split: split.clone(),
        normalizer: None,
        run_config: cfg.clone(),
        seed,
    };
    let mut c = Container::new(to_value(&meta)?);
    c.put_store("encoder", &pre.encoder.store);
    c.put_store("decoder", &pre.decoder.store);
    c.put_adam("opt/encoder", &pre.encoder_opt, &pre.encoder.store);
    c.put_adam("opt/decoder", &pre.decoder_opt, &pre.decoder.store);
    c.save(path)
}

fn rebuild_encoder(c: &Container, cfg: &EncoderConfig) -> Result<EncoderParams> {
    let mut enc = EncoderParams::new(cfg.clone(), &mut rng_from_seed(0))?;
    c.load_store("encoder", &mut enc.store)?;
    Ok(enc)
}

pub fn load_pretrainer(path: &Path) -> Result<(Pretrainer, CheckpointMeta)> {
    let c = Container::load(path)?;
    let meta = meta_of(&c)?;
    let (Some(enc_cfg), Some(pre_cfg), CheckpointKind::Encoder) = (&meta.encoder, &meta.pretrain, meta.kind) else {
        return Err(UstdError::Config(format!("{} is not an encoder checkpoint", path.display())));
    };
    let encoder = rebuild_encoder(&c, enc_cfg)?;
    let mut decoder = DecoderParams::new(enc_cfg, &mut rng_from_seed(0))?;
    c.load_store("decoder", &mut decoder.store)?;
    let adam = AdamConfig {
        lr: pre_cfg.lr,
        ..AdamConfig::default()
    };
    let pre = Pretrainer {
        encoder_opt: c.load_adam("opt/encoder", adam, &encoder.store)?,
        decoder_opt: c.load_adam("opt/decoder", adam, &decoder.store)?,
        encoder,
        decoder,
        config: pre_cfg.clone(),
        step: meta.pretrain_step,
        loss_history: meta.pretrain_losses.clone(),
    };
    Ok((pre, meta))
}

pub fn save_model(
    path: &Path,
    model: &UstdModel,
    split: &SplitSpec,
    normalizer: &Normalizer,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Model,
        task: model.task,
        tau: model.denoiser.shapes.cond_tokens,
        encoder: model.encoder.as_ref().map(|e| e.config.clone()),
        pretrain: None,
        pretrain_step: 0,
        pretrain_losses: Vec::new(),
        denoiser: Some(model.denoiser.config.clone()),
        shapes: Some(model.denoiser.shapes),
        diffusion: Some(DiffusionConfig {
            steps: model.schedule.steps(),
            beta_start: model.schedule.beta(1)?,
            beta_end: model.schedule.beta(model.schedule.steps())?,
            shape: model.schedule.shape,
        }),
        split: split.clone(),
        normalizer: Some(normalizer.clone()),
        run_config: cfg.clone(),
        seed,
    };
    let mut c = Container::new(to_value(&meta)?);
    if let Some(e) = &model.encoder {
        c.put_store("encoder", &e.store);
    }
    c.put_store("denoiser", &model.denoiser.store);
    c.save(path)
}

/// Loads a model checkpoint; `task` guards against mixing tasks.
pub fn load_model(path: &Path, task: Option<Task>) -> Result<(UstdModel, CheckpointMeta)> {
    let c = Container::load(path)?;
    let meta = meta_of(&c)?;
    let (Some(den_cfg), Some(shapes), Some(diff), CheckpointKind::Model) =
        (&meta.denoiser, meta.shapes, &meta.diffusion, meta.kind)
    else {
        return Err(UstdError::Config(format!("{} is not a model checkpoint", path.display())));
    };
    if let Some(t) = task {
        check_task(&meta, t)?;
    }
    let encoder = meta.encoder.as_ref().map(|cfg| rebuild_encoder(&c, cfg)).transpose()?;
    let mut denoiser = Denoiser::new(den_cfg.clone(), shapes, &mut rng_from_seed(0))?;
    c.load_store("denoiser", &mut denoiser.store)?;
    let model = UstdModel {
        task: meta.task,
        encoder,
        denoiser,
        schedule: diff.schedule()?,
    };
    Ok((model, meta))
}

/// Reads only the metadata block.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    meta_of(&Container::load(path)?)
}
