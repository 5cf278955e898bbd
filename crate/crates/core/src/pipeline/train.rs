//! Denoiser training with encoder finetuning and early stopping.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autograd::{clip_grad_norm, Adam, AdamConfig, Mat, ParamStore, Tape};
use crate::data::{Task, WindowPair};
use crate::error::{input, Result, UstdError};
use crate::pipeline::model::{Segment, TaskData, UstdModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Encoder learning rate as a fraction of `lr`.
    pub encoder_lr_ratio: f64,
    pub freeze_encoder: bool,
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub val_windows: usize,
    pub grad_clip: Option<f64>,
    /// Abort once the loss stays above this multiple of the first loss...
    pub divergence_factor: f64,
    /// ...for this many consecutive steps.
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            encoder_lr_ratio: 0.1,
            freeze_encoder: false,
            eval_every: 100,
            patience: 10,
            val_windows: 64,
            grad_clip: Some(1.0),
            divergence_factor: 10.0,
            divergence_window: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopped,
}

/// Record of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub task: Task,
    pub config: TrainConfig,
    pub seed: Option<u64>,
    pub step: usize,
    pub loss_history: Vec<f64>,
    /// `(step, validation loss)` per evaluation round.
    pub val_history: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: f64,
    /// Validation loss of predicting zero noise on the same draws.
    pub zero_predictor_val: f64,
    pub stop: StopReason,
    pub checkpoints: Vec<std::path::PathBuf>,
}

/// Fixed validation draws so that rounds are comparable.
pub struct ValidationSet {
    windows: Vec<WindowPair>,
    ks: Vec<usize>,
    eps: Mat,
}

impl ValidationSet {
    pub fn new<R: rand::Rng + ?Sized>(
        model: &UstdModel,
        data: &TaskData,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let all = data.windows(Segment::Val, 1)?;
        if all.is_empty() || count == 0 {
            return Err(input("validation segment holds no complete window"));
        }
        let count = count.min(all.len());
        let windows: Vec<WindowPair> = (0..count).map(|i| all[i * all.len() / count].clone()).collect();
        let (ks, eps) = model.draw_noise(windows.len(), data, rng);
        Ok(Self { windows, ks, eps })
    }

    /// Mean noise-prediction loss, evaluated in chunks of `chunk` windows.
    pub fn loss(&self, model: &UstdModel, data: &TaskData, chunk: usize) -> Result<f64> {
        let rows = data.target_nodes();
        let mut total = 0.0;
        for (c, group) in self.windows.chunks(chunk.max(1)).enumerate() {
            let first = c * chunk.max(1);
            let refs: Vec<&WindowPair> = group.iter().collect();
            let eps = self.eps.slice(ndarray::s![first * rows..(first + group.len()) * rows, ..]).to_owned();
            let t = Tape::new();
            let den = model.denoiser.store.bind(&t, false);
            let l = model.loss(&t, None, &den, &refs, data, &self.ks[first..first + group.len()], &eps)?;
            total += t.scalar(l) * group.len() as f64;
        }
        Ok(total / self.windows.len() as f64)
    }

    pub fn zero_predictor(&self) -> f64 {
        self.eps.mapv(|e| e * e).mean().unwrap_or(0.0)
    }
}

fn snapshot(model: &UstdModel) -> (ParamStore, Option<ParamStore>) {
    (model.denoiser.store.clone(), model.encoder.as_ref().map(|e| e.store.clone()))
}

/// Trains `model` in place; the best validation parameters are restored on
/// return.
pub fn train_denoiser<R: rand::Rng + ?Sized>(
    model: &mut UstdModel,
    data: &TaskData,
    cfg: &TrainConfig,
    stride: usize,
    rng: &mut R,
) -> Result<TrainRun> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 || !(cfg.lr > 0.0) {
        return Err(UstdError::Config("batch size, eval interval and lr must be positive".into()));
    }
    let train = data.windows(Segment::Train, stride)?;
    if train.is_empty() {
        return Err(input("training segment holds no complete window"));
    }
    let val = ValidationSet::new(model, data, cfg.val_windows, rng)?;
    let zero_predictor_val = val.zero_predictor();
    let mut den_opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.denoiser.store,
    );
    let train_encoder = !cfg.freeze_encoder && cfg.encoder_lr_ratio > 0.0;
    let mut enc_opt = match (&model.encoder, train_encoder) {
        (Some(e), true) => Some(Adam::new(
            AdamConfig {
                lr: cfg.lr * cfg.encoder_lr_ratio,
                ..AdamConfig::default()
            },
            &e.store,
        )),
        _ => None,
    };

    let mut run = TrainRun {
        task: data.task,
        config: cfg.clone(),
        seed: None,
        step: 0,
        loss_history: Vec::new(),
        val_history: Vec::new(),
        best_step: 0,
        best_val: val.loss(model, data, cfg.batch_size)?,
        zero_predictor_val,
        stop: StopReason::MaxSteps,
        checkpoints: Vec::new(),
    };
    run.val_history.push((0, run.best_val));
    let mut best = snapshot(model);
    let mut stale = 0;
    let mut initial: Option<f64> = None;
    let mut above = 0;

    while run.step < cfg.max_steps {
        let batch: Vec<&WindowPair> = (0..cfg.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let (ks, eps) = model.draw_noise(batch.len(), data, rng);
        let t = Tape::new();
        let den = model.denoiser.store.bind(&t, true);
        let enc = match (&model.encoder, &enc_opt) {
            (Some(e), Some(_)) => Some(e.store.bind(&t, true)),
            (Some(e), None) => Some(e.store.bind(&t, false)),
            (None, _) => None,
        };
        let l = model.loss(&t, enc.as_ref(), &den, &batch, data, &ks, &eps)?;
        let loss = t.scalar(l);
        if !loss.is_finite() {
            return Err(UstdError::Numeric(format!("training loss became {loss} at step {}", run.step)));
        }
        let init = *initial.get_or_insert(loss);
        above = if loss > cfg.divergence_factor * init { above + 1 } else { 0 };
        if cfg.divergence_window > 0 && above >= cfg.divergence_window {
            return Err(UstdError::Numeric(format!(
                "training diverged: loss above {}x the initial {init:.4} for {above} steps",
                cfg.divergence_factor
            )));
        }

        let mut grads = t.backward(l);
        let mut gd = den.collect(&mut grads, &model.denoiser.store);
        let mut ge = match (&enc, &model.encoder, &enc_opt) {
            (Some(p), Some(e), Some(_)) => p.collect(&mut grads, &e.store),
            _ => Vec::new(),
        };
        if let Some(c) = cfg.grad_clip {
            let split = gd.len();
            let mut all: Vec<Mat> = gd.drain(..).chain(ge.drain(..)).collect();
            clip_grad_norm(&mut all, c);
            ge = all.split_off(split);
            gd = all;
        }
        den_opt.update(&mut model.denoiser.store, &gd);
        if let (Some(opt), Some(e)) = (enc_opt.as_mut(), model.encoder.as_mut()) {
            opt.update(&mut e.store, &ge);
        }
        run.step += 1;
        run.loss_history.push(loss);

        if run.step % cfg.eval_every == 0 || run.step == cfg.max_steps {
            let v = val.loss(model, data, cfg.batch_size)?;
            run.val_history.push((run.step, v));
            debug!("step {} train {loss:.4} val {v:.4}", run.step);
            if v < run.best_val {
                run.best_val = v;
                run.best_step = run.step;
                best = snapshot(model);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    run.stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }
    model.denoiser.store = best.0;
    if let (Some(e), Some(s)) = (model.encoder.as_mut(), best.1) {
        e.store = s;
    }
    info!(
        "trained {} steps, best val {:.4} at step {} (zero predictor {:.4})",
        run.step, run.best_val, run.best_step, run.zero_predictor_val
    );
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::{synthesize_graph_signal, SynthConfig};
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::{NoiseSchedule, ScheduleShape};
    use crate::encoder::{EncoderConfig, EncoderParams};
    use crate::rng_from_seed;

    fn setup(with_encoder: bool) -> (TaskData, UstdModel) {
        let synth = SynthConfig {
            n_nodes: 5,
            t_total: 400,
            ..Default::default()
        };
        let out = synthesize_graph_signal(&synth, &mut rng_from_seed(0)).unwrap();
        let data = TaskData::new(
            Task::Forecast,
            out.graph,
            out.series,
            &DataConfig::default(),
            12,
            4,
            None,
            &mut rng_from_seed(1),
        )
        .unwrap();
        let enc_cfg = EncoderConfig {
            hidden: 8,
            latent: 8,
            ..Default::default()
        };
        let enc = with_encoder.then(|| EncoderParams::new(enc_cfg, &mut rng_from_seed(2)).unwrap());
        let den = DenoiserConfig {
            channels: 16,
            heads: 2,
            layers: 1,
            spatial_dim: 4,
            step_embedding_dim: 16,
            ..Default::default()
        };
        let sched = NoiseSchedule::new(10, 1e-3, 0.5, ScheduleShape::Quadratic).unwrap();
        let model = UstdModel::new(&data, enc, den, sched, &mut rng_from_seed(3)).unwrap();
        (data, model)
    }

    fn short() -> TrainConfig {
        TrainConfig {
            max_steps: 20,
            batch_size: 4,
            eval_every: 5,
            val_windows: 8,
            ..Default::default()
        }
    }

    #[test]
    fn encoder_lr_is_a_tenth() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr * cfg.encoder_lr_ratio - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn frozen_encoder_is_bit_identical() {
        let (data, mut model) = setup(true);
        let before = model.encoder.as_ref().unwrap().store.clone();
        let cfg = TrainConfig {
            freeze_encoder: true,
            ..short()
        };
        train_denoiser(&mut model, &data, &cfg, 1, &mut rng_from_seed(4)).unwrap();
        assert_eq!(model.encoder.as_ref().unwrap().store, before);
        assert_ne!(model.denoiser.store.values()[0], setup(true).1.denoiser.store.values()[0]);
    }

    #[test]
    fn finetuning_moves_the_encoder() {
        let (data, mut model) = setup(true);
        let before = model.encoder.as_ref().unwrap().store.clone();
        let run = train_denoiser(&mut model, &data, &short(), 1, &mut rng_from_seed(4)).unwrap();
        if run.best_step > 0 {
            assert_ne!(model.encoder.as_ref().unwrap().store, before);
        }
    }

    #[test]
    fn runs_are_reproducible_and_keep_the_best() {
        let (data, mut a) = setup(false);
        let (_, mut b) = setup(false);
        let ra = train_denoiser(&mut a, &data, &short(), 1, &mut rng_from_seed(9)).unwrap();
        let rb = train_denoiser(&mut b, &data, &short(), 1, &mut rng_from_seed(9)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.denoiser.store, b.denoiser.store);
        let min = ra.val_history.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        assert_eq!(ra.best_val, min);
    }

    #[test]
    fn divergence_aborts() {
        let (data, mut model) = setup(false);
        let cfg = TrainConfig {
            lr: 1e3,
            grad_clip: None,
            divergence_factor: 1e-9,
            divergence_window: 3,
            ..short()
        };
        let err = train_denoiser(&mut model, &data, &cfg, 1, &mut rng_from_seed(5)).unwrap_err();
        assert!(matches!(err, UstdError::Numeric(_)), "{err}");
    }
}
