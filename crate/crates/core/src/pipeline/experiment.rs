//! End-to-end runs: data preparation, pre-training, training, evaluation and
//! the reference baselines.

use std::str::FromStr;

use log::info;
use rand::Rng;

use crate::config::{EvalConfig, RunConfig};
use crate::data::{load_dataset, synthesize_graph_signal, AdjacencySource, LoadConfig, SplitSpec, Task, WindowPair};
use crate::encoder::{EncoderParams, Pretrainer};
use crate::error::{input, Result, UstdError};
use crate::pipeline::baselines::{idw, persistence, Climatology};
use crate::pipeline::metrics::{MetricAccumulator, MetricReport, SampleSet};
use crate::pipeline::model::{Segment, TaskData, UstdModel};
use crate::pipeline::train::{train_denoiser, TrainRun};
use crate::DenoiserKind;

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Denoiser conditioned on raw windows.
    NoEncoder,
    /// Encoder pre-trained as a plain autoencoder.
    NoMask,
    NoSelfAttention,
    /// Transformer denoiser over all tokens.
    FullAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoEncoder,
        Ablation::NoMask,
        Ablation::NoSelfAttention,
        Ablation::FullAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "ustd",
            Ablation::NoEncoder => "w/o-EN",
            Ablation::NoMask => "w/o-MK",
            Ablation::NoSelfAttention => "w/o-SA",
            Ablation::FullAttention => "full-attention",
        }
    }
}

impl FromStr for Ablation {
    type Err = UstdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "ustd" | "none" => Ok(Ablation::Full),
            "no-encoder" | "w/o-en" | "wo-en" => Ok(Ablation::NoEncoder),
            "no-mask" | "w/o-mk" | "wo-mk" => Ok(Ablation::NoMask),
            "no-self-attention" | "w/o-sa" | "wo-sa" => Ok(Ablation::NoSelfAttention),
            "full-attention" | "tf" => Ok(Ablation::FullAttention),
            other => Err(UstdError::Config(format!("unknown ablation '{other}'"))),
        }
    }
}

/// Loads the configured dataset, or synthesizes one when no signals file is
/// given.
pub fn load_task_data<R: Rng + ?Sized>(
    cfg: &RunConfig,
    task: Task,
    partition: Option<SplitSpec>,
    rng: &mut R,
) -> Result<TaskData> {
    let (graph, series) = match &cfg.data.signals {
        Some(signals) => {
            let adjacency = match (&cfg.data.edges, &cfg.data.coords) {
                (Some(path), _) => AdjacencySource::EdgeList { path: path.clone() },
                (None, Some(path)) => AdjacencySource::Coords {
                    path: path.clone(),
                    sigma: cfg.data.kernel_sigma,
                    epsilon: cfg.data.kernel_epsilon,
                },
                (None, None) => return Err(UstdError::Config("a signals file needs edges or coords".into())),
            };
            let coords = cfg.data.edges.as_ref().and(cfg.data.coords.clone());
            load_dataset(signals, &LoadConfig { adjacency, coords })?
        }
        None => {
            let out = synthesize_graph_signal(&cfg.synth, rng)?;
            (out.graph, out.series)
        }
    };
    TaskData::new(
        task,
        graph,
        series,
        &cfg.data,
        cfg.encoder.window,
        cfg.denoiser.spatial_dim,
        partition,
        rng,
    )
}

/// Masked-autoencoder pre-training on the condition graph of `data`.
pub fn pretrain_encoder<R: Rng + ?Sized>(
    data: &TaskData,
    cfg: &RunConfig,
    pretrainer: Option<Pretrainer>,
    rng: &mut R,
) -> Result<Pretrainer> {
    let windows = data.pretrain_windows(cfg.data.train_stride)?;
    if windows.is_empty() {
        return Err(input("no complete pre-training window"));
    }
    let mut pre = match pretrainer {
        Some(p) => p,
        None => Pretrainer::new(cfg.encoder.clone(), cfg.pretrain.clone(), rng)?,
    };
    while (pre.step as usize) < cfg.pretrain.steps {
        let batch: Vec<_> = (0..cfg.pretrain.batch_size.max(1))
            .map(|_| &windows[rng.random_range(0..windows.len())])
            .collect();
        let loss = pre.step(&batch, &data.cond_graph, rng)?;
        if cfg.pretrain.log_every > 0 && pre.step % cfg.pretrain.log_every as u64 == 0 {
            info!("pretrain step {} masked MAE {loss:.4}", pre.step);
        }
    }
    Ok(pre)
}

/// Builds the model for an ablation, given an encoder when one is used.
pub fn build_model<R: Rng + ?Sized>(
    data: &TaskData,
    encoder: Option<EncoderParams>,
    cfg: &RunConfig,
    ablation: Ablation,
    rng: &mut R,
) -> Result<UstdModel> {
    let mut den = cfg.denoiser.clone();
    match ablation {
        Ablation::NoSelfAttention => den.self_attention = false,
        Ablation::FullAttention => den.kind = DenoiserKind::FullAttention,
        _ => {}
    }
    let encoder = if ablation == Ablation::NoEncoder { None } else { encoder };
    UstdModel::new(data, encoder, den, cfg.diffusion.schedule()?, rng)
}

fn eval_windows(data: &TaskData, segment: Segment, eval: &EvalConfig, stride: usize) -> Result<Vec<WindowPair>> {
    let mut w = data.windows(segment, stride)?;
    if let Some(cap) = eval.max_windows {
        if cap < w.len() {
            w = (0..cap).map(|i| w[i * w.len() / cap].clone()).collect();
        }
    }
    if w.is_empty() {
        return Err(input(format!("{} segment holds no complete window", segment.name())));
    }
    Ok(w)
}

/// Evaluation of one model on one segment.
pub struct Evaluation {
    pub report: MetricReport,
    pub windows: Vec<WindowPair>,
    pub samples: Vec<SampleSet>,
}

pub fn evaluate<R: Rng + ?Sized>(
    model: &UstdModel,
    data: &TaskData,
    name: &str,
    segment: Segment,
    eval: &EvalConfig,
    stride: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    let windows = eval_windows(data, segment, eval, stride)?;
    let samples = model.sample(&windows, data, eval.n_samples, rng)?;
    let mut acc = MetricAccumulator::new(eval.crps);
    for (w, s) in windows.iter().zip(&samples) {
        acc.push(s, &data.raw_target(w))?;
    }
    let report = acc.finish(name, &data.task.to_string(), segment.name())?;
    Ok(Evaluation {
        report,
        windows,
        samples,
    })
}

/// Persistence and climatology for forecasting; inverse-distance weighting
/// and climatology for kriging.
pub fn baseline_reports<R: Rng + ?Sized>(
    data: &TaskData,
    segment: Segment,
    eval: &EvalConfig,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<MetricReport>> {
    let windows = eval_windows(data, segment, eval, stride)?;
    let task = data.task.to_string();
    let clim = Climatology::fit(&data.raw, data.segments[0].clone())?;
    let target_nodes: Vec<usize> = match data.task {
        Task::Forecast => (0..data.graph.n_nodes()).collect(),
        Task::Krige => data.split.unobserved.clone(),
    };
    let mut clim_acc = MetricAccumulator::new(eval.crps);
    let mut point_acc = MetricAccumulator::new(eval.crps);
    let coords = data.graph.coords();
    let pick = |xy: &crate::autograd::Mat, rows: &[usize]| {
        crate::autograd::Mat::from_shape_fn((rows.len(), 2), |(r, c)| xy[[rows[r], c]])
    };
    for w in &windows {
        let truth = data.raw_target(w);
        let members = clim.sample(&target_nodes, truth.dim().1, eval.n_samples.max(2), rng);
        clim_acc.push(&SampleSet::new(members)?, &truth)?;
        match data.task {
            Task::Forecast => point_acc.push_deterministic(&persistence(&data.raw_condition(w), truth.dim().1), &truth)?,
            Task::Krige => {
                if let Some(xy) = coords {
                    let est = idw(&pick(xy, &data.split.observed), &data.raw_condition(w), &pick(xy, &data.split.unobserved))?;
                    point_acc.push_deterministic(&est, &truth)?;
                }
            }
        }
    }
    let mut out = vec![clim_acc.finish("climatology", &task, segment.name())?];
    match data.task {
        Task::Forecast => out.push(point_acc.finish("persistence", &task, segment.name())?),
        Task::Krige if coords.is_some() => out.push(point_acc.finish("idw", &task, segment.name())?),
        Task::Krige => {}
    }
    Ok(out)
}

/// Wall-clock of full sampling passes, gated denoiser against the
/// full-attention ablation.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TimingReport {
    pub nodes: usize,
    pub tau: usize,
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub n_samples: usize,
    pub gated_params: usize,
    pub full_params: usize,
    pub gated_seconds: Vec<f64>,
    pub full_seconds: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl TimingReport {
    pub fn gated(&self) -> (f64, f64) {
        mean_std(&self.gated_seconds)
    }

    pub fn full(&self) -> (f64, f64) {
        mean_std(&self.full_seconds)
    }

    /// Mean full-attention time over mean gated time.
    pub fn speedup(&self) -> f64 {
        self.full().0 / self.gated().0
    }

    pub fn param_ratio(&self) -> f64 {
        self.full_params as f64 / self.gated_params as f64
    }

    pub fn to_text(&self) -> String {
        let (gm, gs) = self.gated();
        let (fm, fs) = self.full();
        format!(
            "nodes={}\ntau={}\nhorizon={}\ndiffusion_steps={}\nn_samples={}\ntrials={}\n\
             gated_params={}\nfull_params={}\ngated_seconds={gm:.4}±{gs:.4}\nfull_seconds={fm:.4}±{fs:.4}\nspeedup={:.3}\n",
            self.nodes,
            self.tau,
            self.horizon,
            self.diffusion_steps,
            self.n_samples,
            self.gated_seconds.len(),
            self.gated_params,
            self.full_params,
            self.speedup()
        )
    }
}

/// Times one sampling pass over a single forecasting window per trial.
/// Weights are freshly initialized: the pass does the same arithmetic
/// whatever their values.
pub fn timing_comparison(cfg: &RunConfig, seed: u64) -> Result<TimingReport> {
    let mut rng = crate::rng_from_seed(seed);
    let mut run = cfg.clone();
    run.synth.n_nodes = cfg.bench.nodes;
    run.synth.t_total = run.synth.t_total.min(20 * (cfg.encoder.window + cfg.data.horizon));
    run.data.signals = None;
    let data = load_task_data(&run, Task::Forecast, None, &mut rng)?;
    let window = data.windows(Segment::Test, cfg.data.eval_stride)?.into_iter().take(1).collect::<Vec<_>>();
    if window.is_empty() {
        return Err(input("benchmark series holds no test window"));
    }
    let encoder = EncoderParams::new(cfg.encoder.clone(), &mut rng)?;
    let gated = build_model(&data, Some(encoder.clone()), &run, Ablation::Full, &mut rng)?;
    let full = build_model(&data, Some(encoder), &run, Ablation::FullAttention, &mut rng)?;
    let mut report = TimingReport {
        nodes: data.graph.n_nodes(),
        tau: cfg.encoder.tau()?,
        horizon: data.horizon,
        diffusion_steps: gated.schedule.steps(),
        n_samples: cfg.bench.n_samples,
        gated_params: gated.denoiser.n_params(),
        full_params: full.denoiser.n_params(),
        gated_seconds: Vec::new(),
        full_seconds: Vec::new(),
    };
    for _ in 0..cfg.bench.trials.max(1) {
        for (model, out) in [(&gated, &mut report.gated_seconds), (&full, &mut report.full_seconds)] {
            let t0 = std::time::Instant::now();
            model.sample(&window, &data, cfg.bench.n_samples, &mut rng)?;
            out.push(t0.elapsed().as_secs_f64());
        }
    }
    Ok(report)
}

/// Everything produced by [`run_experiment`].
pub struct ExperimentOutcome {
    pub data: TaskData,
    pub model: UstdModel,
    pub pretrain_losses: Vec<f64>,
    pub train: TrainRun,
    pub evaluation: Evaluation,
    pub baselines: Vec<MetricReport>,
}

const EVAL_STREAM: u64 = 0x5eed_e7a1;

/// Pre-trains (unless the ablation drops the encoder), trains and evaluates
/// on the test segment, all from one seeded stream.
pub fn run_experiment(cfg: &RunConfig, ablation: Ablation, seed: u64) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut rng = crate::rng_from_seed(seed);
    let data = load_task_data(cfg, cfg.task, None, &mut rng)?;
    let (encoder, pretrain_losses) = if ablation == Ablation::NoEncoder {
        (None, Vec::new())
    } else {
        let mut run_cfg = cfg.clone();
        if ablation == Ablation::NoMask {
            run_cfg.pretrain.mask_ratio = None;
        }
        let pre = pretrain_encoder(&data, &run_cfg, None, &mut rng)?;
        (Some(pre.encoder), pre.loss_history)
    };
    let mut model = build_model(&data, encoder, cfg, ablation, &mut rng)?;
    let mut train = train_denoiser(&mut model, &data, &cfg.train, cfg.data.train_stride, &mut rng)?;
    train.seed = Some(seed);
    // evaluation draws from its own stream so variants share sampling noise
    let mut eval_rng = crate::rng_from_seed(seed ^ EVAL_STREAM);
    let evaluation = evaluate(&model, &data, ablation.name(), Segment::Test, &cfg.eval, cfg.data.eval_stride, &mut eval_rng)?;
    let baselines = if cfg.eval.compare_baselines {
        baseline_reports(&data, Segment::Test, &cfg.eval, cfg.data.eval_stride, &mut eval_rng)?
    } else {
        Vec::new()
    };
    Ok(ExperimentOutcome {
        data,
        model,
        pretrain_losses,
        train,
        evaluation,
        baselines,
    })
}
