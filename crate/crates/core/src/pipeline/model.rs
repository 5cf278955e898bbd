//! Prepared task data and the conditional diffusion model built on it.

use std::ops::Range;
use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;

use crate::autograd::{Bound, Mat, Tape, Var};
use crate::config::DataConfig;
use crate::data::{
    make_forecast_windows_in, make_kriging_partition, make_kriging_windows_in, Normalizer, SignalSeries, SplitSpec,
    Task, WindowPair,
};
use crate::denoiser::{spatial_features, DenoiseContext, Denoiser, DenoiserConfig, DenoiserKind, DenoiserShapes};
use crate::diffusion::{epsilon_loss, q_sample_grouped, sample_chain, standard_normal, NoiseSchedule};
use crate::encoder::{stack_rows, EncoderParams};
use crate::error::{input, Result, UstdError};
use crate::graph::{laplacian_embedding, normalize_adjacency, Graph};
use crate::pipeline::metrics::SampleSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Train,
    Val,
    Test,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Val => "val",
            Segment::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A dataset split, normalized and laid out for one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: Task,
    pub graph: Graph,
    pub raw: SignalSeries,
    /// `raw` after z-scoring with `normalizer`.
    pub series: SignalSeries,
    pub normalizer: Normalizer,
    pub split: SplitSpec,
    pub segments: [Range<usize>; 3],
    pub window: usize,
    pub horizon: usize,
    /// Graph the encoder sees: all nodes, or the observed ones for kriging.
    pub cond_graph: Graph,
    pub cond_adj: Arc<Mat>,
    pub cond_spatial: Mat,
    pub target_spatial: Mat,
}

impl TaskData {
    /// Splits `raw` in time, fits the normalizer on the training segment and,
    /// for kriging, draws (or reuses) the node partition.
    pub fn new<R: Rng + ?Sized>(
        task: Task,
        graph: Graph,
        raw: SignalSeries,
        cfg: &DataConfig,
        window: usize,
        spatial_dim: usize,
        partition: Option<SplitSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if graph.n_nodes() != raw.n_nodes() {
            return Err(UstdError::Format(format!(
                "signals have {} nodes but the graph has {}",
                raw.n_nodes(),
                graph.n_nodes()
            )));
        }
        let split = match (partition, task) {
            (Some(p), _) => p,
            (None, Task::Forecast) => SplitSpec::temporal(cfg.split, graph.n_nodes())?,
            (None, Task::Krige) => make_kriging_partition(
                graph.n_nodes(),
                (cfg.kriging_ratio[0], cfg.kriging_ratio[1]),
                cfg.split,
                rng,
            )?,
        };
        if split.observed.len() + split.unobserved.len() != graph.n_nodes() {
            return Err(UstdError::Config("node partition does not cover the graph".into()));
        }
        let segments = split.segments(raw.len());
        let normalizer = Normalizer::fit(&raw, segments[0].clone())?;
        let series = normalizer.apply_series(&raw);
        let n = graph.n_nodes();
        let full_spatial = if n > 1 {
            let emb = laplacian_embedding(&graph, spatial_dim.min(n - 1))?;
            let all: Vec<usize> = (0..n).collect();
            spatial_features(&emb, &all, spatial_dim)
        } else {
            Mat::zeros((1, spatial_dim))
        };
        let pick = |rows: &[usize]| Mat::from_shape_fn((rows.len(), spatial_dim), |(r, c)| full_spatial[[rows[r], c]]);
        let (cond_graph, cond_spatial, target_spatial) = match task {
            Task::Forecast => (graph.clone(), full_spatial.clone(), full_spatial.clone()),
            Task::Krige => (graph.induced(&split.observed)?, pick(&split.observed), pick(&split.unobserved)),
        };
        let cond_adj = Arc::new(normalize_adjacency(&cond_graph));
        Ok(Self {
            task,
            graph,
            raw,
            series,
            normalizer,
            split,
            segments,
            window,
            horizon: cfg.horizon,
            cond_graph,
            cond_adj,
            cond_spatial,
            target_spatial,
        })
    }

    pub fn cond_nodes(&self) -> usize {
        self.cond_graph.n_nodes()
    }

    pub fn target_nodes(&self) -> usize {
        match self.task {
            Task::Forecast => self.graph.n_nodes(),
            Task::Krige => self.split.unobserved.len(),
        }
    }

    pub fn target_steps(&self) -> usize {
        match self.task {
            Task::Forecast => self.horizon,
            Task::Krige => self.window,
        }
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    /// Normalized windows of one segment.
    pub fn windows(&self, segment: Segment, stride: usize) -> Result<Vec<WindowPair>> {
        let range = self.segments[segment.index()].clone();
        let fp = Some(self.normalizer.fingerprint());
        match self.task {
            Task::Forecast => make_forecast_windows_in(&self.series, range, self.window, self.horizon, stride, fp),
            Task::Krige => make_kriging_windows_in(&self.series, &self.split, range, self.window, stride, fp),
        }
    }

    /// Normalized condition windows of the training segment for pre-training.
    pub fn pretrain_windows(&self, stride: usize) -> Result<Vec<Array3<f64>>> {
        let range = self.segments[0].clone();
        if range.len() < self.window {
            return Err(input(format!("training segment of {} steps is shorter than T={}", range.len(), self.window)));
        }
        let nodes = match self.task {
            Task::Forecast => (0..self.graph.n_nodes()).collect::<Vec<_>>(),
            Task::Krige => self.split.observed.clone(),
        };
        let mut out = Vec::new();
        let mut start = range.start;
        while start + self.window <= range.end {
            let steps = start..start + self.window;
            if self.series.window_is_complete(Some(&nodes), steps.clone()) {
                out.push(self.series.select(&nodes, steps));
            }
            start += stride.max(1);
        }
        Ok(out)
    }

    /// Ground truth of a window in data units, read from the raw series.
    pub fn raw_target(&self, w: &WindowPair) -> Array3<f64> {
        let steps = w.target_start..w.target_start + w.target.dim().1;
        match self.task {
            Task::Forecast => self.raw.select(&(0..self.graph.n_nodes()).collect::<Vec<_>>(), steps),
            Task::Krige => self.raw.select(&self.split.unobserved, steps),
        }
    }

    /// Raw condition of a window in data units.
    pub fn raw_condition(&self, w: &WindowPair) -> Array3<f64> {
        let steps = w.start..w.start + w.condition.dim().1;
        match self.task {
            Task::Forecast => self.raw.select(&(0..self.graph.n_nodes()).collect::<Vec<_>>(), steps),
            Task::Krige => self.raw.select(&self.split.observed, steps),
        }
    }

    /// Fraction of the day at step `t`, when the cycle length is known.
    pub fn day_phase(&self, t: usize) -> Option<f64> {
        self.raw
            .meta
            .steps_per_day
            .filter(|&s| s > 0)
            .map(|s| (t % s) as f64 / s as f64)
    }

    fn day_phases(&self, windows: &[&WindowPair]) -> Option<Vec<f64>> {
        windows.iter().map(|w| self.day_phase(w.target_start)).collect()
    }
}

/// Flattens targets to one row per node: `(block, node) x (steps * d)`.
pub fn stack_targets(targets: &[&Array3<f64>]) -> Mat {
    let (n, t, d) = targets[0].dim();
    let mut data = Vec::with_capacity(targets.len() * n * t * d);
    for w in targets {
        data.extend(w.iter().copied());
    }
    Mat::from_shape_vec((targets.len() * n, t * d), data).expect("equal window shapes")
}

/// Encoder (optional) + denoiser + schedule for one task.
#[derive(Clone, Debug)]
pub struct UstdModel {
    pub task: Task,
    /// `None` conditions the denoiser on raw windows.
    pub encoder: Option<EncoderParams>,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

/// The gated family follows the task; the transformer ablation is kept.
pub fn resolve_kind(task: Task, kind: DenoiserKind) -> DenoiserKind {
    match (task, kind) {
        (_, DenoiserKind::FullAttention) => DenoiserKind::FullAttention,
        (Task::Forecast, _) => DenoiserKind::Tga,
        (Task::Krige, _) => DenoiserKind::Sga,
    }
}

impl UstdModel {
    pub fn new<R: Rng + ?Sized>(
        data: &TaskData,
        encoder: Option<EncoderParams>,
        mut denoiser_cfg: DenoiserConfig,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        denoiser_cfg.kind = resolve_kind(data.task, denoiser_cfg.kind);
        let shapes = Self::shapes_for(data, encoder.as_ref())?;
        let denoiser = Denoiser::new(denoiser_cfg, shapes, rng)?;
        Ok(Self {
            task: data.task,
            encoder,
            denoiser,
            schedule,
        })
    }

    pub fn shapes_for(data: &TaskData, encoder: Option<&EncoderParams>) -> Result<DenoiserShapes> {
        let (cond_tokens, cond_dim) = match encoder {
            Some(e) => {
                if e.config.window != data.window || e.config.input_dim != data.channels() {
                    return Err(UstdError::Config(format!(
                        "encoder was built for T={} d_x={}, data has T={} d_x={}",
                        e.config.window,
                        e.config.input_dim,
                        data.window,
                        data.channels()
                    )));
                }
                (e.config.tau()?, e.config.latent)
            }
            None => (data.window, data.channels()),
        };
        Ok(DenoiserShapes {
            target_steps: data.target_steps(),
            target_dim: data.channels(),
            cond_tokens,
            cond_dim,
        })
    }

    /// Condition rows for `windows`: latents from the encoder, or raw inputs.
    pub fn condition(&self, t: &Tape, enc: Option<&Bound>, windows: &[&WindowPair], data: &TaskData) -> Result<Var> {
        let conds: Vec<Array3<f64>> = windows.iter().map(|w| w.condition.clone()).collect();
        let x = t.constant(stack_rows(&conds));
        match &self.encoder {
            Some(e) => {
                let own;
                let p = match enc {
                    Some(p) => p,
                    None => {
                        own = e.store.bind(t, false);
                        &own
                    }
                };
                e.forward(t, p, x, windows.len(), data.cond_nodes(), &data.cond_adj)
            }
            None => Ok(x),
        }
    }

    /// Noise-prediction loss on `windows` with one diffusion step per window.
    pub fn loss(
        &self,
        t: &Tape,
        enc: Option<&Bound>,
        den: &Bound,
        windows: &[&WindowPair],
        data: &TaskData,
        ks: &[usize],
        eps: &Mat,
    ) -> Result<Var> {
        let targets: Vec<&Array3<f64>> = windows.iter().map(|w| &w.target).collect();
        let y0 = stack_targets(&targets);
        let y_k = q_sample_grouped(&y0, ks, eps, &self.schedule)?;
        let h = self.condition(t, enc, windows, data)?;
        let phases = data.day_phases(windows);
        let ctx = DenoiseContext {
            blocks: windows.len(),
            target_nodes: data.target_nodes(),
            cond_nodes: data.cond_nodes(),
            target_spatial: &data.target_spatial,
            cond_spatial: &data.cond_spatial,
            day_phase: phases.as_deref(),
        };
        let out = self.denoiser.forward(t, den, t.constant(y_k), h, ks, &ctx)?;
        epsilon_loss(t, out.eps, eps)
    }

    /// Draws a loss batch: per-window steps and standard-normal noise.
    pub fn draw_noise<R: Rng + ?Sized>(&self, windows: usize, data: &TaskData, rng: &mut R) -> (Vec<usize>, Mat) {
        let k_max = self.schedule.steps();
        let ks = (0..windows).map(|_| rng.random_range(1..=k_max)).collect();
        let eps = standard_normal(windows * data.target_nodes(), data.target_steps() * data.channels(), rng);
        (ks, eps)
    }

    /// Runs the reverse chain for every window and returns de-normalized
    /// sample sets. All samples of a chunk of windows share one state matrix.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        windows: &[WindowPair],
        data: &TaskData,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<SampleSet>> {
        if n_samples == 0 {
            return Err(input("at least one sample per window is needed"));
        }
        for w in windows {
            if w.normalized_by != Some(data.normalizer.fingerprint()) {
                return Err(UstdError::Contract("window was not normalized with the model's statistics".into()));
            }
        }
        let m = data.target_nodes();
        let width = data.target_steps() * data.channels();
        let budget = 8192usize;
        let chunk = (budget / (n_samples * m).max(1)).max(1);
        let mut out = Vec::with_capacity(windows.len());
        for group in windows.chunks(chunk) {
            let refs: Vec<&WindowPair> = group.iter().collect();
            let w = refs.len();
            let h = {
                let t = Tape::new();
                let h = self.condition(&t, None, &refs, data)?;
                let v = t.value(h).clone();
                v
            };
            let per_window = h.nrows() / w;
            let h_rep = Mat::from_shape_fn((n_samples * h.nrows(), h.ncols()), |(r, c)| {
                let block = r / per_window;
                h[[(block % w) * per_window + r % per_window, c]]
            });
            let phases: Option<Vec<f64>> =
                data.day_phases(&refs).map(|p| (0..n_samples).flat_map(|_| p.iter().copied()).collect());
            let blocks = n_samples * w;
            let den = &self.denoiser;
            let y = sample_chain(blocks * m, width, &self.schedule, rng, |y_k, k| {
                let t = Tape::new();
                let p = den.store.bind(&t, false);
                let ctx = DenoiseContext {
                    blocks,
                    target_nodes: m,
                    cond_nodes: data.cond_nodes(),
                    target_spatial: &data.target_spatial,
                    cond_spatial: &data.cond_spatial,
                    day_phase: phases.as_deref(),
                };
                let out = den.forward(&t, &p, t.constant(y_k.clone()), t.constant(h_rep.clone()), &vec![k; blocks], &ctx)?;
                let v = t.value(out.eps).clone();
                Ok(v)
            })?;
            let shape = (m, data.target_steps(), data.channels());
            for wi in 0..w {
                let samples = (0..n_samples)
                    .map(|s| {
                        let b = s * w + wi;
                        let rows = y.slice(ndarray::s![b * m..(b + 1) * m, ..]).to_owned();
                        let arr = Array3::from_shape_vec(shape, rows.into_raw_vec_and_offset().0).expect("target rows");
                        data.normalizer.invert(&arr)
                    })
                    .collect();
                out.push(SampleSet::new(samples)?);
            }
        }
        Ok(out)
    }
}
