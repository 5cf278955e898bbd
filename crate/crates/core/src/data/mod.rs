//! Signal series, window construction for both tasks, temporal splits and
//! z-score normalization.

pub mod io;
pub mod synth;

use std::ops::Range;

use ndarray::{s, Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result, UstdError};

pub use io::{load_dataset, read_signals, write_signals, AdjacencySource, LoadConfig};
pub use synth::{synthesize_graph_signal, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecast,
    Krige,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Forecast => "forecast",
            Task::Krige => "krige",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = UstdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(Task::Forecast),
            "krige" | "kriging" => Ok(Task::Krige),
            other => Err(UstdError::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub attribute: String,
    pub units: String,
    /// Minutes per step, when known.
    pub granularity_minutes: Option<f64>,
    /// Steps per daily cycle; drives the time-of-day embedding.
    pub steps_per_day: Option<usize>,
    /// Cells that were missing in the source and forward-filled.
    pub filled_cells: usize,
    /// Free-form generator or provenance record.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

/// `N x T_total x d` readings.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSeries {
    pub values: Array3<f64>,
    /// Cells with no reading even after forward fill (leading gaps). Windows
    /// touching them are dropped. `None` means fully observed.
    pub missing: Option<ndarray::Array2<bool>>,
    pub meta: SeriesMeta,
}

impl SignalSeries {
    pub fn new(values: Array3<f64>, meta: SeriesMeta) -> Result<Self> {
        let mut series = Self {
            values,
            missing: None,
            meta,
        };
        series.forward_fill();
        Ok(series)
    }

    pub fn n_nodes(&self) -> usize {
        self.values.dim().0
    }

    pub fn len(&self) -> usize {
        self.values.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Replaces NaN readings with the last finite value of the same node and
    /// channel. Leading gaps become zero and are recorded as missing.
    fn forward_fill(&mut self) {
        let (n, t, d) = self.values.dim();
        let mut filled = 0;
        let mut missing = ndarray::Array2::from_elem((n, t), false);
        let mut any_missing = false;
        for i in 0..n {
            for c in 0..d {
                let mut last: Option<f64> = None;
                for step in 0..t {
                    let v = self.values[[i, step, c]];
                    if v.is_finite() {
                        last = Some(v);
                        continue;
                    }
                    filled += 1;
                    match last {
                        Some(prev) => self.values[[i, step, c]] = prev,
                        None => {
                            self.values[[i, step, c]] = 0.0;
                            missing[[i, step]] = true;
                            any_missing = true;
                        }
                    }
                }
            }
        }
        self.meta.filled_cells = filled;
        self.missing = any_missing.then_some(missing);
    }

    pub fn window_is_complete(&self, nodes: Option<&[usize]>, steps: Range<usize>) -> bool {
        let Some(missing) = &self.missing else { return true };
        let all: Vec<usize>;
        let nodes = match nodes {
            Some(n) => n,
            None => {
                all = (0..self.n_nodes()).collect();
                &all
            }
        };
        nodes
            .iter()
            .all(|&i| steps.clone().all(|t| !missing[[i, t]]))
    }

    pub fn select(&self, nodes: &[usize], steps: Range<usize>) -> Array3<f64> {
        let d = self.channels();
        let mut out = Array3::zeros((nodes.len(), steps.len(), d));
        for (dst, &src) in nodes.iter().enumerate() {
            out.slice_mut(s![dst, .., ..])
                .assign(&self.values.slice(s![src, steps.clone(), ..]));
        }
        out
    }
}

/// A paired (condition, target) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub task: Task,
    /// `N_c x T x d_x`.
    pub condition: Array3<f64>,
    /// `N_t x T_t x d_y`.
    pub target: Array3<f64>,
    /// First step of the condition window.
    pub start: usize,
    /// First step of the target window.
    pub target_start: usize,
    /// Fingerprint of the normalizer applied to the source series, if any.
    pub normalized_by: Option<u64>,
}

/// Forecasting windows over the whole series.
pub fn make_forecast_windows(
    series: &SignalSeries,
    t: usize,
    t_prime: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    make_forecast_windows_in(series, 0..series.len(), t, t_prime, stride, None)
}

/// Forecasting windows whose condition and target lie entirely in `range`.
pub fn make_forecast_windows_in(
    series: &SignalSeries,
    range: Range<usize>,
    t: usize,
    t_prime: usize,
    stride: usize,
    normalized_by: Option<u64>,
) -> Result<Vec<WindowPair>> {
    if t == 0 || t_prime == 0 || stride == 0 {
        return Err(input("window lengths and stride must be positive"));
    }
    if range.end > series.len() || range.len() < t + t_prime {
        return Err(input(format!(
            "segment of {} steps is too short for T={t} + T'={t_prime}",
            range.len()
        )));
    }
    let nodes: Vec<usize> = (0..series.n_nodes()).collect();
    let count = (range.len() - t - t_prime) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = range.start + w * stride;
        if !series.window_is_complete(None, start..start + t + t_prime) {
            continue;
        }
        out.push(WindowPair {
            task: Task::Forecast,
            condition: series.select(&nodes, start..start + t),
            target: series.select(&nodes, start + t..start + t + t_prime),
            start,
            target_start: start + t,
            normalized_by,
        });
    }
    Ok(out)
}

/// Temporal split ratios plus, for kriging, the node partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub observed: Vec<usize>,
    pub unobserved: Vec<usize>,
}

impl SplitSpec {
    pub fn temporal(ratios: [f64; 3], n_nodes: usize) -> Result<Self> {
        validate_ratios(ratios)?;
        Ok(Self {
            ratios,
            observed: (0..n_nodes).collect(),
            unobserved: Vec::new(),
        })
    }

    /// Contiguous `[train, val, test]` step ranges.
    pub fn segments(&self, t_total: usize) -> [Range<usize>; 3] {
        let a = (self.ratios[0] * t_total as f64).floor() as usize;
        let b = ((self.ratios[0] + self.ratios[1]) * t_total as f64).floor() as usize;
        let b = b.clamp(a, t_total);
        [0..a, a..b, b..t_total]
    }
}

fn validate_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(input(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Fixed (transductive) observed/unobserved node partition at `observed :
/// unobserved` ratio.
pub fn make_kriging_partition<R: Rng + ?Sized>(
    n_nodes: usize,
    ratio: (usize, usize),
    split_ratios: [f64; 3],
    rng: &mut R,
) -> Result<SplitSpec> {
    validate_ratios(split_ratios)?;
    if n_nodes < 3 {
        return Err(input(format!("kriging needs at least 3 nodes, got {n_nodes}")));
    }
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(input("partition ratio terms must be positive"));
    }
    let m = ((n_nodes * b) as f64 / (a + b) as f64).round() as usize;
    let m = m.min(n_nodes - 1);
    if m == 0 {
        return Err(input(format!("partition of {n_nodes} nodes leaves no unobserved node")));
    }
    let mut unobserved = index::sample(rng, n_nodes, m).into_vec();
    unobserved.sort_unstable();
    let observed = (0..n_nodes).filter(|i| !unobserved.contains(i)).collect();
    Ok(SplitSpec {
        ratios: split_ratios,
        observed,
        unobserved,
    })
}

/// Kriging windows of length `t` over `range`, using the fixed partition.
pub fn make_kriging_windows_in(
    series: &SignalSeries,
    split: &SplitSpec,
    range: Range<usize>,
    t: usize,
    stride: usize,
    normalized_by: Option<u64>,
) -> Result<Vec<WindowPair>> {
    if t == 0 || stride == 0 {
        return Err(input("window length and stride must be positive"));
    }
    if split.unobserved.is_empty() {
        return Err(input("kriging needs at least one unobserved node"));
    }
    if range.end > series.len() || range.len() < t {
        return Err(input(format!("segment of {} steps is too short for T={t}", range.len())));
    }
    let count = (range.len() - t) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = range.start + w * stride;
        let steps = start..start + t;
        if !series.window_is_complete(Some(&split.observed), steps.clone())
            || !series.window_is_complete(Some(&split.unobserved), steps.clone())
        {
            continue;
        }
        out.push(WindowPair {
            task: Task::Krige,
            condition: series.select(&split.observed, steps.clone()),
            target: series.select(&split.unobserved, steps),
            start,
            target_start: start,
            normalized_by,
        });
    }
    Ok(out)
}

/// Per-channel z-score statistics fitted on a training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Step range the statistics were computed on.
    pub fitted_on: (usize, usize),
}

impl Normalizer {
    pub fn fit(series: &SignalSeries, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > series.len() {
            return Err(input(format!("training segment {train:?} is empty or out of range")));
        }
        let d = series.channels();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let view = series.values.slice(s![.., train.clone(), c]);
            let count = view.len() as f64;
            let m = view.sum() / count;
            let var = view.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            if !(var > 1e-12 * (1.0 + m * m)) {
                return Err(input(format!("channel {c} has zero variance on the training segment")));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Self {
            mean,
            std,
            fitted_on: (train.start, train.end),
        })
    }

    /// Stable identifier of these statistics.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for v in self.mean.iter().chain(&self.std) {
            eat(v.to_bits());
        }
        eat(self.fitted_on.0 as u64);
        eat(self.fitted_on.1 as u64);
        h
    }

    /// Normalizes an array whose last axis is the channel axis.
    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (c, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            lane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn invert(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (c, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            lane.mapv_inplace(|v| v * s + m);
        }
        out
    }

    pub fn apply_series(&self, series: &SignalSeries) -> SignalSeries {
        SignalSeries {
            values: self.apply(&series.values),
            missing: series.missing.clone(),
            meta: series.meta.clone(),
        }
    }
}
