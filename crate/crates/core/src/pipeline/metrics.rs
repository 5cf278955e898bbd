//! Point and probabilistic error metrics.

use std::fmt::Write as _;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result, UstdError};

/// Samples for one window plus their per-element median.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Array3<f64>>,
    pub point_estimate: Array3<f64>,
}

impl SampleSet {
    pub fn new(samples: Vec<Array3<f64>>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| input("a sample set needs at least one sample"))?;
        if samples.iter().any(|s| s.dim() != first.dim()) {
            return Err(UstdError::Shape("samples differ in shape".into()));
        }
        let mut point = Array3::zeros(first.dim());
        let mut buf = vec![0.0; samples.len()];
        for (idx, out) in point.indexed_iter_mut() {
            for (b, s) in buf.iter_mut().zip(&samples) {
                *b = s[idx];
            }
            *out = median(&mut buf);
        }
        Ok(Self {
            samples,
            point_estimate: point,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(input("metric over an empty set"));
    }
    if pred.len() != truth.len() {
        return Err(UstdError::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrpsOptions {
    /// Divide the summed score by `sum |y|`.
    pub normalized: bool,
    /// Use the `m / (m - 1)` corrected spread term.
    pub fair: bool,
}

impl Default for CrpsOptions {
    fn default() -> Self {
        Self {
            normalized: true,
            fair: false,
        }
    }
}

/// Energy-form CRPS of one scalar truth under `samples`.
///
/// `(1/m) sum |s_i - y| - c/(2 m^2) sum_ij |s_i - s_j|` with `c = 1`, or
/// `c = m/(m-1)` in the fair variant. The pair sum is evaluated on sorted
/// samples in `O(m log m)`.
pub fn crps_point(samples: &mut [f64], y: f64, fair: bool) -> f64 {
    let m = samples.len();
    let mf = m as f64;
    let spread_to_truth = samples.iter().map(|s| (s - y).abs()).sum::<f64>() / mf;
    samples.sort_by(f64::total_cmp);
    // sum_ij |s_i - s_j| = 2 sum_k (2k - m - 1) s_(k), k = 1..m
    let pair_sum: f64 = samples
        .iter()
        .enumerate()
        .map(|(k, s)| (2.0 * (k + 1) as f64 - mf - 1.0) * s)
        .sum::<f64>()
        * 2.0;
    let c = if fair && m > 1 { mf / (mf - 1.0) } else { 1.0 };
    spread_to_truth - c * pair_sum / (2.0 * mf * mf)
}

/// CRPS over many points: `samples[i]` holds the draws for `truth[i]`.
pub fn crps(samples: &[Vec<f64>], truth: &[f64], opts: CrpsOptions) -> Result<f64> {
    let mut acc = CrpsAccumulator::default();
    if samples.len() != truth.len() {
        return Err(UstdError::Shape("one sample vector per truth value expected".into()));
    }
    for (s, &y) in samples.iter().zip(truth) {
        let mut s = s.clone();
        acc.push(&mut s, y, opts.fair)?;
    }
    acc.finish(opts.normalized)
}

#[derive(Clone, Debug, Default)]
struct CrpsAccumulator {
    sum: f64,
    abs_truth: f64,
    count: usize,
}

impl CrpsAccumulator {
    fn push(&mut self, samples: &mut [f64], y: f64, fair: bool) -> Result<()> {
        if samples.is_empty() {
            return Err(input("CRPS needs at least one sample per point"));
        }
        self.sum += crps_point(samples, y, fair);
        self.abs_truth += y.abs();
        self.count += 1;
        Ok(())
    }

    fn finish(&self, normalized: bool) -> Result<f64> {
        if self.count == 0 {
            return Err(input("CRPS over an empty set"));
        }
        if normalized {
            if self.abs_truth == 0.0 {
                return Err(input(
                    "normalized CRPS is undefined when every truth value is zero; use unnormalized mode",
                ));
            }
            Ok(self.sum / self.abs_truth)
        } else {
            Ok(self.sum / self.count as f64)
        }
    }
}

/// Metrics of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub task: String,
    pub split: String,
    pub mae: f64,
    pub rmse: f64,
    pub crps: Option<f64>,
    /// MAE per target step; averages to `mae`.
    pub per_horizon_mae: Vec<f64>,
    pub per_horizon_rmse: Vec<f64>,
    pub n_samples: usize,
    pub n_windows: usize,
}

impl MetricReport {
    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.model);
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "mae={:.6}", self.mae);
        let _ = writeln!(s, "rmse={:.6}", self.rmse);
        match self.crps {
            Some(c) => {
                let _ = writeln!(s, "crps={c:.6}");
            }
            None => {
                let _ = writeln!(s, "crps=n/a");
            }
        }
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "n_windows={}", self.n_windows);
        s
    }

    pub fn table_header() -> &'static str {
        "model\ttask\tsplit\tmae\trmse\tcrps\tn_samples\tn_windows"
    }

    pub fn table_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.model,
            self.task,
            self.split,
            self.mae,
            self.rmse,
            self.crps.map(|c| format!("{c:.6}")).unwrap_or_else(|| "n/a".into()),
            self.n_samples,
            self.n_windows
        )
    }
}

/// Streams windows of (samples, truth) into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    crps_opts: CrpsOptions,
    abs: Vec<f64>,
    sq: Vec<f64>,
    per_step: Vec<usize>,
    crps: CrpsAccumulator,
    has_crps: bool,
    n_samples: usize,
    n_windows: usize,
}

impl MetricAccumulator {
    pub fn new(crps_opts: CrpsOptions) -> Self {
        Self {
            crps_opts,
            abs: Vec::new(),
            sq: Vec::new(),
            per_step: Vec::new(),
            crps: CrpsAccumulator::default(),
            has_crps: true,
            n_samples: 0,
            n_windows: 0,
        }
    }

    /// Adds one window; `truth` is `nodes x steps x channels` in data units.
    pub fn push(&mut self, set: &SampleSet, truth: &Array3<f64>) -> Result<()> {
        if set.point_estimate.dim() != truth.dim() {
            return Err(UstdError::Shape(format!(
                "prediction {:?} does not match truth {:?}",
                set.point_estimate.dim(),
                truth.dim()
            )));
        }
        self.push_point(&set.point_estimate, truth)?;
        let mut buf = vec![0.0; set.len()];
        for (idx, &y) in truth.indexed_iter() {
            for (b, s) in buf.iter_mut().zip(&set.samples) {
                *b = s[idx];
            }
            self.crps.push(&mut buf, y, self.crps_opts.fair)?;
        }
        self.n_samples = set.len();
        Ok(())
    }

    /// Adds a deterministic prediction; CRPS is then not reported.
    pub fn push_deterministic(&mut self, pred: &Array3<f64>, truth: &Array3<f64>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(UstdError::Shape("prediction and truth differ in shape".into()));
        }
        self.has_crps = false;
        self.n_samples = 1;
        self.push_point(pred, truth)
    }

    fn push_point(&mut self, pred: &Array3<f64>, truth: &Array3<f64>) -> Result<()> {
        let steps = truth.len_of(Axis(1));
        if self.abs.is_empty() {
            self.abs = vec![0.0; steps];
            self.sq = vec![0.0; steps];
            self.per_step = vec![0; steps];
        } else if self.abs.len() != steps {
            return Err(UstdError::Shape("windows differ in length".into()));
        }
        for ((i, s, c), &y) in truth.indexed_iter() {
            let e = pred[[i, s, c]] - y;
            self.abs[s] += e.abs();
            self.sq[s] += e * e;
            self.per_step[s] += 1;
        }
        self.n_windows += 1;
        Ok(())
    }

    pub fn finish(&self, model: &str, task: &str, split: &str) -> Result<MetricReport> {
        let total: usize = self.per_step.iter().sum();
        if total == 0 {
            return Err(input("no windows were evaluated"));
        }
        let per_horizon_mae: Vec<f64> = self.abs.iter().zip(&self.per_step).map(|(a, &n)| a / n as f64).collect();
        let per_horizon_rmse = self.sq.iter().zip(&self.per_step).map(|(a, &n)| (a / n as f64).sqrt()).collect();
        // equal counts per step, so the scalar is the plain mean of the curve
        let mae = per_horizon_mae.iter().sum::<f64>() / per_horizon_mae.len() as f64;
        let rmse = (self.sq.iter().sum::<f64>() / total as f64).sqrt();
        let crps = if self.has_crps {
            Some(self.crps.finish(self.crps_opts.normalized)?)
        } else {
            None
        };
        Ok(MetricReport {
            model: model.into(),
            task: task.into(),
            split: split.into(),
            mae,
            rmse,
            crps,
            per_horizon_mae,
            per_horizon_rmse,
            n_samples: self.n_samples,
            n_windows: self.n_windows,
        })
    }
}
