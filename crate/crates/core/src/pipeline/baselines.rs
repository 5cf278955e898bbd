//! Reference predictors used as acceptance thresholds.

use std::ops::Range;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;
use crate::data::SignalSeries;
use crate::error::{input, Result, UstdError};

/// Repeats the last observed step across the horizon.
pub fn persistence(condition: &Array3<f64>, horizon: usize) -> Array3<f64> {
    let (n, t, d) = condition.dim();
    let last = condition.slice(s![.., t - 1, ..]);
    Array3::from_shape_fn((n, horizon, d), |(i, _, c)| last[[i, c]])
}

/// Per-node, per-channel Gaussian fitted on a training segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl Climatology {
    pub fn fit(series: &SignalSeries, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > series.len() {
            return Err(input("climatology needs a non-empty training segment"));
        }
        let (n, d) = (series.n_nodes(), series.channels());
        let mut mean = Array2::zeros((n, d));
        let mut std = Array2::zeros((n, d));
        for i in 0..n {
            for c in 0..d {
                let v = series.values.slice(s![i, train.clone(), c]);
                let m = v.sum() / v.len() as f64;
                mean[[i, c]] = m;
                std[[i, c]] = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            }
        }
        Ok(Self { mean, std })
    }

    /// `m` ensemble members for `nodes` over `steps` steps.
    pub fn sample<R: Rng + ?Sized>(&self, nodes: &[usize], steps: usize, m: usize, rng: &mut R) -> Vec<Array3<f64>> {
        let d = self.mean.ncols();
        (0..m)
            .map(|_| {
                Array3::from_shape_fn((nodes.len(), steps, d), |(i, _, c)| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.mean[[nodes[i], c]] + self.std[[nodes[i], c]] * z
                })
            })
            .collect()
    }
}

/// Inverse-distance-weighted interpolation with weights `1 / dist^2`.
///
/// `observed` is `N_o x T x d` aligned with `observed_xy`; a target that
/// coincides with an observed location copies it.
pub fn idw(observed_xy: &Mat, observed: &Array3<f64>, target_xy: &Mat) -> Result<Array3<f64>> {
    let (n_o, t, d) = observed.dim();
    if n_o == 0 {
        return Err(input("inverse-distance weighting needs at least one observed node"));
    }
    if observed_xy.dim() != (n_o, 2) || target_xy.ncols() != 2 {
        return Err(UstdError::Shape("coordinates must be two columns aligned with the nodes".into()));
    }
    let m = target_xy.nrows();
    let mut out = Array3::zeros((m, t, d));
    for j in 0..m {
        let d2: Vec<f64> = (0..n_o)
            .map(|i| {
                let dx = observed_xy[[i, 0]] - target_xy[[j, 0]];
                let dy = observed_xy[[i, 1]] - target_xy[[j, 1]];
                dx * dx + dy * dy
            })
            .collect();
        let nearest = (0..n_o).min_by(|&a, &b| d2[a].total_cmp(&d2[b])).expect("non-empty");
        if d2[nearest] == 0.0 {
            out.slice_mut(s![j, .., ..]).assign(&observed.slice(s![nearest, .., ..]));
            continue;
        }
        let w: Vec<f64> = d2.iter().map(|v| 1.0 / v).collect();
        let total: f64 = w.iter().sum();
        for (i, wi) in w.iter().enumerate() {
            out.slice_mut(s![j, .., ..]).scaled_add(wi / total, &observed.slice(s![i, .., ..]));
        }
    }
    Ok(out)
}
