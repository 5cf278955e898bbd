//! Diffusion-coupled seasonal signals on a random geometric graph.
//!
//! Each node reads `offset + seasonal_i(t) + z_i(t) + noise`, where the
//! seasonal part is two incommensurate sinusoids with node-specific phases,
//! `z` is an AR(1) process whose innovations are mixed through the
//! normalized adjacency, and the observation noise is set from an SNR.

use std::f64::consts::PI;

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SeriesMeta, SignalSeries};
use crate::autograd::Mat;
use crate::error::{input, Result};
use crate::graph::{build_adjacency_from_coords, normalize_adjacency, pairwise_distance_std, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub t_total: usize,
    pub offset: f64,
    pub primary_period: f64,
    pub secondary_period: f64,
    pub primary_amplitude: f64,
    pub secondary_amplitude: f64,
    pub ar_coef: f64,
    /// Innovation scale of the AR component; zero disables it.
    pub ar_std: f64,
    /// Signal-to-noise ratio of the observation noise in dB; `None` disables it.
    pub snr_db: Option<f64>,
    pub kernel_epsilon: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 16,
            t_total: 4096,
            offset: 10.0,
            primary_period: 24.0,
            // golden-ratio multiple keeps the two cycles incommensurate
            secondary_period: 24.0 * 1.618_033_988_749_895,
            primary_amplitude: 1.0,
            secondary_amplitude: 0.5,
            ar_coef: 0.8,
            ar_std: 0.5,
            snr_db: Some(10.0),
            kernel_epsilon: 0.1,
        }
    }
}

/// Output of the generator with the individual components kept for tests.
pub struct SynthOutput {
    pub graph: Graph,
    pub series: SignalSeries,
    /// `N x T` seasonal component, without offset.
    pub seasonal: Mat,
    /// `N x T` AR component.
    pub ar: Mat,
}

pub fn synthesize_graph_signal<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<SynthOutput> {
    let n = config.n_nodes;
    let t_total = config.t_total;
    if n < 4 {
        return Err(input(format!("synthetic graph needs at least 4 nodes, got {n}")));
    }
    if t_total == 0 {
        return Err(input("synthetic series needs at least one step"));
    }
    if !(0.0..1.0).contains(&config.ar_coef.abs()) {
        return Err(input(format!("AR coefficient {} must satisfy |rho| < 1", config.ar_coef)));
    }

    let coords = Mat::from_shape_simple_fn((n, 2), || rng.random::<f64>());
    let sigma = pairwise_distance_std(&coords);
    let graph = build_adjacency_from_coords(&coords, sigma, config.kernel_epsilon)?;
    let norm_adj = normalize_adjacency(&graph);

    let phase1: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let phase2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let seasonal = Mat::from_shape_fn((n, t_total), |(i, t)| {
        let t = t as f64;
        config.primary_amplitude * (2.0 * PI * t / config.primary_period + phase1[i]).sin()
            + config.secondary_amplitude * (2.0 * PI * t / config.secondary_period + phase2[i]).sin()
    });

    let mut ar = Mat::zeros((n, t_total));
    if config.ar_std > 0.0 {
        // start from the stationary scale so there is no burn-in transient
        let mut state: Array1<f64> = Array1::zeros(n);
        let burn_in = 200;
        for step in 0..t_total + burn_in {
            let xi: Array1<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let mixed = norm_adj.dot(&xi) * config.ar_std;
            state = state * config.ar_coef + mixed;
            if step >= burn_in {
                ar.column_mut(step - burn_in).assign(&state);
            }
        }
    }

    let clean = &seasonal + &ar;
    let noise_std = match config.snr_db {
        Some(db) => {
            let count = clean.len() as f64;
            let mean = clean.sum() / count;
            let power = clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            (power / 10f64.powf(db / 10.0)).sqrt()
        }
        None => 0.0,
    };
    let mut values = Array3::zeros((n, t_total, 1));
    for i in 0..n {
        for t in 0..t_total {
            let eps: f64 = if noise_std > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            values[[i, t, 0]] = config.offset + clean[[i, t]] + noise_std * eps;
        }
    }

    let meta = SeriesMeta {
        attribute: "synthetic".into(),
        units: "arbitrary".into(),
        granularity_minutes: Some(60.0),
        steps_per_day: Some(config.primary_period.round() as usize),
        filled_cells: 0,
        generator: Some(serde_json::json!({
            "config": config,
            "kernel_sigma": sigma,
            "observation_noise_std": noise_std,
        })),
    };
    let series = SignalSeries::new(values, meta)?;
    Ok(SynthOutput {
        graph,
        series,
        seasonal,
        ar,
    })
}
