//! Shared fixtures for the benchmarks: one synthetic forecasting task and a
//! gated / full-attention model pair built on the same encoder.

use ustd::pipeline::experiment::{build_model, load_task_data, Ablation};
use ustd::pipeline::model::{Segment, TaskData, UstdModel};
use ustd::{rng_from_seed, EncoderParams, RunConfig, Task, WindowPair};

pub struct Fixture {
    pub data: TaskData,
    pub gated: UstdModel,
    pub full: UstdModel,
    pub windows: Vec<WindowPair>,
}

/// `nodes`-node forecasting fixture with `steps` diffusion steps.
pub fn fixture(nodes: usize, steps: usize) -> Fixture {
    let mut cfg = RunConfig::default();
    cfg.synth.n_nodes = nodes;
    cfg.synth.t_total = 480;
    cfg.diffusion.steps = steps;
    let mut rng = rng_from_seed(0);
    let data = load_task_data(&cfg, Task::Forecast, None, &mut rng).expect("synthetic data");
    let encoder = EncoderParams::new(cfg.encoder.clone(), &mut rng).expect("encoder");
    let gated = build_model(&data, Some(encoder.clone()), &cfg, Ablation::Full, &mut rng).expect("gated model");
    let full = build_model(&data, Some(encoder), &cfg, Ablation::FullAttention, &mut rng).expect("full model");
    let windows = data.windows(Segment::Test, 12).expect("windows");
    Fixture {
        data,
        gated,
        full,
        windows,
    }
}
