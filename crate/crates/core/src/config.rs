//! Run configuration: one TOML section per component, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, Task};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, ScheduleShape};
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{Result, UstdError};
use crate::pipeline::metrics::CrpsOptions;
use crate::pipeline::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Signals container or CSV.
    pub signals: Option<PathBuf>,
    /// `src,dst,weight` edge list.
    pub edges: Option<PathBuf>,
    /// `node_id,x,y` table; builds the graph when no edge list is given.
    pub coords: Option<PathBuf>,
    /// Gaussian kernel width; defaults to the std of pairwise distances.
    pub kernel_sigma: Option<f64>,
    pub kernel_epsilon: f64,
    /// Train/validation/test ratios over time.
    pub split: [f64; 3],
    /// Forecast horizon `T'`.
    pub horizon: usize,
    /// Observed to unobserved node ratio for kriging.
    pub kriging_ratio: [usize; 2],
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            signals: None,
            edges: None,
            coords: None,
            kernel_sigma: None,
            kernel_epsilon: 0.1,
            split: [0.7, 0.1, 0.2],
            horizon: 12,
            kriging_ratio: [2, 1],
            train_stride: 1,
            eval_stride: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.5,
            shape: ScheduleShape::Quadratic,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.shape)
            .map_err(|e| UstdError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub crps: CrpsOptions,
    pub compare_baselines: bool,
    /// Node ids that get a fan chart.
    pub fan_chart_nodes: Vec<String>,
    /// Cap on evaluated windows; `None` evaluates all.
    pub max_windows: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            crps: CrpsOptions::default(),
            compare_baselines: false,
            fan_chart_nodes: Vec::new(),
            max_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub nodes: usize,
    pub trials: usize,
    pub n_samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            nodes: 300,
            trials: 5,
            n_samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Forecast,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UstdError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UstdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| UstdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.diffusion.schedule()?;
        if self.data.horizon == 0 || self.data.train_stride == 0 || self.data.eval_stride == 0 {
            return Err(UstdError::Config("horizon and strides must be positive".into()));
        }
        if self.eval.n_samples == 0 {
            return Err(UstdError::Config("at least one sample is needed".into()));
        }
        if let Some(r) = self.pretrain.mask_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(UstdError::Config(format!("mask ratio must lie in (0,1), got {r}")));
            }
        }
        if !(self.pretrain.graph_sample_rate > 0.0 && self.pretrain.graph_sample_rate <= 1.0) {
            return Err(UstdError::Config("graph sample rate must lie in (0,1]".into()));
        }
        Ok(())
    }
}
