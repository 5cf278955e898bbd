//! Training, inference, evaluation and checkpoint plumbing.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod train;
