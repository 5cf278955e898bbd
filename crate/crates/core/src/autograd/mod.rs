//! Minimal reverse-mode autodiff used by the encoder and denoisers.

pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use nn::{LayerNorm, Linear, MultiHeadAttention};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{sigmoid, Grads, Mat, Tape, Var};
