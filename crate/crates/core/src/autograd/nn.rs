//! Small layer building blocks on top of the tape.

use rand::Rng;

use super::params::{Bound, Init, ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::FanIn, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_init(format!("{name}.weight"), in_dim, out_dim, init, rng);
        let bias = bias.then(|| store.add_init(format!("{name}.bias"), 1, out_dim, Init::Zeros, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => t.add_row(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            gamma: store.add_init(format!("{name}.gamma"), 1, dim, Init::Ones, rng),
            beta: store.add_init(format!("{name}.beta"), 1, dim, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        t.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "channel {dim} not divisible by {heads} heads");
        Self {
            query: Linear::with_init(store, &format!("{name}.q"), dim, dim, false, Init::Glorot, rng),
            key: Linear::with_init(store, &format!("{name}.k"), dim, dim, false, Init::Glorot, rng),
            value: Linear::with_init(store, &format!("{name}.v"), dim, dim, false, Init::Glorot, rng),
            output: Linear::with_init(store, &format!("{name}.o"), dim, dim, true, Init::Glorot, rng),
            heads,
        }
    }

    /// Returns `(output, raw attention node)`; the raw node carries the
    /// softmax weights.
    pub fn forward(
        &self,
        t: &Tape,
        p: &Bound,
        queries: Var,
        keys: Var,
        groups: usize,
    ) -> (Var, Var) {
        let q = self.query.forward(t, p, queries);
        let k = self.key.forward(t, p, keys);
        let v = self.value.forward(t, p, keys);
        let att = t.attention(q, k, v, groups, self.heads);
        (self.output.forward(t, p, att), att)
    }
}
