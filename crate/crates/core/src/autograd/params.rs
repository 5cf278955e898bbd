use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Grads, Mat, Tape, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±1/sqrt(fan_in)`, the usual default for linear layers.
    FanIn,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Ones => Mat::ones((rows, cols)),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                uniform(rows, cols, a, rng)
            }
            Init::FanIn => {
                let a = 1.0 / (rows.max(1) as f64).sqrt();
                uniform(rows, cols, a, rng)
            }
            Init::Normal(std) => {
                let n = rand_distr::Normal::new(0.0, std).expect("finite std");
                Mat::from_shape_simple_fn((rows, cols), || n.sample(rng))
            }
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, Mat> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from `named`. Names and shapes must match
    /// exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Mat>) -> Result<(), String> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = named
                .get(name)
                .ok_or_else(|| format!("missing parameter '{name}'"))?;
            if src.dim() != value.dim() {
                return Err(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    src.dim(),
                    value.dim()
                ));
            }
            value.assign(src);
        }
        Ok(())
    }

    /// Places every parameter on `tape`, either differentiable or frozen.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, a: f64, rng: &mut R) -> Mat {
    let d = Uniform::new_inclusive(-a, a).expect("finite bound");
    Mat::from_shape_simple_fn((rows, cols), || d.sample(rng))
}

/// Tape handles for one [`ParamStore`] during a single forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with the store; parameters that did not touch the
    /// loss get zeros.
    pub fn collect(&self, grads: &mut Grads, store: &ParamStore) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, value)| grads.take(v).unwrap_or_else(|| Mat::zeros(value.dim())))
            .collect()
    }
}
