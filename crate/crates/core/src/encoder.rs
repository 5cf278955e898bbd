//! Spatio-temporal encoder (gated TCN + GCN layers with residual and skip
//! paths), the lightweight reconstruction decoder, masking, and masked
//! autoencoder pre-training.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{clip_grad_norm, Adam, AdamConfig, Bound, Init, Linear, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{input, Result, UstdError};
use crate::graph::{normalize_adjacency, sample_subgraph, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input channels `d_x`.
    pub input_dim: usize,
    /// Channel width inside encoder and decoder layers.
    pub hidden: usize,
    /// Latent channel `d_h` of the representation.
    pub latent: usize,
    /// Temporal kernel size `c`.
    pub kernel_size: usize,
    /// One dilation per encoder layer.
    pub dilations: Vec<usize>,
    /// Graph propagation depth `L`.
    pub propagation_depth: usize,
    pub decoder_layers: usize,
    /// Condition window length `T`.
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden: 32,
            latent: 64,
            kernel_size: 2,
            dilations: vec![1, 2, 3, 1, 2, 2],
            propagation_depth: 2,
            decoder_layers: 3,
            window: 12,
        }
    }
}

impl EncoderConfig {
    /// Latent length `tau = T - (c - 1) * sum(dilations)`.
    pub fn tau(&self) -> Result<usize> {
        if self.kernel_size == 0 {
            return Err(UstdError::Config("kernel size must be positive".into()));
        }
        let shrink: usize = (self.kernel_size - 1) * self.dilations.iter().sum::<usize>();
        if shrink >= self.window {
            return Err(UstdError::Shape(format!(
                "window T={} is too short: kernel {} with dilations {:?} needs at least {} steps",
                self.window,
                self.kernel_size,
                self.dilations,
                shrink + 1
            )));
        }
        Ok(self.window - shrink)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(UstdError::Config("encoder widths must be positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(UstdError::Config("encoder needs at least one layer and positive dilations".into()));
        }
        self.tau().map(|_| ())
    }
}

/// Parameter handles of one spatio-temporal layer.
#[derive(Clone, Debug)]
pub struct StLayer {
    /// Stacked taps -> `[filter | gate]`.
    pub tcn: Linear,
    /// `[H, AH, ..., A^L H] -> out`, i.e. the `W_l` stacked row-wise.
    pub gcn: Linear,
    pub residual: Linear,
    pub skip: Option<Linear>,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl StLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        kernel_size: usize,
        dilation: usize,
        depth: usize,
        skip: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            tcn: Linear::new(store, &format!("{name}.tcn"), kernel_size * width, 2 * width, true, rng),
            gcn: Linear::new(store, &format!("{name}.gcn"), (depth + 1) * width, width, true, rng),
            residual: Linear::new(store, &format!("{name}.residual"), width, width, true, rng),
            skip: skip.then(|| Linear::new(store, &format!("{name}.skip"), width, width, true, rng)),
            kernel_size,
            dilation,
        }
    }
}

/// Row layout of a stacked spatio-temporal activation: `(block, node, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StShape {
    pub blocks: usize,
    pub nodes: usize,
    pub steps: usize,
}

impl StShape {
    pub fn rows(&self) -> usize {
        self.blocks * self.nodes * self.steps
    }

    /// Row indices selecting steps `offset..offset + len` of every series.
    fn steps_index(&self, offset: usize, len: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.blocks * self.nodes * len);
        for bn in 0..self.blocks * self.nodes {
            for t in 0..len {
                idx.push(bn * self.steps + offset + t);
            }
        }
        idx
    }
}

/// Dilated valid convolution followed by the tanh/sigmoid gate.
///
/// `kernel` is the tap-stacked `(c * d_in) x (2 * d_out)` matrix whose left
/// half holds `K1` and right half `K2`.
pub fn gated_tcn(t: &Tape, x: Var, shape: StShape, tcn: &Linear, p: &Bound, kernel_size: usize, dilation: usize) -> Result<(Var, StShape)> {
    let span = (kernel_size - 1) * dilation;
    if shape.steps <= span {
        return Err(UstdError::Shape(format!(
            "gated TCN needs more than {span} steps (kernel {kernel_size}, dilation {dilation}), got {}",
            shape.steps
        )));
    }
    let out_steps = shape.steps - span;
    let taps: Vec<Var> = (0..kernel_size)
        .map(|j| t.gather_rows(x, shape.steps_index(j * dilation, out_steps)))
        .collect();
    let stacked = if taps.len() == 1 { taps[0] } else { t.concat_cols(&taps) };
    let pre = tcn.forward(t, p, stacked);
    let width = tcn.out_dim / 2;
    let filter = t.tanh(t.slice_cols(pre, 0, width));
    let gate = t.sigmoid(t.slice_cols(pre, width, width));
    let out = t.mul(filter, gate);
    Ok((
        out,
        StShape {
            steps: out_steps,
            ..shape
        },
    ))
}

/// `sum_l A^l H W_l` at every step, with a shared bias.
pub fn gcn(t: &Tape, h: Var, shape: StShape, adj: &Arc<Mat>, depth: usize, weights: &Linear, p: &Bound) -> Var {
    let mut powers = Vec::with_capacity(depth + 1);
    powers.push(h);
    for _ in 0..depth {
        let prev = *powers.last().expect("non-empty");
        powers.push(t.propagate(prev, adj.clone(), shape.blocks));
    }
    let stacked = if powers.len() == 1 { h } else { t.concat_cols(&powers) };
    weights.forward(t, p, stacked)
}

/// One layer: gated TCN, GCN, residual. Returns the layer output and the
/// gated TCN activation used by the skip path.
fn st_layer(
    t: &Tape,
    p: &Bound,
    layer: &StLayer,
    x: Var,
    shape: StShape,
    adj: &Arc<Mat>,
    depth: usize,
) -> Result<(Var, Var, StShape)> {
    let (h, out_shape) = gated_tcn(t, x, shape, &layer.tcn, p, layer.kernel_size, layer.dilation)?;
    let g = gcn(t, h, out_shape, adj, depth, &layer.gcn, p);
    let tail = if out_shape.steps == shape.steps {
        x
    } else {
        t.gather_rows(x, shape.steps_index(shape.steps - out_shape.steps, out_shape.steps))
    };
    let res = layer.residual.forward(t, p, tail);
    Ok((t.add(g, res), h, out_shape))
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub input: Linear,
    pub layers: Vec<StLayer>,
    pub head: Linear,
    pub mask_token: ParamId,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let w = config.hidden;
        let input = Linear::new(&mut store, "encoder.input", config.input_dim, w, true, rng);
        let layers = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                StLayer::new(
                    &mut store,
                    &format!("encoder.layer{i}"),
                    w,
                    config.kernel_size,
                    d,
                    config.propagation_depth,
                    true,
                    rng,
                )
            })
            .collect();
        let head = Linear::new(&mut store, "encoder.head", w, config.latent, true, rng);
        let mask_token = store.add_init("encoder.mask_token", 1, config.input_dim, Init::Zeros, rng);
        Ok(Self {
            config,
            store,
            input,
            layers,
            head,
            mask_token,
        })
    }

    /// Encodes stacked condition rows `(block, node, step) x d_x` into latent
    /// rows `(block, node, tau) x d_h`.
    pub fn forward(&self, t: &Tape, p: &Bound, x: Var, blocks: usize, nodes: usize, adj: &Arc<Mat>) -> Result<Var> {
        let cfg = &self.config;
        let tau = cfg.tau()?;
        let mut shape = StShape {
            blocks,
            nodes,
            steps: cfg.window,
        };
        let (rows, cols) = t.shape(x);
        if rows != shape.rows() || cols != cfg.input_dim {
            return Err(UstdError::Shape(format!(
                "encoder expects {}x{} input rows, got {rows}x{cols}",
                shape.rows(),
                cfg.input_dim
            )));
        }
        let mut h = self.input.forward(t, p, x);
        let mut skip_sum: Option<Var> = None;
        for layer in &self.layers {
            let (out, gated, s) = st_layer(t, p, layer, h, shape, adj, cfg.propagation_depth)?;
            let tail = if s.steps == tau {
                gated
            } else {
                t.gather_rows(gated, s.steps_index(s.steps - tau, tau))
            };
            let skip = layer.skip.as_ref().expect("encoder layers have skips").forward(t, p, tail);
            skip_sum = Some(match skip_sum {
                Some(acc) => t.add(acc, skip),
                None => skip,
            });
            h = out;
            shape = s;
        }
        debug_assert_eq!(shape.steps, tau);
        let z = t.relu(skip_sum.expect("at least one layer"));
        Ok(self.head.forward(t, p, z))
    }

    /// Tape input `x` with masked cells replaced by the learnable token.
    /// `mask` has one entry per row of `x`.
    pub fn masked_input(&self, t: &Tape, p: &Bound, x: &Mat, mask: &[bool]) -> Var {
        assert_eq!(mask.len(), x.nrows());
        let keep = Mat::from_shape_fn(x.dim(), |(r, _)| if mask[r] { 0.0 } else { 1.0 });
        let kept = t.constant(x * &keep);
        let m = t.constant(Mat::from_shape_fn((x.nrows(), 1), |(r, _)| if mask[r] { 1.0 } else { 0.0 }));
        let tokens = t.matmul(m, p.var(self.mask_token));
        t.add(kept, tokens)
    }
}

/// Encoder output for one condition window.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRep {
    /// `N x tau x d_h`.
    pub h: Array3<f64>,
    /// Parent-graph index of each row of `h`.
    pub node_index_map: Vec<usize>,
}

/// Encodes a single `N x T x d_x` condition window.
pub fn encode(x: &Array3<f64>, graph: &Graph, params: &EncoderParams) -> Result<LatentRep> {
    let (n, steps, d) = x.dim();
    if n != graph.n_nodes() {
        return Err(UstdError::Shape(format!("condition has {n} nodes, graph has {}", graph.n_nodes())));
    }
    if steps != params.config.window || d != params.config.input_dim {
        return Err(UstdError::Shape(format!(
            "condition is {n}x{steps}x{d}, encoder expects T={} and d_x={}",
            params.config.window, params.config.input_dim
        )));
    }
    let tau = params.config.tau()?;
    let adj = Arc::new(normalize_adjacency(graph));
    let t = Tape::new();
    let p = params.store.bind(&t, false);
    let rows = t.constant(stack_rows(std::slice::from_ref(x)));
    let h = params.forward(&t, &p, rows, 1, n, &adj)?;
    let h = t.value(h).clone();
    let latent = params.config.latent;
    let h = Array3::from_shape_vec((n, tau, latent), h.into_raw_vec_and_offset().0).expect("latent rows");
    if h.iter().any(|v| !v.is_finite()) {
        return Err(UstdError::Numeric("encoder produced non-finite latents".into()));
    }
    Ok(LatentRep {
        h,
        node_index_map: (0..n).collect(),
    })
}

/// Stacks `N x T x d` windows into `(window, node, step) x d` rows.
pub fn stack_rows(windows: &[Array3<f64>]) -> Mat {
    let d = windows.first().map(|w| w.dim().2).unwrap_or(0);
    let total: usize = windows.iter().map(|w| w.len()).sum();
    let mut data = Vec::with_capacity(total);
    for w in windows {
        data.extend(w.iter().copied());
    }
    Mat::from_shape_vec((total / d.max(1), d), data).expect("consistent channels")
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub store: ParamStore,
    pub input: Linear,
    pub layers: Vec<StLayer>,
    pub output: Linear,
    pub tau: usize,
    pub window: usize,
    pub output_dim: usize,
    pub propagation_depth: usize,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tau = config.tau()?;
        let mut store = ParamStore::new();
        let w = config.hidden;
        let input = Linear::new(&mut store, "decoder.input", config.latent, w, true, rng);
        let layers = (0..config.decoder_layers)
            .map(|i| {
                StLayer::new(&mut store, &format!("decoder.layer{i}"), w, 1, 1, config.propagation_depth, false, rng)
            })
            .collect();
        let output = Linear::new(&mut store, "decoder.output", tau * w, config.window * config.input_dim, true, rng);
        Ok(Self {
            store,
            input,
            layers,
            output,
            tau,
            window: config.window,
            output_dim: config.input_dim,
            propagation_depth: config.propagation_depth,
        })
    }

    /// Latent rows `(block, node, tau) x d_h` to reconstruction rows
    /// `(block, node, step) x d_x`.
    pub fn forward(&self, t: &Tape, p: &Bound, h: Var, blocks: usize, nodes: usize, adj: &Arc<Mat>) -> Result<Var> {
        let mut shape = StShape {
            blocks,
            nodes,
            steps: self.tau,
        };
        let mut x = self.input.forward(t, p, h);
        for layer in &self.layers {
            let (out, _, s) = st_layer(t, p, layer, x, shape, adj, self.propagation_depth)?;
            x = out;
            shape = s;
        }
        let width = self.input.out_dim;
        let flat = t.reshape(x, blocks * nodes, self.tau * width);
        let y = self.output.forward(t, p, flat);
        Ok(t.reshape(y, blocks * nodes * self.window, self.output_dim))
    }
}

/// Reconstructs an `N x T x d_x` window from one latent representation.
pub fn reconstruct(latent: &LatentRep, graph: &Graph, decoder: &DecoderParams) -> Result<Array3<f64>> {
    let (n, tau, d_h) = latent.h.dim();
    if tau != decoder.tau || d_h != decoder.input.in_dim {
        return Err(UstdError::Shape(format!(
            "latent is {n}x{tau}x{d_h}, decoder expects tau={} d_h={}",
            decoder.tau, decoder.input.in_dim
        )));
    }
    let adj = Arc::new(normalize_adjacency(graph));
    let t = Tape::new();
    let p = decoder.store.bind(&t, false);
    let rows = t.constant(stack_rows(std::slice::from_ref(&latent.h)));
    let y = decoder.forward(&t, &p, rows, 1, n, &adj)?;
    let y = t.value(y).clone();
    Ok(Array3::from_shape_vec((n, decoder.window, decoder.output_dim), y.into_raw_vec_and_offset().0)
        .expect("reconstruction rows"))
}

/// Binary corruption mask over `(node, step)` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub msk: Array2<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    /// Masks exactly `round(ratio * N * T)` cells, chosen without replacement.
    pub fn sample<R: Rng + ?Sized>(nodes: usize, steps: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(input(format!("mask ratio must lie in [0,1), got {ratio}")));
        }
        let cells = nodes * steps;
        let count = ((ratio * cells as f64).round() as usize).min(cells);
        let mut msk = Array2::from_elem((nodes, steps), false);
        for c in index::sample(rng, cells, count) {
            msk[[c / steps, c % steps]] = true;
        }
        Ok(Self { msk, ratio })
    }

    pub fn masked_count(&self) -> usize {
        self.msk.iter().filter(|&&m| m).count()
    }
}

/// Replaces masked cells by the token; the input is left untouched.
pub fn apply_mask(x: &Array3<f64>, mask: &MaskSpec, token: &[f64]) -> Result<Array3<f64>> {
    let (n, steps, d) = x.dim();
    if mask.msk.dim() != (n, steps) {
        return Err(UstdError::Shape(format!("mask {:?} does not match data {n}x{steps}", mask.msk.dim())));
    }
    if token.len() != d {
        return Err(UstdError::Shape(format!("token has {} channels, data has {d}", token.len())));
    }
    let mut out = x.clone();
    for i in 0..n {
        for s in 0..steps {
            if mask.msk[[i, s]] {
                for c in 0..d {
                    out[[i, s, c]] = token[c];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` disables masking; the loss then covers every cell. Written as
    /// `false` in config files.
    #[serde(with = "ratio_or_false")]
    pub mask_ratio: Option<f64>,
    pub graph_sample_rate: f64,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            mask_ratio: Some(0.75),
            graph_sample_rate: 0.8,
            grad_clip: Some(5.0),
            log_every: 100,
        }
    }
}

mod ratio_or_false {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Ratio(f64),
        Off(bool),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(r) => Repr::Ratio(*r),
            None => Repr::Off(false),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            Some(Repr::Ratio(r)) => Ok(Some(r)),
            Some(Repr::Off(false)) | None => Ok(None),
            Some(Repr::Off(true)) => Err(serde::de::Error::custom("mask_ratio = true is ambiguous; give a ratio")),
        }
    }
}

/// Encoder, decoder and their optimizer state during pre-training.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub encoder_opt: Adam,
    pub decoder_opt: Adam,
    pub config: PretrainConfig,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

/// Forward pieces of one masked reconstruction, kept for inspection.
pub struct MaskedLoss {
    pub loss: Var,
    pub masked_cells: usize,
}

/// Masked-MAE reconstruction loss of `windows` on `graph`.
///
/// `masks[b]` marks the corrupted cells of window `b`; when `masks` is `None`
/// no cell is corrupted and every cell counts toward the loss.
pub fn masked_reconstruction_loss(
    t: &Tape,
    enc: &EncoderParams,
    enc_p: &Bound,
    dec: &DecoderParams,
    dec_p: &Bound,
    windows: &[Array3<f64>],
    masks: Option<&[MaskSpec]>,
    graph: &Graph,
) -> Result<MaskedLoss> {
    let n = graph.n_nodes();
    let blocks = windows.len();
    let adj = Arc::new(normalize_adjacency(graph));
    let x = stack_rows(windows);
    let d = x.ncols();
    let row_mask: Vec<bool> = match masks {
        Some(ms) => ms.iter().flat_map(|m| m.msk.iter().copied()).collect(),
        None => vec![false; x.nrows()],
    };
    let corrupted = enc.masked_input(t, enc_p, &x, &row_mask);
    let h = enc.forward(t, enc_p, corrupted, blocks, n, &adj)?;
    let recon = dec.forward(t, dec_p, h, blocks, n, &adj)?;
    let weight = Mat::from_shape_fn(x.dim(), |(r, _)| if masks.is_none() || row_mask[r] { 1.0 } else { 0.0 });
    let masked_cells = weight.iter().filter(|&&w| w > 0.0).count();
    if masked_cells == 0 {
        return Err(input("masked loss over an empty set of cells"));
    }
    let diff = t.sub(recon, t.constant(x));
    let abs = t.abs(diff);
    let weighted = t.mul_const(abs, weight);
    let loss = t.scale(t.sum(weighted), 1.0 / masked_cells as f64);
    debug_assert_eq!(d, enc.config.input_dim);
    Ok(MaskedLoss { loss, masked_cells })
}

impl Pretrainer {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, pretrain: PretrainConfig, rng: &mut R) -> Result<Self> {
        if let Some(r) = pretrain.mask_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(input(format!(
                    "pre-training mask ratio must lie in (0,1) because the loss covers masked cells only, got {r}"
                )));
            }
        }
        let encoder = EncoderParams::new(config.clone(), rng)?;
        let decoder = DecoderParams::new(&config, rng)?;
        let adam = AdamConfig {
            lr: pretrain.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            encoder_opt: Adam::new(adam, &encoder.store),
            decoder_opt: Adam::new(adam, &decoder.store),
            encoder,
            decoder,
            config: pretrain,
            step: 0,
            loss_history: Vec::new(),
        })
    }

    /// One optimizer step on a batch of `N x T x d_x` condition windows:
    /// sample a subgraph, mask, reconstruct, take the masked MAE.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[&Array3<f64>], graph: &Graph, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(input("empty pre-training batch"));
        }
        let sub = sample_subgraph(graph, self.config.graph_sample_rate, rng)?;
        let subgraph = sub.graph(graph)?;
        let windows: Vec<Array3<f64>> = batch
            .iter()
            .map(|w| w.select(ndarray::Axis(0), &sub.kept_indices))
            .collect();
        let masks = match self.config.mask_ratio {
            Some(r) => Some(
                windows
                    .iter()
                    .map(|w| MaskSpec::sample(w.dim().0, w.dim().1, r, rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let t = Tape::new();
        let ep = self.encoder.store.bind(&t, true);
        let dp = self.decoder.store.bind(&t, true);
        let ml = masked_reconstruction_loss(
            &t,
            &self.encoder,
            &ep,
            &self.decoder,
            &dp,
            &windows,
            masks.as_deref(),
            &subgraph,
        )?;
        let loss = t.scalar(ml.loss);
        if !loss.is_finite() {
            return Err(UstdError::Numeric(format!(
                "pre-training loss became {loss} at step {} ({} masked cells, {} nodes)",
                self.step,
                ml.masked_cells,
                subgraph.n_nodes()
            )));
        }
        let mut grads = t.backward(ml.loss);
        let mut ge = ep.collect(&mut grads, &self.encoder.store);
        let mut gd = dp.collect(&mut grads, &self.decoder.store);
        if let Some(c) = self.config.grad_clip {
            let mut all: Vec<Mat> = ge.drain(..).chain(gd.drain(..)).collect();
            clip_grad_norm(&mut all, c);
            gd = all.split_off(self.encoder.store.len());
            ge = all;
        }
        self.encoder_opt.update(&mut self.encoder.store, &ge);
        self.decoder_opt.update(&mut self.decoder.store, &gd);
        self.step += 1;
        self.loss_history.push(loss);
        Ok(loss)
    }
}
