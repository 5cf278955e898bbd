//! Noise predictors: temporal gated attention (forecasting), spatial gated
//! attention (kriging) and a joint-attention transformer used as an ablation.
//!
//! Targets travel as one row per node, `(block, node) x (steps * d_y)`.
//! Conditions travel as `(block, node, token) x d_h` rows.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Init, LayerNorm, Linear, Mat, MultiHeadAttention, ParamStore, Tape, Var};
use crate::error::{Result, UstdError};
use crate::graph::SpatialEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Per-node temporal cross-attention plus node self-attention.
    Tga,
    /// Target-to-observed spatial cross-attention plus target self-attention.
    Sga,
    /// One transformer over all condition and target tokens.
    FullAttention,
}

impl std::str::FromStr for DenoiserKind {
    type Err = UstdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tga" => Ok(Self::Tga),
            "sga" => Ok(Self::Sga),
            "tf" | "full" | "full_attention" => Ok(Self::FullAttention),
            other => Err(UstdError::Config(format!("unknown denoiser '{other}' (tga, sga, full_attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// Columns of the Laplacian spatial embedding.
    pub spatial_dim: usize,
    /// Width of the sinusoidal diffusion-step code.
    pub step_embedding_dim: usize,
    pub self_attention: bool,
    /// Start from a zero noise prediction.
    pub zero_init_head: bool,
    /// Hidden width multiple of the transformer feed-forward block.
    pub ffn_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Tga,
            channels: 96,
            layers: 2,
            heads: 4,
            spatial_dim: 8,
            step_embedding_dim: 128,
            self_attention: true,
            zero_init_head: true,
            ffn_mult: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.heads == 0 {
            return Err(UstdError::Config("denoiser widths, layers and heads must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(UstdError::Config(format!(
                "channel {} is not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.step_embedding_dim < 2 || self.step_embedding_dim % 2 != 0 {
            return Err(UstdError::Config("step embedding width must be even".into()));
        }
        if self.spatial_dim == 0 {
            return Err(UstdError::Config("spatial embedding needs at least one column".into()));
        }
        Ok(())
    }
}

/// Tensor sizes a denoiser is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShapes {
    /// Steps per target node (`T'` forecasting, `T` kriging).
    pub target_steps: usize,
    pub target_dim: usize,
    /// Condition tokens per node (`tau`, or `T` for raw conditions).
    pub cond_tokens: usize,
    /// Width of one condition token (`d_h`, or `d_x` for raw conditions).
    pub cond_dim: usize,
}

impl DenoiserShapes {
    pub fn target_width(&self) -> usize {
        self.target_steps * self.target_dim
    }
}

/// Per-call context: graph layout of the batch plus the embeddings.
pub struct DenoiseContext<'a> {
    pub blocks: usize,
    pub target_nodes: usize,
    pub cond_nodes: usize,
    /// `target_nodes x spatial_dim`.
    pub target_spatial: &'a Mat,
    /// `cond_nodes x spatial_dim`.
    pub cond_spatial: &'a Mat,
    /// Fraction of the day at the first target step, one per block.
    pub day_phase: Option<&'a [f64]>,
}

/// Noise prediction plus intermediate nodes kept for inspection.
pub struct DenoiseOutput {
    pub eps: Var,
    pub cross_outputs: Vec<Var>,
    pub cross_attention: Vec<Var>,
    pub self_attention: Vec<Var>,
    pub gates: Vec<Var>,
}

#[derive(Clone, Debug)]
struct GatedLayer {
    h_proj: Linear,
    cross: MultiHeadAttention,
    ln_cross: LayerNorm,
    self_attn: Option<(MultiHeadAttention, LayerNorm)>,
    gate_cross: Linear,
    gate_self: Linear,
}

#[derive(Clone, Debug)]
struct TfLayer {
    attn: MultiHeadAttention,
    ln_attn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
enum Body {
    Gated {
        /// SGA only: `tau * d_h -> D` temporal absorption.
        absorb: Option<Linear>,
        layers: Vec<GatedLayer>,
    },
    Transformer {
        h_proj: Linear,
        layers: Vec<TfLayer>,
    },
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub shapes: DenoiserShapes,
    pub store: ParamStore,
    input: Linear,
    step_mlp: (Linear, Linear),
    spatial: Linear,
    time: Linear,
    head: Linear,
    body: Body,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, shapes: DenoiserShapes, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if shapes.target_width() == 0 || shapes.cond_tokens == 0 || shapes.cond_dim == 0 {
            return Err(UstdError::Config(format!("degenerate denoiser shapes {shapes:?}")));
        }
        let d = config.channels;
        let mut store = ParamStore::new();
        let s = &mut store;
        let input = Linear::new(s, "denoiser.input", shapes.target_width(), d, true, rng);
        let step_mlp = (
            Linear::new(s, "denoiser.step.0", config.step_embedding_dim, d, true, rng),
            Linear::new(s, "denoiser.step.1", d, d, true, rng),
        );
        let spatial = Linear::new(s, "denoiser.spatial", config.spatial_dim, d, true, rng);
        let time = Linear::new(s, "denoiser.time", 2, d, false, rng);
        let body = match config.kind {
            DenoiserKind::Tga | DenoiserKind::Sga => {
                let sga = config.kind == DenoiserKind::Sga;
                let absorb = sga.then(|| {
                    Linear::new(s, "denoiser.absorb", shapes.cond_tokens * shapes.cond_dim, d, true, rng)
                });
                let h_in = if sga { d } else { shapes.cond_dim };
                let layers = (0..config.layers)
                    .map(|l| {
                        let name = format!("denoiser.layer{l}");
                        GatedLayer {
                            h_proj: Linear::new(s, &format!("{name}.h_proj"), h_in, d, true, rng),
                            cross: MultiHeadAttention::new(s, &format!("{name}.cross"), d, config.heads, rng),
                            ln_cross: LayerNorm::new(s, &format!("{name}.ln_cross"), d, rng),
                            self_attn: config.self_attention.then(|| {
                                (
                                    MultiHeadAttention::new(s, &format!("{name}.self"), d, config.heads, rng),
                                    LayerNorm::new(s, &format!("{name}.ln_self"), d, rng),
                                )
                            }),
                            gate_cross: Linear::with_init(s, &format!("{name}.gate_cross"), d, d, true, Init::Glorot, rng),
                            gate_self: Linear::with_init(s, &format!("{name}.gate_self"), d, d, false, Init::Glorot, rng),
                        }
                    })
                    .collect();
                Body::Gated { absorb, layers }
            }
            DenoiserKind::FullAttention => {
                let h_proj = Linear::new(s, "denoiser.h_proj", shapes.cond_dim, d, true, rng);
                let hidden = config.ffn_mult.max(1) * d;
                let layers = (0..config.layers)
                    .map(|l| {
                        let name = format!("denoiser.tf{l}");
                        TfLayer {
                            attn: MultiHeadAttention::new(s, &format!("{name}.attn"), d, config.heads, rng),
                            ln_attn: LayerNorm::new(s, &format!("{name}.ln_attn"), d, rng),
                            ffn_in: Linear::new(s, &format!("{name}.ffn_in"), d, hidden, true, rng),
                            ffn_out: Linear::new(s, &format!("{name}.ffn_out"), hidden, d, true, rng),
                            ln_ffn: LayerNorm::new(s, &format!("{name}.ln_ffn"), d, rng),
                        }
                    })
                    .collect();
                Body::Transformer { h_proj, layers }
            }
        };
        let head_init = if config.zero_init_head { Init::Zeros } else { Init::FanIn };
        let head = Linear::with_init(s, "denoiser.head", d, shapes.target_width(), true, head_init, rng);
        Ok(Self {
            config,
            shapes,
            store,
            input,
            step_mlp,
            spatial,
            time,
            head,
            body,
        })
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    /// Predicts the noise for `y_k` rows `(block, target_node) x (steps * d_y)`
    /// given condition rows `h`, one diffusion step per block.
    pub fn forward(&self, t: &Tape, p: &Bound, y_k: Var, h: Var, steps: &[usize], ctx: &DenoiseContext) -> Result<DenoiseOutput> {
        self.check_shapes(t, y_k, h, steps, ctx)?;
        let rows = ctx.blocks * ctx.target_nodes;
        let per_block: Vec<usize> = (0..rows).map(|r| r / ctx.target_nodes).collect();
        let per_node: Vec<usize> = (0..rows).map(|r| r % ctx.target_nodes).collect();

        let mut r = self.input.forward(t, p, y_k);
        let e_k = self.step_embedding(t, p, steps);
        r = t.add(r, t.gather_rows(e_k, per_block.clone()));
        let e_s = self.spatial.forward(t, p, t.constant(ctx.target_spatial.clone()));
        r = t.add(r, t.gather_rows(e_s, per_node));
        if let Some(phase) = ctx.day_phase {
            let feats = Mat::from_shape_fn((ctx.blocks, 2), |(b, c)| {
                let a = 2.0 * PI * phase[b];
                if c == 0 { a.sin() } else { a.cos() }
            });
            let e_t = self.time.forward(t, p, t.constant(feats));
            r = t.add(r, t.gather_rows(e_t, per_block));
        }

        let mut out = DenoiseOutput {
            eps: r,
            cross_outputs: Vec::new(),
            cross_attention: Vec::new(),
            self_attention: Vec::new(),
            gates: Vec::new(),
        };
        let r = match &self.body {
            Body::Gated { absorb, layers } => self.gated_body(t, p, r, h, absorb.as_ref(), layers, ctx, &mut out),
            Body::Transformer { h_proj, layers } => self.transformer_body(t, p, r, h, h_proj, layers, ctx, &mut out),
        };
        out.eps = self.head.forward(t, p, r);
        Ok(out)
    }

    fn check_shapes(&self, t: &Tape, y_k: Var, h: Var, steps: &[usize], ctx: &DenoiseContext) -> Result<()> {
        let want_y = (ctx.blocks * ctx.target_nodes, self.shapes.target_width());
        if t.shape(y_k) != want_y {
            return Err(UstdError::Contract(format!(
                "target rows {:?} do not match the configured task {:?}",
                t.shape(y_k),
                want_y
            )));
        }
        let want_h = (ctx.blocks * ctx.cond_nodes * self.shapes.cond_tokens, self.shapes.cond_dim);
        if t.shape(h) != want_h {
            return Err(UstdError::Contract(format!(
                "condition rows {:?}, expected {:?}",
                t.shape(h),
                want_h
            )));
        }
        if steps.len() != ctx.blocks {
            return Err(UstdError::Contract(format!("{} diffusion steps for {} blocks", steps.len(), ctx.blocks)));
        }
        if ctx.target_nodes == 0 || ctx.cond_nodes == 0 {
            return Err(UstdError::Input("denoiser needs at least one target and one condition node".into()));
        }
        if ctx.target_spatial.dim() != (ctx.target_nodes, self.config.spatial_dim)
            || ctx.cond_spatial.dim() != (ctx.cond_nodes, self.config.spatial_dim)
        {
            return Err(UstdError::Contract(format!(
                "spatial embeddings {:?}/{:?} do not cover {} target and {} condition nodes with {} columns",
                ctx.target_spatial.dim(),
                ctx.cond_spatial.dim(),
                ctx.target_nodes,
                ctx.cond_nodes,
                self.config.spatial_dim
            )));
        }
        if matches!(self.config.kind, DenoiserKind::Tga) && ctx.target_nodes != ctx.cond_nodes {
            return Err(UstdError::Contract("temporal attention pairs each target node with its own history".into()));
        }
        if let Some(ph) = ctx.day_phase {
            if ph.len() != ctx.blocks {
                return Err(UstdError::Contract("one day phase per block expected".into()));
            }
        }
        Ok(())
    }

    fn step_embedding(&self, t: &Tape, p: &Bound, steps: &[usize]) -> Var {
        let codes = sinusoid_rows(steps.iter().map(|&k| k as f64), self.config.step_embedding_dim);
        let (l0, l1) = &self.step_mlp;
        let e = t.silu(l0.forward(t, p, t.constant(codes)));
        t.silu(l1.forward(t, p, e))
    }

    #[allow(clippy::too_many_arguments)]
    fn gated_body(
        &self,
        t: &Tape,
        p: &Bound,
        mut r: Var,
        h: Var,
        absorb: Option<&Linear>,
        layers: &[GatedLayer],
        ctx: &DenoiseContext,
        out: &mut DenoiseOutput,
    ) -> Var {
        let d = self.config.channels;
        let tokens = self.shapes.cond_tokens;
        // keys per attention group and the condition stream fed to h_proj
        let (cond, cross_groups) = match absorb {
            Some(abs) => {
                let flat = t.reshape(h, ctx.blocks * ctx.cond_nodes, tokens * self.shapes.cond_dim);
                let a = abs.forward(t, p, flat);
                let e_s = self.spatial.forward(t, p, t.constant(ctx.cond_spatial.clone()));
                let idx = (0..ctx.blocks * ctx.cond_nodes).map(|i| i % ctx.cond_nodes).collect();
                (t.add(a, t.gather_rows(e_s, idx)), ctx.blocks)
            }
            None => (h, ctx.blocks * ctx.target_nodes),
        };
        let pos = absorb.is_none().then(|| {
            let table = sinusoid_rows((0..tokens).map(|j| j as f64), d);
            let idx = (0..ctx.blocks * ctx.cond_nodes * tokens).map(|i| i % tokens).collect();
            t.gather_rows(t.constant(table), idx)
        });
        for layer in layers {
            let mut hp = layer.h_proj.forward(t, p, cond);
            if let Some(pos) = pos {
                hp = t.add(hp, pos);
            }
            let (ca, ca_raw) = layer.cross.forward(t, p, r, hp, cross_groups);
            out.cross_outputs.push(ca);
            out.cross_attention.push(ca_raw);
            let r_ca = layer.ln_cross.forward(t, p, t.add(r, ca));
            r = match &layer.self_attn {
                Some((sa_attn, ln)) => {
                    let (sa, sa_raw) = sa_attn.forward(t, p, r, r, ctx.blocks);
                    out.self_attention.push(sa_raw);
                    let r_sa = ln.forward(t, p, t.add(r, sa));
                    let g = t.sigmoid(t.add(layer.gate_cross.forward(t, p, r_ca), layer.gate_self.forward(t, p, r_sa)));
                    out.gates.push(g);
                    gated_fusion(t, r_ca, r_sa, g)
                }
                None => r_ca,
            };
        }
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer_body(
        &self,
        t: &Tape,
        p: &Bound,
        r: Var,
        h: Var,
        h_proj: &Linear,
        layers: &[TfLayer],
        ctx: &DenoiseContext,
        out: &mut DenoiseOutput,
    ) -> Var {
        let d = self.config.channels;
        let tokens = self.shapes.cond_tokens;
        let (b, n, m) = (ctx.blocks, ctx.cond_nodes, ctx.target_nodes);
        let cond_rows = b * n * tokens;
        let mut hp = h_proj.forward(t, p, h);
        let pos = sinusoid_rows((0..tokens).map(|j| j as f64), d);
        hp = t.add(hp, t.gather_rows(t.constant(pos), (0..cond_rows).map(|i| i % tokens).collect()));
        let e_s = self.spatial.forward(t, p, t.constant(ctx.cond_spatial.clone()));
        hp = t.add(hp, t.gather_rows(e_s, (0..cond_rows).map(|i| (i / tokens) % n).collect()));

        // regroup as [block: condition tokens, target tokens]
        let per = n * tokens + m;
        let stacked = t.concat_rows(&[hp, r]);
        let order: Vec<usize> = (0..b)
            .flat_map(|blk| {
                let cond = (blk * n * tokens..(blk + 1) * n * tokens).collect::<Vec<_>>();
                let tgt = (cond_rows + blk * m..cond_rows + (blk + 1) * m).collect::<Vec<_>>();
                cond.into_iter().chain(tgt)
            })
            .collect();
        let mut x = t.gather_rows(stacked, order);
        for layer in layers {
            let (a, raw) = layer.attn.forward(t, p, x, x, b);
            out.self_attention.push(raw);
            x = layer.ln_attn.forward(t, p, t.add(x, a));
            let f = layer.ffn_out.forward(t, p, t.relu(layer.ffn_in.forward(t, p, x)));
            x = layer.ln_ffn.forward(t, p, t.add(x, f));
        }
        let targets: Vec<usize> = (0..b).flat_map(|blk| blk * per + n * tokens..(blk + 1) * per).collect();
        t.gather_rows(x, targets)
    }
}

/// `R = gate * R_ca + (1 - gate) * R_sa`, written as `R_sa + gate * (R_ca - R_sa)`.
pub fn gated_fusion(t: &Tape, r_ca: Var, r_sa: Var, gate: Var) -> Var {
    t.add(r_sa, t.mul(gate, t.sub(r_ca, r_sa)))
}

/// Sinusoidal code of each position: `[sin(x w_i), cos(x w_i)]` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn sinusoid_rows(positions: impl Iterator<Item = f64>, dim: usize) -> Mat {
    let pos: Vec<f64> = positions.collect();
    let half = dim / 2;
    Mat::from_shape_fn((pos.len(), dim), |(r, c)| {
        let i = c % half.max(1);
        let w = 10000f64.powf(-(i as f64) / half.max(1) as f64);
        if c < half {
            (pos[r] * w).sin()
        } else {
            (pos[r] * w).cos()
        }
    })
}

/// Selects `rows` of an embedding and zero-pads it to `dim` columns, so small
/// graphs with fewer usable eigenvectors fit a fixed-width projection.
pub fn spatial_features(embedding: &SpatialEmbedding, rows: &[usize], dim: usize) -> Mat {
    let cols = embedding.dim().min(dim);
    Mat::from_shape_fn((rows.len(), dim), |(r, c)| if c < cols { embedding.vectors[[rows[r], c]] } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn shapes(target_steps: usize, cond_tokens: usize, cond_dim: usize) -> DenoiserShapes {
        DenoiserShapes {
            target_steps,
            target_dim: 1,
            cond_tokens,
            cond_dim,
        }
    }

    fn small_cfg(kind: DenoiserKind) -> DenoiserConfig {
        DenoiserConfig {
            kind,
            channels: 16,
            heads: 4,
            spatial_dim: 3,
            step_embedding_dim: 8,
            zero_init_head: false,
            ..Default::default()
        }
    }

    struct Case {
        y: Mat,
        h: Mat,
        ts: Mat,
        cs: Mat,
        blocks: usize,
        targets: usize,
        conds: usize,
    }

    fn case(seed: u64, blocks: usize, targets: usize, conds: usize, sh: DenoiserShapes, d_s: usize) -> Case {
        let mut rng = rng_from_seed(seed);
        let mut g = || rng.random::<f64>() * 2.0 - 1.0;
        Case {
            y: Mat::from_shape_simple_fn((blocks * targets, sh.target_width()), &mut g),
            h: Mat::from_shape_simple_fn((blocks * conds * sh.cond_tokens, sh.cond_dim), &mut g),
            ts: Mat::from_shape_simple_fn((targets, d_s), &mut g),
            cs: Mat::from_shape_simple_fn((conds, d_s), &mut g),
            blocks,
            targets,
            conds,
        }
    }

    fn run(den: &Denoiser, c: &Case, steps: &[usize]) -> Mat {
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let ctx = DenoiseContext {
            blocks: c.blocks,
            target_nodes: c.targets,
            cond_nodes: c.conds,
            target_spatial: &c.ts,
            cond_spatial: &c.cs,
            day_phase: None,
        };
        let y = t.constant(c.y.clone());
        let h = t.constant(c.h.clone());
        let out = den.forward(&t, &p, y, h, steps, &ctx).unwrap();
        let v = t.value(out.eps).clone();
        v
    }

    #[test]
    fn flatten_shapes_with_default_channel() {
        let den = Denoiser::new(DenoiserConfig::default(), shapes(12, 1, 64), &mut rng_from_seed(0)).unwrap();
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let y = t.constant(Mat::ones((3, 12)));
        assert_eq!(t.shape(den.input.forward(&t, &p, y)), (3, 96));
        let y = t.constant(Mat::ones((5, 12)));
        assert_eq!(t.shape(den.input.forward(&t, &p, y)), (5, 96));

        let mut den = den;
        for id in [den.input.weight, den.input.bias.unwrap()] {
            den.store.get_mut(id).fill(0.0);
        }
        let p = den.store.bind(&t, false);
        let r = den.input.forward(&t, &p, t.constant(Mat::ones((3, 12))));
        assert!(t.value(r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_predicts_zero_noise() {
        let cfg = DenoiserConfig {
            zero_init_head: true,
            ..small_cfg(DenoiserKind::Tga)
        };
        let sh = shapes(12, 1, 8);
        let den = Denoiser::new(cfg, sh, &mut rng_from_seed(1)).unwrap();
        let c = case(2, 2, 4, 4, sh, 3);
        assert!(run(&den, &c, &[3, 40]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tga_output_shape_and_step_dependence() {
        let sh = shapes(12, 1, 8);
        let den = Denoiser::new(small_cfg(DenoiserKind::Tga), sh, &mut rng_from_seed(3)).unwrap();
        let c = case(4, 1, 8, 8, sh, 3);
        let a = run(&den, &c, &[1]);
        let b = run(&den, &c, &[50]);
        assert_eq!(a.dim(), (8, 12));
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn sga_shape_and_self_attention_ablation() {
        let sh = shapes(12, 2, 8);
        let den = Denoiser::new(small_cfg(DenoiserKind::Sga), sh, &mut rng_from_seed(5)).unwrap();
        let c = case(6, 2, 4, 8, sh, 3);
        let with_sa = run(&den, &c, &[7, 9]);
        assert_eq!(with_sa.dim(), (8, 12));

        let cfg = DenoiserConfig {
            self_attention: false,
            ..small_cfg(DenoiserKind::Sga)
        };
        let den2 = Denoiser::new(cfg, sh, &mut rng_from_seed(5)).unwrap();
        let without = run(&den2, &c, &[7, 9]);
        assert_eq!(without.dim(), (8, 12));
        assert!(with_sa.iter().zip(without.iter()).any(|(x, y)| (x - y).abs() > 1e-9));

        // a single target node still runs
        let c1 = case(7, 1, 1, 8, sh, 3);
        assert_eq!(run(&den, &c1, &[1]).dim(), (1, 12));
    }

    #[test]
    fn sga_with_one_observed_node_copies_its_value_row() {
        let sh = shapes(4, 1, 5);
        let den = Denoiser::new(small_cfg(DenoiserKind::Sga), sh, &mut rng_from_seed(8)).unwrap();
        let c = case(9, 1, 3, 1, sh, 3);
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let ctx = DenoiseContext {
            blocks: 1,
            target_nodes: 3,
            cond_nodes: 1,
            target_spatial: &c.ts,
            cond_spatial: &c.cs,
            day_phase: None,
        };
        let out = den.forward(&t, &p, t.constant(c.y.clone()), t.constant(c.h.clone()), &[4], &ctx).unwrap();
        let att = t.value(out.cross_attention[0]).clone();
        for r in 1..3 {
            assert!(att.row(r).iter().zip(att.row(0).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert_eq!(t.attention_probs(out.cross_attention[0]).unwrap().len(), 4 * 3);
    }

    #[test]
    fn sga_is_invariant_to_observed_node_order() {
        let sh = shapes(6, 2, 4);
        let den = Denoiser::new(small_cfg(DenoiserKind::Sga), sh, &mut rng_from_seed(10)).unwrap();
        let c = case(11, 1, 3, 5, sh, 3);
        let base = run(&den, &c, &[12]);
        let perm = [3usize, 0, 4, 1, 2];
        let mut h = Mat::zeros(c.h.dim());
        let mut cs = Mat::zeros(c.cs.dim());
        for (i, &src) in perm.iter().enumerate() {
            for tok in 0..2 {
                h.row_mut(i * 2 + tok).assign(&c.h.row(src * 2 + tok));
            }
            cs.row_mut(i).assign(&c.cs.row(src));
        }
        let permuted = Case { h, cs, ..c };
        let other = run(&den, &permuted, &[12]);
        assert!(base.iter().zip(other.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn tga_cross_attention_is_per_node() {
        let sh = shapes(6, 3, 4);
        let den = Denoiser::new(small_cfg(DenoiserKind::Tga), sh, &mut rng_from_seed(12)).unwrap();
        let c = case(13, 1, 4, 4, sh, 3);
        let cross_first = |h: &Mat| {
            let t = Tape::new();
            let p = den.store.bind(&t, false);
            let ctx = DenoiseContext {
                blocks: 1,
                target_nodes: 4,
                cond_nodes: 4,
                target_spatial: &c.ts,
                cond_spatial: &c.cs,
                day_phase: None,
            };
            let out = den.forward(&t, &p, t.constant(c.y.clone()), t.constant(h.clone()), &[5], &ctx).unwrap();
            let probs = t.attention_probs(out.cross_attention[0]).unwrap();
            assert_eq!(probs.len(), 4 * 4 * 3); // N x heads x (1 x tau)
            let v = t.value(out.cross_outputs[0]).clone();
            v
        };
        let a = cross_first(&c.h);
        let mut h = c.h.clone();
        for tok in 0..3 {
            h.row_mut(2 * 3 + tok).fill(0.0);
        }
        let b = cross_first(&h);
        for i in [0usize, 1, 3] {
            assert_eq!(a.row(i), b.row(i));
        }
        assert!(a.row(2).iter().zip(b.row(2).iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn single_key_attention_returns_value() {
        let t = Tape::new();
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng_from_seed(14));
        let p = store.bind(&t, false);
        let q = t.constant(Mat::from_shape_fn((3, 8), |(i, j)| (i + j) as f64 * 0.1));
        let k = t.constant(Mat::from_shape_fn((3, 8), |(i, j)| (i * j) as f64 * 0.05 - 0.2));
        let (_, raw) = att.forward(&t, &p, q, k, 3);
        let v = t.value(att.value.forward(&t, &p, k)).clone();
        assert!(t.value(raw).iter().zip(v.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        // identical keys: output equals that value regardless of the query
        let k2 = t.constant(Mat::from_shape_fn((6, 8), |(_, j)| j as f64 * 0.3));
        let (_, raw2) = att.forward(&t, &p, q, k2, 3);
        let v2 = t.value(att.value.forward(&t, &p, k2)).clone();
        for r in 0..3 {
            for c in 0..8 {
                assert!((t.value(raw2)[[r, c]] - v2[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_fusion_identities() {
        let t = Tape::new();
        let a = t.constant(Mat::from_elem((2, 3), 2.0));
        let b = t.constant(Mat::from_elem((2, 3), -1.0));
        let half = t.constant(Mat::from_elem((2, 3), crate::autograd::sigmoid(0.0)));
        let r = gated_fusion(&t, a, b, half);
        assert!(t.value(r).iter().all(|&v| v == 0.5));
        let sat = t.constant(Mat::from_elem((2, 3), crate::autograd::sigmoid(50.0)));
        assert!(t.value(gated_fusion(&t, a, b, sat)).iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let any = t.constant(Mat::from_elem((2, 3), 0.37));
        assert!(t.value(gated_fusion(&t, a, a, any)).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let sh = shapes(12, 1, 8);
        let den = Denoiser::new(small_cfg(DenoiserKind::Tga), sh, &mut rng_from_seed(15)).unwrap();
        let c = case(16, 2, 5, 5, sh, 3);
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let ctx = DenoiseContext {
            blocks: 2,
            target_nodes: 5,
            cond_nodes: 5,
            target_spatial: &c.ts,
            cond_spatial: &c.cs,
            day_phase: Some(&[0.1, 0.7]),
        };
        let out = den.forward(&t, &p, t.constant(c.y.clone()), t.constant(c.h.clone()), &[1, 2], &ctx).unwrap();
        assert_eq!(out.gates.len(), 2);
        for g in &out.gates {
            assert!(t.value(*g).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for a in out.cross_attention.iter().chain(&out.self_attention) {
            let probs = t.attention_probs(*a).unwrap();
            let lk = if out.self_attention.contains(a) { 5 } else { 1 };
            for row in probs.chunks(lk) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_weight_gradient_matches_finite_differences() {
        let sh = shapes(4, 2, 3);
        let mut den = Denoiser::new(small_cfg(DenoiserKind::Tga), sh, &mut rng_from_seed(17)).unwrap();
        let c = case(18, 1, 3, 3, sh, 3);
        let id = den.store.find("denoiser.layer0.gate_cross.weight").unwrap();
        let loss = |den: &Denoiser| -> (f64, Option<Mat>) {
            let t = Tape::new();
            let p = den.store.bind(&t, true);
            let ctx = DenoiseContext {
                blocks: 1,
                target_nodes: 3,
                cond_nodes: 3,
                target_spatial: &c.ts,
                cond_spatial: &c.cs,
                day_phase: None,
            };
            let out = den.forward(&t, &p, t.constant(c.y.clone()), t.constant(c.h.clone()), &[6], &ctx).unwrap();
            let sq = t.mul(out.eps, out.eps);
            let l = t.mean(sq);
            let mut g = t.backward(l);
            (t.scalar(l), g.take(p.var(id)))
        };
        let (_, grad) = loss(&den);
        let grad = grad.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (r, col) in [(0usize, 0usize), (3, 5), (7, 11), (15, 2)] {
            let orig = den.store.get(id)[[r, col]];
            den.store.get_mut(id)[[r, col]] = orig + h;
            let up = loss(&den).0;
            den.store.get_mut(id)[[r, col]] = orig - h;
            let down = loss(&den).0;
            den.store.get_mut(id)[[r, col]] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[[r, col]]).abs() / fd.abs().max(grad[[r, col]].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn full_attention_scores_cover_all_tokens() {
        let sh = shapes(12, 1, 8);
        let den = Denoiser::new(small_cfg(DenoiserKind::FullAttention), sh, &mut rng_from_seed(19)).unwrap();
        let c = case(20, 2, 6, 6, sh, 3);
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let ctx = DenoiseContext {
            blocks: 2,
            target_nodes: 6,
            cond_nodes: 6,
            target_spatial: &c.ts,
            cond_spatial: &c.cs,
            day_phase: None,
        };
        let out = den.forward(&t, &p, t.constant(c.y.clone()), t.constant(c.h.clone()), &[1, 9], &ctx).unwrap();
        assert_eq!(t.shape(out.eps), (12, 12));
        let tokens = 6 * (1 + 1);
        assert_eq!(t.attention_probs(out.self_attention[0]).unwrap().len(), 2 * 4 * tokens * tokens);
    }

    #[test]
    fn transformer_ablation_has_comparable_size() {
        let sh = shapes(12, 1, 64);
        let tga = Denoiser::new(DenoiserConfig::default(), sh, &mut rng_from_seed(0)).unwrap();
        let tf = Denoiser::new(
            DenoiserConfig {
                kind: DenoiserKind::FullAttention,
                ..Default::default()
            },
            sh,
            &mut rng_from_seed(0),
        )
        .unwrap();
        let ratio = tf.n_params() as f64 / tga.n_params() as f64;
        assert!((ratio - 1.0).abs() <= 0.1, "tf/tga parameter ratio {ratio}");
    }

    #[test]
    fn mismatched_shapes_are_contract_errors() {
        let sh = shapes(12, 1, 8);
        let den = Denoiser::new(small_cfg(DenoiserKind::Tga), sh, &mut rng_from_seed(21)).unwrap();
        let c = case(22, 1, 4, 4, sh, 3);
        let t = Tape::new();
        let p = den.store.bind(&t, false);
        let ctx = DenoiseContext {
            blocks: 1,
            target_nodes: 4,
            cond_nodes: 4,
            target_spatial: &c.ts,
            cond_spatial: &c.cs,
            day_phase: None,
        };
        let bad_y = t.constant(Mat::zeros((4, 11)));
        assert!(matches!(
            den.forward(&t, &p, bad_y, t.constant(c.h.clone()), &[1], &ctx),
            Err(UstdError::Contract(_))
        ));
        let short = Mat::zeros((3, 3));
        let ctx2 = DenoiseContext {
            target_spatial: &short,
            ..ctx
        };
        assert!(matches!(
            den.forward(&t, &p, t.constant(c.y.clone()), t.constant(c.h.clone()), &[1], &ctx2),
            Err(UstdError::Contract(_))
        ));
    }

    #[test]
    fn padded_spatial_features() {
        let emb = SpatialEmbedding {
            vectors: Mat::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64),
            eigenvalues: vec![0.5, 1.0],
        };
        let f = spatial_features(&emb, &[2, 0], 4);
        assert_eq!(f, ndarray::array![[4.0, 5.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn noise_shape_matches_target_shape(
            kind in prop_oneof![Just(DenoiserKind::Tga), Just(DenoiserKind::Sga), Just(DenoiserKind::FullAttention)],
            blocks in 1usize..3,
            targets in 1usize..5,
            extra in 0usize..3,
            steps in 1usize..6,
            d_y in 1usize..3,
            tokens in 1usize..4,
            seed in 0u64..100,
        ) {
            let conds = if kind == DenoiserKind::Tga { targets } else { targets + extra };
            let sh = DenoiserShapes { target_steps: steps, target_dim: d_y, cond_tokens: tokens, cond_dim: 5 };
            let den = Denoiser::new(small_cfg(kind), sh, &mut rng_from_seed(seed)).unwrap();
            let c = case(seed + 1, blocks, targets, conds, sh, 3);
            let ks: Vec<usize> = (0..blocks).map(|b| b + 1).collect();
            let eps = run(&den, &c, &ks);
            prop_assert_eq!(eps.dim(), c.y.dim());
        }
    }
}
