//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix. Higher-rank tensors are
//! carried in a flattened row layout (for spatio-temporal data the rows are
//! ordered `(batch, node, time)`), which keeps every op a plain matrix op.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Abs(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Propagate {
        x: Var,
        adj: Arc<Mat>,
        blocks: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    /// Softmax weights of an attention node, `[group][head][query][key]`.
    probs: Option<Vec<f64>>,
}

/// Records a computation for later differentiation.
///
/// Ops take `&self`; the node list lives behind a `RefCell` so model code can
/// thread a shared reference through nested layers.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every tape node that needs them.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    m.dim()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            probs: None,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.nodes.borrow();
        let m = &n[v.0].value;
        assert_eq!(m.len(), 1, "scalar() on a {:?} value", m.dim());
        m[[0, 0]]
    }

    /// Softmax weights recorded by an attention node, laid out
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].probs.clone()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            assert_eq!(
                av.ncols(),
                bv.nrows(),
                "matmul {:?} x {:?}",
                av.dim(),
                bv.dim()
            );
            av.dot(bv)
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "add shape mismatch");
            av + bv
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let (av, rv) = (&n[a.0].value, &n[row.0].value);
            assert_eq!(rv.nrows(), 1, "add_row expects a single row");
            assert_eq!(av.ncols(), rv.ncols(), "add_row width mismatch");
            av + rv
        };
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "sub shape mismatch");
            av - bv
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "mul shape mismatch");
            av * bv
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a fixed matrix.
    pub fn mul_const(&self, a: Var, c: Mat) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let av = &n[a.0].value;
            assert_eq!(av.dim(), c.dim(), "mul_const shape mismatch");
            av * &c
        };
        let ng = self.needs(a);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = &*self.value(a) * c;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Row-major reshape; the element order is unchanged.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let av = &n[a.0].value;
            assert_eq!(av.len(), rows * cols, "reshape {:?} -> ({rows}, {cols})", av.dim());
            Mat::from_shape_vec((rows, cols), av.iter().copied().collect())
                .expect("reshape length checked")
        };
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Output row `i` is row `idx[i]` of `a`. Indices may repeat.
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let av = &n[a.0].value;
            let mut out = Mat::zeros((idx.len(), av.ncols()));
            for (dst, &src) in idx.iter().enumerate() {
                assert!(src < av.nrows(), "gather index {src} out of {} rows", av.nrows());
                out.row_mut(dst).assign(&av.row(src));
            }
            out
        };
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| n[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out.as_standard_layout().into_owned(), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| n[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch")
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out.as_standard_layout().into_owned(), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Graph propagation `adj · X_b` applied to each of `blocks` stacked
    /// node blocks. `x` has rows `(block, node, time)`; each block is viewed as
    /// `nodes x (time · channels)`.
    pub fn propagate(&self, x: Var, adj: Arc<Mat>, blocks: usize) -> Var {
        let out = {
            let n = self.nodes.borrow();
            let xv = &n[x.0].value;
            propagate_blocks(&adj, xv, blocks, false)
        };
        let ng = self.needs(x);
        self.push(out, Op::Propagate { x, adj, blocks }, ng)
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `(groups · lq) x d`, `k` and `v` are `(groups · lk) x d`. Group
    /// `g` attends only within its own rows. Heads split the `d` columns.
    pub fn attention(&self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (out, probs) = {
            let n = self.nodes.borrow();
            attention_forward(&n[q.0].value, &n[k.0].value, &n[v.0].value, groups, heads)
        };
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let var = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
            },
            ng,
        );
        self.nodes.borrow_mut()[var.0].probs = Some(probs);
        var
    }

    /// Row-wise layer normalization with affine `1 x c` parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (out, xhat, inv_std) = {
            let n = self.nodes.borrow();
            let (xv, g, b) = (&n[x.0].value, &n[gamma.0].value, &n[beta.0].value);
            let c = xv.ncols() as f64;
            let mut xhat = xv.clone();
            let mut inv_std = Vec::with_capacity(xv.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / c;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                let is = 1.0 / (var + EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) * is);
                inv_std.push(is);
            }
            let out = &xhat * g + b;
            (out, xhat, inv_std)
        };
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let count = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / count)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Mat| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                debug_assert_eq!(nodes[v.0].value.dim(), d.dim(), "grad shape for node {}", v.0);
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, r) => {
                    if nodes[r.0].needs_grad {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(*a, &g * val(*b));
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::MulConst(a, c) => acc(*a, &g * c),
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Silu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(*a, d);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= sign(x));
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let src = shape(val(*a));
                    let d = Mat::from_shape_vec(src, g.iter().copied().collect())
                        .expect("reshape grad length");
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Mat::zeros(shape(val(*a)));
                    for (src, &dst) in idx.iter().enumerate() {
                        let mut row = d.row_mut(dst);
                        row += &g.row(src);
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if nodes[p.0].needs_grad {
                            acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(shape(val(*a)));
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if nodes[p.0].needs_grad {
                            acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::Propagate { x, adj, blocks } => {
                    acc(*x, propagate_blocks(adj, &g, *blocks, true));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                } => {
                    let probs = node.probs.as_ref().expect("attention probs recorded");
                    let (dq, dk, dv) = attention_backward(
                        val(*q),
                        val(*k),
                        val(*v),
                        probs,
                        &g,
                        *groups,
                        *heads,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if nodes[beta.0].needs_grad {
                        acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if nodes[gamma.0].needs_grad {
                        acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if nodes[x.0].needs_grad {
                        let gam = val(*gamma);
                        let c = g.ncols() as f64;
                        let mut dx = &g * gam;
                        for ((mut row, xh), &is) in
                            dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            let sum_d = row.sum();
                            let sum_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut row).and(&xh).for_each(|d, &h| {
                                *d = is / c * (c * *d - sum_d - h * sum_dx);
                            });
                        }
                        acc(*x, dx);
                    }
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(*a, Mat::from_elem(shape(val(*a)), s));
                }
            }
        }
        Grads { grads }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn propagate_blocks(adj: &Mat, x: &Mat, blocks: usize, transpose: bool) -> Mat {
    let nodes = adj.nrows();
    assert_eq!(adj.ncols(), nodes, "adjacency must be square");
    let total = x.len();
    assert!(blocks > 0 && total % (blocks * nodes) == 0, "propagate: {:?} not divisible into {blocks} blocks of {nodes} nodes", x.dim());
    let width = total / (blocks * nodes);
    let xs = x.as_standard_layout();
    let data = xs.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(total);
    let a = if transpose { adj.t() } else { adj.view() };
    for b in 0..blocks {
        let chunk = &data[b * nodes * width..(b + 1) * nodes * width];
        let view = ArrayView2::from_shape((nodes, width), chunk).expect("block view");
        let y = a.dot(&view);
        out.extend(y.iter().copied());
    }
    Mat::from_shape_vec(x.dim(), out).expect("propagate output")
}

fn attention_forward(q: &Mat, k: &Mat, v: &Mat, groups: usize, heads: usize) -> (Mat, Vec<f64>) {
    let d = q.ncols();
    assert_eq!(k.ncols(), d, "attention key width");
    assert_eq!(v.ncols(), d, "attention value width");
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    assert!(groups > 0 && q.nrows() % groups == 0 && k.nrows() % groups == 0);
    assert_eq!(k.nrows(), v.nrows());
    let lq = q.nrows() / groups;
    let lk = k.nrows() / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(q.dim());
    let mut probs = vec![0.0; groups * heads * lq * lk];
    for g in 0..groups {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qg = q.slice(s![g * lq..(g + 1) * lq, cols.clone()]);
            let kg = k.slice(s![g * lk..(g + 1) * lk, cols.clone()]);
            let vg = v.slice(s![g * lk..(g + 1) * lk, cols.clone()]);
            let mut scores = qg.dot(&kg.t());
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| ((x - max) * scale).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            let o = scores.dot(&vg);
            out.slice_mut(s![g * lq..(g + 1) * lq, cols]).assign(&o);
            let base = (g * heads + h) * lq * lk;
            for (dst, &p) in probs[base..base + lq * lk].iter_mut().zip(scores.iter()) {
                *dst = p;
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &[f64],
    grad: &Mat,
    groups: usize,
    heads: usize,
) -> (Mat, Mat, Mat) {
    let d = q.ncols();
    let lq = q.nrows() / groups;
    let lk = k.nrows() / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(q.dim());
    let mut dk = Mat::zeros(k.dim());
    let mut dv = Mat::zeros(v.dim());
    for g in 0..groups {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qrows = g * lq..(g + 1) * lq;
            let krows = g * lk..(g + 1) * lk;
            let base = (g * heads + h) * lq * lk;
            let p = ArrayView2::from_shape((lq, lk), &probs[base..base + lq * lk]).expect("probs");
            let go = grad.slice(s![qrows.clone(), cols.clone()]);
            let vg = v.slice(s![krows.clone(), cols.clone()]);
            dv.slice_mut(s![krows.clone(), cols.clone()]).assign(&p.t().dot(&go));
            let dp = go.dot(&vg.t());
            let mut ds = Mat::zeros((lq, lk));
            for r in 0..lq {
                let dot: f64 = (0..lk).map(|c| dp[[r, c]] * p[[r, c]]).sum();
                for c in 0..lk {
                    ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                }
            }
            let kg = k.slice(s![krows.clone(), cols.clone()]);
            let qg = q.slice(s![qrows.clone(), cols.clone()]);
            dq.slice_mut(s![qrows, cols.clone()]).assign(&ds.dot(&kg));
            dk.slice_mut(s![krows, cols]).assign(&ds.t().dot(&qg));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // Small LCG keeps the tape tests free of RNG dependencies.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Mat::from_shape_fn((rows, cols), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central finite-difference check of d(loss)/d(input) for a graph built by `f`.
    fn check(inputs: Vec<Mat>, f: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (which, base) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Mat::zeros(base.dim()));
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == which {
                                m.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.leaf(m)
                        })
                        .collect();
                    let o = f(&t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                assert!(err < 1e-5, "input {which} idx {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        check(vec![rand_mat(3, 4, 1), rand_mat(4, 2, 2), rand_mat(1, 2, 3)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let a = t.tanh(m);
            let b = t.sigmoid(m);
            let c = t.mul(a, b);
            let d = t.silu(c);
            let e = t.sub(d, a);
            let r = t.scale(e, 1.7);
            let sq = t.mul(r, r);
            t.sum(sq)
        });
    }

    #[test]
    fn structural_op_grads() {
        check(vec![rand_mat(6, 3, 4), rand_mat(2, 3, 5)], |t, v| {
            let g = t.gather_rows(v[0], vec![5, 0, 0, 3]);
            let c = t.concat_rows(&[g, v[1]]);
            let cc = t.concat_cols(&[c, c]);
            let sl = t.slice_cols(cc, 2, 3);
            let r = t.reshape(sl, 3, 6);
            let a = t.abs(r);
            let m = t.mul_const(a, rand_mat(3, 6, 9));
            let sq = t.mul(m, r);
            t.mean(sq)
        });
    }

    #[test]
    fn propagate_and_layer_norm_grads() {
        let adj = Arc::new(rand_mat(3, 3, 7));
        check(vec![rand_mat(12, 2, 8), rand_mat(1, 2, 9), rand_mat(1, 2, 10)], move |t, v| {
            let p = t.propagate(v[0], adj.clone(), 2);
            let ln = t.layer_norm(p, v[1], v[2]);
            let w = t.mul(ln, p);
            t.sum(w)
        });
    }

    #[test]
    fn attention_grads() {
        check(
            vec![rand_mat(6, 4, 11), rand_mat(4, 4, 12), rand_mat(4, 4, 13)],
            |t, v| {
                let o = t.attention(v[0], v[1], v[2], 2, 2);
                let w = t.mul_const(o, rand_mat(6, 4, 14));
                t.sum(w)
            },
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let t = Tape::new();
        let q = t.constant(rand_mat(10, 8, 1));
        let k = t.constant(rand_mat(15, 8, 2));
        let v = t.constant(rand_mat(15, 8, 3));
        let o = t.attention(q, k, v, 5, 4);
        let p = t.attention_probs(o).unwrap();
        assert_eq!(p.len(), 5 * 4 * 2 * 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_matches_dense_product() {
        let adj = array![[0.5, 0.5], [0.25, 0.75]];
        let t = Tape::new();
        // one block, two nodes, two time steps, one channel
        let x = t.constant(array![[1.0], [2.0], [3.0], [4.0]]);
        let y = t.propagate(x, Arc::new(adj), 1);
        assert_eq!(*t.value(y), array![[2.0], [3.0], [2.5], [3.5]]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let a = t.constant(rand_mat(2, 2, 1));
        let b = t.leaf(rand_mat(2, 2, 2));
        let s = t.sum(t.matmul(a, b));
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
