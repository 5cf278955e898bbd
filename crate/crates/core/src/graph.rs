//! Sensor graphs: adjacency construction and normalization, per-iteration
//! subgraph sampling and Laplacian positional embeddings.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{input, Result, UstdError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    adjacency: Mat,
    coords: Option<Mat>,
    node_ids: Vec<String>,
}

impl Graph {
    /// Validates a square, finite, non-negative adjacency.
    pub fn new(adjacency: Mat, coords: Option<Mat>, node_ids: Option<Vec<String>>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c || r == 0 {
            return Err(UstdError::Shape(format!("adjacency must be square and non-empty, got {r}x{c}")));
        }
        if adjacency.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(input("adjacency entries must be finite and non-negative"));
        }
        if let Some(xy) = &coords {
            if xy.dim() != (r, 2) {
                return Err(UstdError::Shape(format!("coordinates must be {r}x2, got {:?}", xy.dim())));
            }
        }
        let node_ids = node_ids.unwrap_or_else(|| (0..r).map(|i| i.to_string()).collect());
        if node_ids.len() != r {
            return Err(UstdError::Shape(format!("{} node ids for {r} nodes", node_ids.len())));
        }
        Ok(Self {
            adjacency,
            coords,
            node_ids,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn coords(&self) -> Option<&Mat> {
        self.coords.as_ref()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Induced subgraph on `indices`, in the given order.
    pub fn induced(&self, indices: &[usize]) -> Result<Graph> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_nodes()) {
            return Err(input(format!("node index {bad} out of range for {} nodes", self.n_nodes())));
        }
        let adjacency = Mat::from_shape_fn((indices.len(), indices.len()), |(i, j)| {
            self.adjacency[[indices[i], indices[j]]]
        });
        let coords = self.coords.as_ref().map(|xy| {
            Mat::from_shape_fn((indices.len(), 2), |(i, j)| xy[[indices[i], j]])
        });
        let ids = indices.iter().map(|&i| self.node_ids[i].clone()).collect();
        Graph::new(adjacency, coords, Some(ids))
    }

    /// Reads a `src,dst,weight` edge list (0-indexed). Edges are mirrored so
    /// the adjacency is symmetric.
    pub fn read_edge_list(path: &Path, n_nodes: usize) -> Result<Graph> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, n_nodes)
    }

    pub fn parse_edge_list(text: &str, n_nodes: usize) -> Result<Graph> {
        if n_nodes == 0 {
            return Err(input("graph needs at least one node"));
        }
        let mut adj = Mat::zeros((n_nodes, n_nodes));
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(UstdError::Format(format!("edge list line {}: expected src,dst,weight", lineno + 1)));
            }
            let parsed = (fields[0].parse::<usize>(), fields[1].parse::<usize>(), fields[2].parse::<f64>());
            let (src, dst, w) = match parsed {
                (Ok(s), Ok(d), Ok(w)) => (s, d, w),
                // header row
                _ if lineno == 0 => continue,
                _ => {
                    return Err(UstdError::Format(format!("edge list line {}: unparsable '{line}'", lineno + 1)))
                }
            };
            if src >= n_nodes || dst >= n_nodes {
                return Err(UstdError::Format(format!(
                    "edge list line {}: node index out of range for {n_nodes} nodes",
                    lineno + 1
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(UstdError::Format(format!("edge list line {}: invalid weight {w}", lineno + 1)));
            }
            adj[[src, dst]] = w;
            adj[[dst, src]] = adj[[dst, src]].max(w);
        }
        Graph::new(adj, None, None)
    }

    pub fn with_coords(mut self, coords: Mat) -> Result<Graph> {
        if coords.dim() != (self.n_nodes(), 2) {
            return Err(UstdError::Shape(format!(
                "coordinates must be {}x2, got {:?}",
                self.n_nodes(),
                coords.dim()
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }
}

/// Parses a `node_id,x,y` coordinate table. Returns ids and an `N x 2` matrix.
pub fn parse_coords(text: &str) -> Result<(Vec<String>, Mat)> {
    let mut ids = Vec::new();
    let mut xy = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(UstdError::Format(format!("coords line {}: expected node_id,x,y", lineno + 1)));
        }
        match (fields[1].parse::<f64>(), fields[2].parse::<f64>()) {
            (Ok(x), Ok(y)) => {
                ids.push(fields[0].to_string());
                xy.push(x);
                xy.push(y);
            }
            _ if lineno == 0 => continue,
            _ => return Err(UstdError::Format(format!("coords line {}: unparsable '{line}'", lineno + 1))),
        }
    }
    if ids.is_empty() {
        return Err(UstdError::Format("coordinate file has no rows".into()));
    }
    let n = ids.len();
    Ok((ids, Mat::from_shape_vec((n, 2), xy).expect("two values per row")))
}

/// Standard deviation of all pairwise distances, the default kernel width.
pub fn pairwise_distance_std(coords: &Mat) -> f64 {
    let n = coords.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist(coords, i, j));
        }
    }
    if d.len() < 2 {
        return 1.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

fn dist(coords: &Mat, i: usize, j: usize) -> f64 {
    let dx = coords[[i, 0]] - coords[[j, 0]];
    let dy = coords[[i, 1]] - coords[[j, 1]];
    (dx * dx + dy * dy).sqrt()
}

/// Thresholded Gaussian kernel: `exp(-d^2 / sigma^2)` where that exceeds
/// `epsilon`, zero elsewhere and on the diagonal.
pub fn build_adjacency_from_coords(coords: &Mat, sigma: f64, epsilon: f64) -> Result<Graph> {
    if coords.ncols() != 2 || coords.nrows() == 0 {
        return Err(UstdError::Shape(format!("coordinates must be Nx2, got {:?}", coords.dim())));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(input("coordinates must be finite"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(input(format!("kernel width must be positive, got {sigma}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(input(format!("threshold must lie in [0,1), got {epsilon}")));
    }
    let n = coords.nrows();
    let adj = Mat::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 0.0;
        }
        let d = dist(coords, i, j);
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w > epsilon {
            w
        } else {
            0.0
        }
    });
    Graph::new(adj, Some(coords.clone()), None)
}

/// Renormalized propagation matrix `D^-1/2 (A + I) D^-1/2`, with `D` the
/// degree matrix of `A + I`.
pub fn normalize_adjacency(graph: &Graph) -> Mat {
    let n = graph.n_nodes();
    let a = graph.adjacency() + &Array2::<f64>::eye(n);
    let inv_sqrt: Array1<f64> = a.sum_axis(ndarray::Axis(1)).mapv(|d| 1.0 / d.sqrt());
    Mat::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * a[[i, j]] * inv_sqrt[j])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSample {
    pub kept_indices: Vec<usize>,
    pub adjacency: Mat,
}

impl SubgraphSample {
    pub fn graph(&self, parent: &Graph) -> Result<Graph> {
        parent.induced(&self.kept_indices)
    }
}

/// Number of nodes kept at sampling `rate`.
pub fn sampled_count(n: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(input(format!("sampling rate must lie in (0,1], got {rate}")));
    }
    let k = ((rate * n as f64).round() as usize).min(n);
    if k == 0 {
        return Err(input(format!("sampling rate {rate} keeps no node of {n}")));
    }
    Ok(k)
}

/// Uniform node sampling without replacement.
pub fn sample_subgraph<R: Rng + ?Sized>(graph: &Graph, rate: f64, rng: &mut R) -> Result<SubgraphSample> {
    let n = graph.n_nodes();
    let k = sampled_count(n, rate)?;
    let mut kept: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    };
    kept.sort_unstable();
    let adjacency = Mat::from_shape_fn((k, k), |(i, j)| graph.adjacency()[[kept[i], kept[j]]]);
    Ok(SubgraphSample {
        kept_indices: kept,
        adjacency,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialEmbedding {
    /// `N x d_s`, one eigenvector per column.
    pub vectors: Mat,
    pub eigenvalues: Vec<f64>,
}

impl SpatialEmbedding {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Independently flips the sign of each column.
    pub fn sign_flipped<R: Rng + ?Sized>(&self, rng: &mut R) -> SpatialEmbedding {
        let mut vectors = self.vectors.clone();
        for mut col in vectors.columns_mut() {
            if rng.random_bool(0.5) {
                col.mapv_inplace(|v| -v);
            }
        }
        SpatialEmbedding {
            vectors,
            eigenvalues: self.eigenvalues.clone(),
        }
    }
}

/// Symmetric normalized Laplacian `I - D^-1/2 (A + I) D^-1/2`.
pub fn normalized_laplacian(graph: &Graph) -> Mat {
    let n = graph.n_nodes();
    Array2::<f64>::eye(n) - normalize_adjacency(graph)
}

/// The `d_s` eigenvectors of the normalized Laplacian with smallest
/// eigenvalues after the first (trivial) one. Columns are sign-normalized so
/// their largest-magnitude entry is positive.
pub fn laplacian_embedding(graph: &Graph, d_s: usize) -> Result<SpatialEmbedding> {
    let n = graph.n_nodes();
    if d_s == 0 || d_s >= n {
        return Err(input(format!("embedding size {d_s} must lie in [1, {n})")));
    }
    let lap = normalized_laplacian(graph);
    // symmetrize against round-off before the dense eigensolve
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (lap[[i, j]] + lap[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let chosen = &order[1..=d_s];
    let mut vectors = Mat::zeros((n, d_s));
    let mut eigenvalues = Vec::with_capacity(d_s);
    for (c, &idx) in chosen.iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[[r, c]] = s * col[r];
        }
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(SpatialEmbedding { vectors, eigenvalues })
}
