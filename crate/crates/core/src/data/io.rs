//! Signal container and dataset loading.
//!
//! Binary signals: an ASCII header line `USTD1 N T d` followed by `N*T*d`
//! little-endian `f32` values in row-major `(node, step, channel)` order.
//! CSV fallback: `node,t,channel,value` rows. A JSON sidecar `<file>.meta.json`
//! carries granularity, attribute and units.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{SeriesMeta, SignalSeries};
use crate::error::{Result, UstdError};
use crate::graph::{build_adjacency_from_coords, pairwise_distance_std, parse_coords, Graph};

const MAGIC: &str = "USTD1";

pub fn meta_path(signals: &Path) -> PathBuf {
    let mut s = signals.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_signals(path: &Path, values: &Array3<f64>, meta: &SeriesMeta) -> Result<()> {
    let (n, t, d) = values.dim();
    let mut buf = Vec::with_capacity(32 + values.len() * 4);
    writeln!(buf, "{MAGIC} {n} {t} {d}")?;
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    let meta_json = serde_json::to_string_pretty(meta).map_err(|e| UstdError::Format(e.to_string()))?;
    fs::write(meta_path(path), meta_json)?;
    Ok(())
}

/// Reads a signals file in either container or CSV form, plus its sidecar
/// when present.
pub fn read_signals(path: &Path) -> Result<SignalSeries> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(UstdError::Format(format!("{} is empty", path.display())));
    }
    let values = if bytes.starts_with(MAGIC.as_bytes()) {
        parse_container(&bytes)?
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| UstdError::Format(format!("{} is neither a container nor UTF-8 CSV", path.display())))?;
        parse_csv(text)?
    };
    let meta = match fs::read_to_string(meta_path(path)) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| UstdError::Format(format!("metadata: {e}")))?,
        Err(_) => SeriesMeta::default(),
    };
    SignalSeries::new(values, meta)
}

fn parse_container(bytes: &[u8]) -> Result<Array3<f64>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| UstdError::Format("container header is not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| UstdError::Format("bad header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(UstdError::Format(format!("bad container header '{header}'")));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UstdError::Format(format!("bad container header '{header}'")))?;
    let (n, t, d) = (dims[0], dims[1], dims[2]);
    if n == 0 || t == 0 || d == 0 {
        return Err(UstdError::Format(format!("container declares an empty array {n}x{t}x{d}")));
    }
    let body = &bytes[nl + 1..];
    let expected = n * t * d * 4;
    if body.len() != expected {
        return Err(UstdError::Format(format!(
            "container declares {n}x{t}x{d} ({expected} bytes) but holds {} bytes",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array3::from_shape_vec((n, t, d), data).expect("length checked"))
}

fn parse_csv(text: &str) -> Result<Array3<f64>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(UstdError::Format(format!("signals line {}: expected node,t,channel,value", lineno + 1)));
        }
        let parsed = (f[0].parse::<usize>(), f[1].parse::<usize>(), f[2].parse::<usize>());
        match parsed {
            (Ok(n), Ok(t), Ok(c)) => {
                let v = if f[3].is_empty() || f[3].eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    f[3].parse::<f64>()
                        .map_err(|_| UstdError::Format(format!("signals line {}: bad value '{}'", lineno + 1, f[3])))?
                };
                rows.push((n, t, c, v));
            }
            _ if lineno == 0 => continue,
            _ => return Err(UstdError::Format(format!("signals line {}: unparsable '{line}'", lineno + 1))),
        }
    }
    if rows.is_empty() {
        return Err(UstdError::Format("signals CSV has no rows".into()));
    }
    let n = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let t = rows.iter().map(|r| r.1).max().unwrap() + 1;
    let d = rows.iter().map(|r| r.2).max().unwrap() + 1;
    let mut values = Array3::from_elem((n, t, d), f64::NAN);
    for (i, s, c, v) in rows {
        values[[i, s, c]] = v;
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdjacencySource {
    /// `src,dst,weight` edge list.
    EdgeList { path: PathBuf },
    /// `node_id,x,y` table turned into a thresholded Gaussian kernel graph.
    Coords {
        path: PathBuf,
        sigma: Option<f64>,
        epsilon: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub adjacency: AdjacencySource,
    /// Optional coordinates attached to an edge-list graph.
    pub coords: Option<PathBuf>,
}

pub fn load_dataset(signals: &Path, config: &LoadConfig) -> Result<(Graph, SignalSeries)> {
    let series = read_signals(signals)?;
    let graph = match &config.adjacency {
        AdjacencySource::EdgeList { path } => {
            let text = fs::read_to_string(path)?;
            if text.trim().is_empty() {
                return Err(UstdError::Format(format!("{} is empty", path.display())));
            }
            Graph::parse_edge_list(&text, series.n_nodes())?
        }
        AdjacencySource::Coords { path, sigma, epsilon } => {
            let (ids, xy) = parse_coords(&fs::read_to_string(path)?)?;
            check_nodes(series.n_nodes(), ids.len())?;
            let sigma = sigma.unwrap_or_else(|| pairwise_distance_std(&xy));
            let g = build_adjacency_from_coords(&xy, sigma, *epsilon)?;
            Graph::new(g.adjacency().clone(), Some(xy), Some(ids))?
        }
    };
    let graph = match &config.coords {
        Some(path) if graph.coords().is_none() => {
            let (_, xy) = parse_coords(&fs::read_to_string(path)?)?;
            check_nodes(series.n_nodes(), xy.nrows())?;
            graph.with_coords(xy)?
        }
        _ => graph,
    };
    check_nodes(series.n_nodes(), graph.n_nodes())?;
    Ok((graph, series))
}

fn check_nodes(signal_nodes: usize, graph_nodes: usize) -> Result<()> {
    if signal_nodes != graph_nodes {
        return Err(UstdError::Format(format!(
            "signals have {signal_nodes} nodes but the graph has {graph_nodes}"
        )));
    }
    Ok(())
}

pub fn write_edge_list(path: &Path, graph: &Graph) -> Result<()> {
    let mut out = String::from("src,dst,weight\n");
    let a = graph.adjacency();
    for i in 0..graph.n_nodes() {
        for j in 0..graph.n_nodes() {
            if a[[i, j]] != 0.0 {
                out.push_str(&format!("{i},{j},{}\n", a[[i, j]]));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_coords(path: &Path, graph: &Graph) -> Result<()> {
    let xy = graph
        .coords()
        .ok_or_else(|| UstdError::Input("graph has no coordinates".into()))?;
    let mut out = String::from("node_id,x,y\n");
    for (i, id) in graph.node_ids().iter().enumerate() {
        out.push_str(&format!("{id},{},{}\n", xy[[i, 0]], xy[[i, 1]]));
    }
    fs::write(path, out)?;
    Ok(())
}
