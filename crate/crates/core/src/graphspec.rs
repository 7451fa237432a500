//! Adjacency graph over road-segment locations.
//!
//! One graph covers all GCT nodes; camera nodes reuse the row of the segment
//! they are mapped to.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flowdata::RoadSegment;

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    node_ids: Vec<String>,
    /// Row-major `[N x N]`.
    weights: Vec<f64>,
    self_loops: bool,
}

/// Great-circle distance in metres (haversine).
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

impl GraphSpec {
    pub const DEFAULT_SIGMA_M: f64 = 1000.0;
    pub const DEFAULT_THRESHOLD: f64 = 0.1;

    pub fn new(node_ids: Vec<String>, weights: Vec<f64>, self_loops: bool) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 || weights.len() != n * n {
            return Err(Error::InvalidData(format!(
                "graph needs an N x N weight matrix, got {} weights for {n} nodes",
                weights.len()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidData(format!(
                "negative or non-finite weight {} at ({}, {})",
                weights[k],
                k / n,
                k % n
            )));
        }
        if self_loops && (0..n).any(|i| weights[i * n + i] != 1.0) {
            return Err(Error::InvalidData("self-loop weights must be 1".into()));
        }
        Ok(GraphSpec {
            node_ids,
            weights,
            self_loops,
        })
    }

    /// Identity graph (self-loops only).
    pub fn identity(node_ids: Vec<String>) -> Self {
        let n = node_ids.len();
        let weights = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        GraphSpec {
            node_ids,
            weights,
            self_loops: true,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n_nodes() + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    /// Errors unless node order matches `expected` exactly.
    pub fn check_order(&self, expected: &[String]) -> Result<()> {
        if self.node_ids != expected {
            return Err(Error::InvalidData(format!(
                "graph node order {:?} differs from flow node order {:?}",
                self.node_ids, expected
            )));
        }
        Ok(())
    }

    /// Gaussian kernel `exp(-d²/σ²)` on haversine distance, pruned below
    /// `threshold`, with unit self-loops.
    pub fn build_distance_graph(segments: &[RoadSegment], sigma_m: f64, threshold: f64) -> Result<Self> {
        if segments.len() < 2 {
            return Err(Error::Config("distance graph needs at least 2 segments".into()));
        }
        if !(sigma_m > 0.0) {
            return Err(Error::Config(format!("sigma_m must be positive, got {sigma_m}")));
        }
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1], got {threshold}")));
        }
        let n = segments.len();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
            for j in i + 1..n {
                let (a, b) = (&segments[i], &segments[j]);
                let d = haversine_m(a.center_lat, a.center_lon, b.center_lat, b.center_lon);
                if d == 0.0 {
                    log::warn!("segments {} and {} share coordinates", a.segment_id, b.segment_id);
                }
                let w = (-(d * d) / (sigma_m * sigma_m)).exp();
                let w = if w < threshold { 0.0 } else { w };
                weights[i * n + j] = w;
                weights[j * n + i] = w;
            }
        }
        GraphSpec::new(
            segments.iter().map(|s| s.segment_id.to_string()).collect(),
            weights,
            true,
        )
    }

    /// Loads `adjacency.csv`: a header of node ids, then N rows of N floats.
    pub fn load_adjacency(path: &Path, node_ids: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::parse(path.display().to_string(), "empty adjacency file"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if header != node_ids {
            return Err(Error::InvalidData(format!(
                "adjacency header order {header:?} differs from flow node order {node_ids:?}"
            )));
        }
        let n = header.len();
        let mut weights = Vec::with_capacity(n * n);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').map(str::trim).collect();
            if vals.len() != n {
                return Err(Error::InvalidData(format!(
                    "adjacency row {} has {} entries, expected {n} (matrix must be square)",
                    i + 1,
                    vals.len()
                )));
            }
            for (j, v) in vals.iter().enumerate() {
                let w: f64 = v.parse().map_err(|_| {
                    Error::parse(format!("{} row {}, column {}", path.display(), i + 1, j + 1), "not a number")
                })?;
                weights.push(w);
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::InvalidData(format!(
                "adjacency has {rows} rows for {n} header ids (matrix must be square)"
            )));
        }
        let self_loops = (0..n).all(|i| weights[i * n + i] == 1.0);
        GraphSpec::new(header, weights, self_loops)
    }

    pub fn to_csv(&self) -> String {
        let n = self.n_nodes();
        let mut s = self.node_ids.join(",");
        s.push('\n');
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.weight(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Row-stochastic copy. Rows must have positive sums.
    pub fn row_normalize(&self) -> Result<GraphSpec> {
        let n = self.n_nodes();
        let mut w = self.weights.clone();
        for i in 0..n {
            let row = &mut w[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::InvalidData(format!("row {i} of the graph sums to zero")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(GraphSpec {
            node_ids: self.node_ids.clone(),
            weights: w,
            self_loops: false,
        })
    }

    /// Sub-graph on `nodes`, in the given order.
    pub fn subgraph(&self, nodes: &[usize]) -> GraphSpec {
        let m = nodes.len();
        let mut w = Vec::with_capacity(m * m);
        for &i in nodes {
            for &j in nodes {
                w.push(self.weight(i, j));
            }
        }
        GraphSpec {
            node_ids: nodes.iter().map(|&i| self.node_ids[i].clone()).collect(),
            weights: w,
            self_loops: self.self_loops,
        }
    }

    /// Same graph with nodes reordered: new node `k` is old node `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> GraphSpec {
        self.subgraph(perm)
    }
}
