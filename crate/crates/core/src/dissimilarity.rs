//! Pairwise dissimilarities from features, point clouds and graphs.
//!
//! Everything here produces dense matrices. Geodesic distances follow the
//! Isomap recipe: a symmetrised k-nearest-neighbour graph followed by
//! all-pairs shortest paths.

use nalgebra::DMatrix;
use petgraph::graph::{NodeIndex, UnGraph};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Dense data matrix, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(invalid("feature matrix must have at least one row and one column"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(invalid(format!("non-finite feature at row {r}, column {c}")));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(invalid("ragged feature rows"));
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Square, symmetric, nonnegative matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityMatrix(DMatrix<f64>);

impl DissimilarityMatrix {
    /// Validates and exactly symmetrises `values` (entries may disagree with
    /// their transpose by at most 1e-12 relative).
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n == 0 || values.ncols() != n {
            return Err(invalid(format!(
                "dissimilarity matrix must be square and non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        let mut values = values;
        for i in 0..n {
            if values[(i, i)] != 0.0 {
                return Err(invalid(format!("nonzero diagonal entry at {i}")));
            }
            for j in (i + 1)..n {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
                    return Err(invalid(format!("entry ({i}, {j}) must be finite and nonnegative")));
                }
                if !nearly_equal(a, b) {
                    return Err(invalid(format!("asymmetric entries at ({i}, {j}): {a} vs {b}")));
                }
                let m = if a == b { a } else { 0.5 * (a + b) };
                values[(i, j)] = m;
                values[(j, i)] = m;
            }
        }
        Ok(Self(values))
    }

    pub(crate) fn from_symmetric_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Entrywise multiple, `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("scale factor must be positive and finite, got {c}")));
        }
        Ok(Self(&self.0 * c))
    }

    /// Mean over the n(n-1) off-diagonal entries; `None` for n = 1.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.size();
        if n < 2 {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                sum += self.0[(i, j)];
            }
        }
        Some(2.0 * sum / (n * (n - 1)) as f64)
    }
}

/// Symmetric nonnegative weight matrix. Diagonal entries are ignored by
/// every consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n == 0 || values.ncols() != n {
            return Err(invalid("weight matrix must be square and non-empty"));
        }
        for i in 0..n {
            for j in i..n {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                if !a.is_finite() || a < 0.0 {
                    return Err(invalid(format!("weight ({i}, {j}) must be finite and nonnegative")));
                }
                if !nearly_equal(a, b) {
                    return Err(invalid(format!("asymmetric weights at ({i}, {j})")));
                }
            }
        }
        Ok(Self(values))
    }

    pub(crate) fn from_symmetric_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// Undirected edge, stored once with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub length: f64,
}

/// Undirected weighted graph on nodes `0..n`.
///
/// Each undirected edge is stored once (`i < j`); the edge relation is
/// symmetric by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl NeighborGraph {
    /// Builds a graph from (i, j, length) triples. Both orientations of an
    /// edge may be listed as long as the lengths agree.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut out: Vec<Edge> = Vec::new();
        for (a, b, length) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                return Err(invalid(format!("self-loop at node {a}")));
            }
            if !(length.is_finite() && length >= 0.0) {
                return Err(invalid(format!("edge ({a}, {b}) has invalid length {length}")));
            }
            out.push(Edge { i: a.min(b), j: a.max(b), length });
        }
        out.sort_by_key(|e| (e.i, e.j));
        let mut dedup: Vec<Edge> = Vec::with_capacity(out.len());
        for e in out {
            match dedup.last() {
                Some(last) if last.i == e.i && last.j == e.j => {
                    if last.length != e.length {
                        return Err(invalid(format!(
                            "edge ({}, {}) listed with lengths {} and {}",
                            e.i, e.j, last.length, e.length
                        )));
                    }
                }
                _ => dedup.push(e),
            }
        }
        Ok(Self { n, edges: dedup })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (i, j) = (a.min(b), a.max(b));
        self.edges.binary_search_by(|e| (e.i, e.j).cmp(&(i, j))).is_ok()
    }

    fn component_count(&self) -> usize {
        let mut uf = UnionFind::<usize>::new(self.n);
        for e in &self.edges {
            uf.union(e.i, e.j);
        }
        let mut labels = uf.into_labeling();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }
}

/// Edge length used when turning an adjacency matrix into distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EdgeLength {
    /// Every edge has length 1.
    #[default]
    Hop,
    /// Edge (i, j) has length `1 / adj[i][j]`.
    InverseWeight,
}

pub fn pairwise_euclidean(x: &FeatureMatrix) -> Result<DissimilarityMatrix> {
    // Columns of the transpose are samples, contiguous in memory.
    let xt = x.as_matrix().transpose();
    let n = xt.ncols();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = xt.column(i);
            (0..n)
                .map(|j| {
                    if j <= i {
                        return 0.0;
                    }
                    let xj = xt.column(j);
                    xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rows[i][j];
            if !v.is_finite() {
                return Err(invalid(format!("distance ({i}, {j}) overflowed")));
            }
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DissimilarityMatrix(d))
}

/// Symmetrised (union) k-nearest-neighbour graph. Ties are broken by the
/// lower index.
pub fn knn_graph(d: &DissimilarityMatrix, k: usize) -> Result<NeighborGraph> {
    let n = d.size();
    if k == 0 || k >= n {
        return Err(invalid(format!("k must satisfy 1 <= k < n (k = {k}, n = {n})")));
    }
    let m = d.as_matrix();
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| m[(i, a)].total_cmp(&m[(i, b)]).then(a.cmp(&b)));
        edges.extend(order.iter().take(k).map(|&j| (i, j, m[(i, j)])));
    }
    NeighborGraph::new(n, edges)
}

/// All-pairs shortest paths over an undirected edge list; errors when some
/// pair is unreachable.
fn all_pairs_shortest_paths(n: usize, edges: &[Edge]) -> Result<DMatrix<f64>> {
    let mut graph = UnGraph::<(), f64, u32>::with_capacity(n, edges.len());
    for _ in 0..n {
        graph.add_node(());
    }
    for e in edges {
        graph.add_edge(NodeIndex::new(e.i), NodeIndex::new(e.j), e.length);
    }
    let components = petgraph::algo::connected_components(&graph);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let reach = petgraph::algo::dijkstra(&graph, NodeIndex::new(s), None, |e| *e.weight());
            let mut row = vec![f64::INFINITY; n];
            for (node, dist) in reach {
                row[node.index()] = dist;
            }
            row
        })
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            // Summation order along equal-length paths can differ by an ulp.
            let v = rows[i][j].min(rows[j][i]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Shortest-path (geodesic) distances on `g`.
///
/// When the graph is disconnected and `bridge` is given, the closest pair of
/// components (by the entries of `bridge`) is joined with a single edge,
/// repeatedly, until the graph is connected.
pub fn geodesic_distances(g: &NeighborGraph, bridge: Option<&DissimilarityMatrix>) -> Result<DissimilarityMatrix> {
    let n = g.node_count();
    let mut edges = g.edges().to_vec();
    let components = g.component_count();
    if components > 1 {
        let Some(base) = bridge else {
            return Err(Error::DisconnectedGraph { components });
        };
        if base.size() != n {
            return Err(invalid("bridging dissimilarity size does not match graph"));
        }
        edges.extend(bridge_components(n, &edges, base));
    }
    all_pairs_shortest_paths(n, &edges).map(DissimilarityMatrix)
}

fn bridge_components(n: usize, edges: &[Edge], base: &DissimilarityMatrix) -> Vec<Edge> {
    let mut uf = UnionFind::<usize>::new(n);
    for e in edges {
        uf.union(e.i, e.j);
    }
    let m = base.as_matrix();
    let mut added = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if uf.equiv(i, j) {
                    continue;
                }
                let v = m[(i, j)];
                if best.is_none_or(|(b, _, _)| v < b) {
                    best = Some((v, i, j));
                }
            }
        }
        let Some((length, i, j)) = best else { break };
        log::debug!("bridging components via ({i}, {j}) length {length}");
        uf.union(i, j);
        added.push(Edge { i, j, length });
    }
    added
}

/// Isomap-style geodesic distances: k-NN graph then shortest paths.
pub fn isomap_distances(d: &DissimilarityMatrix, k: usize, connect: bool) -> Result<DissimilarityMatrix> {
    let g = knn_graph(d, k)?;
    geodesic_distances(&g, connect.then_some(d))
}

/// Divides every entry by the mean off-diagonal entry.
pub fn rescale_by_mean(d: &DissimilarityMatrix) -> Result<DissimilarityMatrix> {
    let mean =
        d.off_diagonal_mean().ok_or_else(|| Error::DegenerateInput("need at least two points to rescale".into()))?;
    if mean <= 0.0 {
        return Err(Error::DegenerateInput("all off-diagonal dissimilarities are zero".into()));
    }
    Ok(DissimilarityMatrix(d.as_matrix() / mean))
}

/// `D^{-1/2} A D^{-1/2}` for an undirected edge list. Missing weights
/// should be passed as 1. Repeated edges overwrite each other.
pub fn normalized_adjacency(edges: &[(usize, usize, f64)], n: usize) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(i, j, w) in edges {
        if i >= n || j >= n {
            return Err(invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(invalid(format!("self-loop at node {i}")));
        }
        if !(w.is_finite() && w > 0.0) {
            return Err(invalid(format!("edge ({i}, {j}) has non-positive weight {w}")));
        }
        a[(i, j)] = w;
        a[(j, i)] = w;
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    if let Some(isolated) = degree.iter().position(|&d| d == 0.0) {
        return Err(invalid(format!("node {isolated} is isolated")));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| a[(i, j)] * inv_sqrt[i] * inv_sqrt[j]))
}

/// Shortest-path distances over the nonzero pattern of `adj`.
pub fn graph_dissimilarity(adj: &DMatrix<f64>, mode: EdgeLength) -> Result<DissimilarityMatrix> {
    let n = adj.nrows();
    if n == 0 || adj.ncols() != n {
        return Err(invalid("adjacency must be square and non-empty"));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (adj[(i, j)], adj[(j, i)]);
            if !a.is_finite() || a < 0.0 || !nearly_equal(a, b) {
                return Err(invalid(format!("adjacency entry ({i}, {j}) invalid or asymmetric")));
            }
            if a > 0.0 {
                let length = match mode {
                    EdgeLength::Hop => 1.0,
                    EdgeLength::InverseWeight => 1.0 / a,
                };
                edges.push(Edge { i, j, length });
            }
        }
    }
    all_pairs_shortest_paths(n, &edges).map(DissimilarityMatrix)
}

/// `w_ij = d_ij^(-exponent)` off the diagonal, zero on it.
pub fn power_weight_matrix(d: &DissimilarityMatrix, exponent: f64) -> Result<WeightMatrix> {
    let n = d.size();
    let m = d.as_matrix();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m[(i, j)];
            if v <= 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "zero dissimilarity between {i} and {j}; deduplicate points first"
                )));
            }
            let wij = v.powf(-exponent);
            if !wij.is_finite() {
                return Err(Error::DegenerateInput(format!("weight ({i}, {j}) overflowed")));
            }
            w[(i, j)] = wij;
            w[(j, i)] = wij;
        }
    }
    Ok(WeightMatrix(w))
}

/// `1/n²` off the diagonal.
pub fn uniform_weight_matrix(n: usize) -> WeightMatrix {
    let v = 1.0 / (n * n) as f64;
    WeightMatrix(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v }))
}
