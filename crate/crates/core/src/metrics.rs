//! Alignment and transfer metrics.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{invalid, Result};
use crate::smacof::Embedding;
use crate::transport::Coupling;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    embedding: Embedding,
    labels: Vec<i64>,
}

impl LabeledEmbedding {
    pub fn new(embedding: Embedding, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != embedding.nrows() {
            return Err(invalid(format!("{} labels for {} rows", labels.len(), embedding.nrows())));
        }
        Ok(Self { embedding, labels })
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }
}

/// Binary `n × n'` matrix of true correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMatch {
    pairs: DMatrix<u8>,
}

impl GroundTruthMatch {
    pub fn new(pairs: DMatrix<u8>) -> Result<Self> {
        if pairs.iter().any(|&v| v > 1) {
            return Err(invalid("ground truth entries must be 0 or 1"));
        }
        Ok(Self { pairs })
    }

    /// Row `i` matches column `perm[i]`.
    pub fn from_permutation(perm: &[usize]) -> Result<Self> {
        Self::from_pairs(perm.len(), perm.len(), perm.iter().copied().enumerate())
    }

    pub fn from_pairs(n: usize, m: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut mat = DMatrix::zeros(n, m);
        for (i, j) in pairs {
            if i >= n || j >= m {
                return Err(invalid(format!("pair ({i}, {j}) out of range for {n}x{m}")));
            }
            mat[(i, j)] = 1;
        }
        Ok(Self { pairs: mat })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pairs.shape()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs[(i, j)] == 1
    }

    /// `Some(perm)` when the matrix is square with exactly one 1 per row
    /// and per column.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        let (n, m) = self.shape();
        if n != m {
            return None;
        }
        let mut perm = Vec::with_capacity(n);
        let mut seen = vec![false; m];
        for i in 0..n {
            let cols: Vec<usize> = (0..m).filter(|&j| self.pairs[(i, j)] == 1).collect();
            let [j] = cols[..] else { return None };
            if std::mem::replace(&mut seen[j], true) {
                return None;
            }
            perm.push(j);
        }
        Some(perm)
    }

    /// First true column of each row, if any.
    pub fn first_match_per_row(&self) -> Vec<Option<usize>> {
        let (n, m) = self.shape();
        (0..n).map(|i| (0..m).find(|&j| self.pairs[(i, j)] == 1)).collect()
    }
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Fraction of samples closer than the true match, averaged over all 2n
/// samples of both domains. Row `i` of `z1` matches row `i` of `z2`.
pub fn foscttm(z1: &Embedding, z2: &Embedding) -> Result<f64> {
    let n = z1.nrows();
    if n != z2.nrows() {
        return Err(invalid(format!("foscttm needs equal sizes, got {n} and {}", z2.nrows())));
    }
    if z1.dim() != z2.dim() {
        return Err(invalid("foscttm needs equal dimensions"));
    }
    if n < 2 {
        return Ok(0.0);
    }
    let (a, b) = (z1.as_matrix(), z2.as_matrix());
    let cross = DMatrix::from_fn(n, n, |i, j| sq_dist(a, i, b, j));
    let mut total = 0.0;
    for i in 0..n {
        let own = cross[(i, i)];
        let from_first = (0..n).filter(|&j| cross[(i, j)] < own).count();
        let from_second = (0..n).filter(|&j| cross[(j, i)] < own).count();
        total += (from_first + from_second) as f64 / (n - 1) as f64;
    }
    Ok(total / (2 * n) as f64)
}

/// Coupling mass on true pairs divided by total coupling mass.
pub fn node_correctness(p: &Coupling, t: &GroundTruthMatch) -> Result<f64> {
    if p.shape() != t.shape() {
        return Err(invalid(format!("coupling is {:?} but ground truth is {:?}", p.shape(), t.shape())));
    }
    let total = p.total_mass();
    if total <= 0.0 {
        return Err(invalid("coupling has zero mass"));
    }
    let (n, m) = p.shape();
    let pm = p.as_matrix();
    let mut hit = 0.0;
    for j in 0..m {
        for i in 0..n {
            if t.contains(i, j) {
                hit += pm[(i, j)];
            }
        }
    }
    Ok(hit / total)
}

/// Fraction of rows whose true column is among the `k` largest entries of
/// that row (ties ranked by lower column index).
pub fn topk_accuracy(p: &Coupling, truth_best: &[usize], k: usize) -> Result<f64> {
    let (n, m) = p.shape();
    if truth_best.len() != n {
        return Err(invalid(format!("{} truth entries for {n} rows", truth_best.len())));
    }
    if k > m {
        return Err(invalid(format!("k = {k} exceeds {m} columns")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let pm = p.as_matrix();
    let mut hits = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (i, &truth) in truth_best.iter().enumerate() {
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| pm[(i, b)].total_cmp(&pm[(i, a)]).then(a.cmp(&b)));
        if order[..k].contains(&truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn distance_rmse(d: &DissimilarityMatrix, z: &Embedding) -> f64 {
    let n = d.size();
    let zm = z.as_matrix();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let r = d.get(i, j) - sq_dist(zm, i, zm, j).sqrt();
            s += r * r;
        }
    }
    (s / (n * n) as f64).sqrt()
}

/// Distance RMSE of each embedding plus the RMS offset between truly
/// matched points.
pub fn rmsd_d(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    z1: &Embedding,
    z2: &Embedding,
    t: &GroundTruthMatch,
) -> Result<f64> {
    let n = d1.size();
    if d2.size() != n || z1.nrows() != n || z2.nrows() != n {
        return Err(invalid("rmsd_d needs equal sizes for both domains"));
    }
    if z1.dim() != z2.dim() {
        return Err(invalid("rmsd_d needs equal embedding dimensions"));
    }
    let perm = t.as_permutation().ok_or_else(|| invalid("rmsd_d ground truth must be a permutation"))?;
    let (a, b) = (z1.as_matrix(), z2.as_matrix());
    let matched: f64 = perm.iter().enumerate().map(|(i, &j)| sq_dist(a, i, b, j)).sum();
    Ok(distance_rmse(d1, z1) + distance_rmse(d2, z2) + (matched / n as f64).sqrt())
}

/// k-nearest-neighbour label transfer from `source` to every row of
/// `target`. Distance ties go to the lower source index; vote ties to the
/// smaller class id.
pub fn knn_transfer(source: &LabeledEmbedding, target: &Embedding, k: usize) -> Result<Vec<i64>> {
    let src = source.embedding();
    if src.dim() != target.dim() {
        return Err(invalid("source and target dimensions differ"));
    }
    if k == 0 || k > src.nrows() {
        return Err(invalid(format!("k = {k} must be in 1..={}", src.nrows())));
    }
    let (s, t) = (src.as_matrix(), target.as_matrix());
    let ns = src.nrows();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(ns);
    let mut out = Vec::with_capacity(target.nrows());
    for i in 0..target.nrows() {
        order.clear();
        order.extend((0..ns).map(|j| (sq_dist(t, i, s, j), j)));
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
        for &(_, j) in &order[..k] {
            *votes.entry(source.labels()[j]).or_default() += 1;
        }
        // BTreeMap iterates in ascending class order, so max_by keeps the
        // smallest class among equal counts only if we compare reversed.
        let (&label, _) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).expect("k >= 1");
        out.push(label);
    }
    Ok(out)
}

pub fn accuracy(predicted: &[i64], truth: &[i64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(invalid(format!("label lists differ in length ({} vs {})", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let same = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(same as f64 / truth.len() as f64)
}
