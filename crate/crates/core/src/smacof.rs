//! Weighted metric MDS by stress majorization (SMACOF).
//!
//! Stress is summed over the upper triangle, `Σ_{i<j} w_ij (d_ij - ‖z_i - z_j‖)²`.
//! The full-matrix sum over all ordered pairs is [`FULL_MATRIX_FACTOR`] times
//! this value for symmetric inputs.

use nalgebra::{Cholesky, DMatrix, Dyn};
use petgraph::unionfind::UnionFind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dissimilarity::{DissimilarityMatrix, WeightMatrix};
use crate::error::{invalid, Error, Result};
use crate::transport::{Coupling, Rotation};

/// Ratio between the full-matrix stress and the upper-triangle stress
/// reported by [`stress`].
pub const FULL_MATRIX_FACTOR: f64 = 2.0;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 300;

/// `n × d` coordinates, one point per row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Embedding(DMatrix<f64>);

impl Embedding {
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding has non-finite coordinates"));
        }
        Ok(Self(coords))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("ragged embedding rows"));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    /// Standard Gaussian coordinates from a seeded ChaCha8 stream.
    pub fn random(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(n, d, &mut rng)
    }

    pub(crate) fn random_with<R: rand::Rng>(n: usize, d: usize, rng: &mut R) -> Self {
        // Row-major fill so the stream order does not depend on storage.
        let mut m = DMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                m[(i, j)] = StandardNormal.sample(rng);
            }
        }
        Self(m)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    /// Right-multiplies every point by `o` (`Z ← Z·O`).
    pub fn rotated(&self, o: &Rotation) -> Result<Self> {
        if o.dim() != self.dim() {
            return Err(invalid(format!("rotation is {0}x{0} but embedding has dimension {1}", o.dim(), self.dim())));
        }
        Ok(Self(&self.0 * o.as_matrix()))
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(top: &Embedding, bottom: &Embedding) -> Result<Self> {
        if top.dim() != bottom.dim() {
            return Err(invalid("cannot stack embeddings of different dimension"));
        }
        let (n1, n2, d) = (top.nrows(), bottom.nrows(), top.dim());
        let mut m = DMatrix::zeros(n1 + n2, d);
        m.rows_mut(0, n1).copy_from(&top.0);
        m.rows_mut(n1, n2).copy_from(&bottom.0);
        Ok(Self(m))
    }

    /// Splits into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Embedding, Embedding) {
        let rest = self.nrows() - n;
        (Self(self.0.rows(0, n).into_owned()), Self(self.0.rows(n, rest).into_owned()))
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.nrows().max(1) as f64;
        self.0.column_iter().map(|c| c.sum() / n).collect()
    }
}

/// Stress trajectory of one SMACOF run. `per_iteration[0]` is the stress of
/// the starting configuration; entry `t` is the stress after `t` transforms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StressReport {
    pub per_iteration: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl StressReport {
    pub fn final_stress(&self) -> f64 {
        *self.per_iteration.last().expect("trace always holds the initial stress")
    }

    /// One `{"iter": t, "stress": s}` object per line.
    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Rec {
            iter: usize,
            stress: f64,
        }
        let mut out = String::new();
        for (iter, &stress) in self.per_iteration.iter().enumerate() {
            out.push_str(&serde_json::to_string(&Rec { iter, stress }).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

/// The block-structured weighted MDS instance equivalent to the joint
/// objective at fixed coupling and rotation.
#[derive(Clone, Debug)]
pub struct JointBlocks {
    pub d_tilde: DissimilarityMatrix,
    pub w_tilde: WeightMatrix,
    pub z_tilde: Embedding,
}

fn check_shapes(z: &Embedding, d: &DissimilarityMatrix, w: &WeightMatrix) -> Result<()> {
    if z.nrows() != d.size() || d.size() != w.size() {
        return Err(invalid(format!(
            "size mismatch: embedding has {} rows, dissimilarity is {}x{0}, weights {}x{0}",
            z.nrows(),
            d.size(),
            w.size()
        )));
    }
    Ok(())
}

fn embedded_distances(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let zt = z.transpose();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let zj = zt.column(j);
        for i in (j + 1)..n {
            let zi = zt.column(i);
            let s: f64 = zi.iter().zip(zj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = s.sqrt();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn stress_from_distances(dist: &DMatrix<f64>, d: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let n = dist.nrows();
    let mut s = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            let r = d[(i, j)] - dist[(i, j)];
            s += w[(i, j)] * r * r;
        }
    }
    s
}

pub fn stress(z: &Embedding, d: &DissimilarityMatrix, w: &WeightMatrix) -> Result<f64> {
    check_shapes(z, d, w)?;
    let dist = embedded_distances(z.as_matrix());
    Ok(stress_from_distances(&dist, d.as_matrix(), w.as_matrix()))
}

/// Number of connected components of the graph with an edge wherever
/// `w_ij > 0`.
fn weight_components(w: &DMatrix<f64>) -> usize {
    let n = w.nrows();
    let mut uf = UnionFind::<usize>::new(n);
    for j in 0..n {
        for i in (j + 1)..n {
            if w[(i, j)] > 0.0 {
                uf.union(i, j);
            }
        }
    }
    let mut labels = uf.into_labeling();
    labels.sort_unstable();
    labels.dedup();
    labels.len()
}

/// Cholesky factor of `V + J/n` for `V = Σ_{i<j} w_ij (e_i - e_j)(e_i - e_j)ᵀ`.
///
/// `B(Z)·Z` has zero column sums, so solving against this factor applies
/// `V⁺` without forming it.
pub struct GuttmanOperator {
    chol: Cholesky<f64, Dyn>,
}

impl GuttmanOperator {
    pub fn new(w: &WeightMatrix) -> Result<Self> {
        let n = w.size();
        let wm = w.as_matrix();
        let components = weight_components(wm);
        if components > 1 {
            return Err(Error::DegenerateWeights { components });
        }
        let inv_n = 1.0 / n as f64;
        let mut v = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    v[(i, j)] = -wm[(i, j)] + inv_n;
                    diag += wm[(i, j)];
                }
            }
            v[(i, i)] = diag + inv_n;
        }
        let chol = v.cholesky().ok_or_else(|| Error::NumericalFailure("V + J/n is not positive definite".into()))?;
        Ok(Self { chol })
    }

    pub fn size(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `V⁺ X` for `X` with zero column sums.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(x)
    }

    /// Dense `V⁺ = (V + J/n)⁻¹ - J/n`.
    pub fn pinv(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        inv.add_scalar_mut(-1.0 / self.size() as f64);
        inv
    }
}

/// Moore-Penrose pseudo-inverse of `V`.
pub fn v_matrix_pinv(w: &WeightMatrix) -> Result<DMatrix<f64>> {
    Ok(GuttmanOperator::new(w)?.pinv())
}

/// `B(Z)·Z`, with `b_ij = w_ij d_ij / ‖z_i - z_j‖` (0 for coincident points).
fn b_times_z(dist: &DMatrix<f64>, d: &DMatrix<f64>, w: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = (z.nrows(), z.ncols());
    let mut out = DMatrix::zeros(n, k);
    for j in 0..n {
        for i in (j + 1)..n {
            let dz = dist[(i, j)];
            if dz <= 0.0 {
                continue;
            }
            let b = w[(i, j)] * d[(i, j)] / dz;
            if b == 0.0 {
                continue;
            }
            for c in 0..k {
                let diff = b * (z[(i, c)] - z[(j, c)]);
                out[(i, c)] += diff;
                out[(j, c)] -= diff;
            }
        }
    }
    out
}

pub fn guttman_transform(
    z: &Embedding,
    d: &DissimilarityMatrix,
    w: &WeightMatrix,
    v_pinv: &DMatrix<f64>,
) -> Result<Embedding> {
    check_shapes(z, d, w)?;
    if v_pinv.nrows() != z.nrows() || v_pinv.ncols() != z.nrows() {
        return Err(invalid("pseudo-inverse size does not match embedding"));
    }
    let dist = embedded_distances(z.as_matrix());
    let bz = b_times_z(&dist, d.as_matrix(), w.as_matrix(), z.as_matrix());
    Ok(Embedding(v_pinv * bz))
}

/// Classical (Torgerson) scaling: top eigenvectors of the double-centred
/// squared dissimilarities. Eigenvector signs are fixed so the entry of
/// largest magnitude is positive; non-positive eigenvalues give zero columns.
pub fn classical_scaling(d: &DissimilarityMatrix, dim: usize) -> Result<Embedding> {
    let n = d.size();
    if n == 0 || dim == 0 {
        return Err(invalid("classical scaling needs n >= 1 and dim >= 1"));
    }
    let sq = d.as_matrix().map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut z = DMatrix::zeros(n, dim);
    for (c, &k) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[k];
        // rounding-level eigenvalues would add noise columns
        if lambda <= 1e-12 * top {
            continue;
        }
        let vec = eig.eigenvectors.column(k);
        let pivot = vec.iter().cloned().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for i in 0..n {
            z[(i, c)] = scale * vec[i];
        }
    }
    Embedding::new(z)
}

/// SMACOF from `z0`. Stops after `max_iter` transforms or once a transform
/// lowers the stress by less than `tol`.
pub fn smacof(
    d: &DissimilarityMatrix,
    w: &WeightMatrix,
    z0: &Embedding,
    tol: f64,
    max_iter: usize,
) -> Result<(Embedding, StressReport)> {
    check_shapes(z0, d, w)?;
    let op = GuttmanOperator::new(w)?;
    smacof_with_operator(d, w, &op, z0, tol, max_iter)
}

/// SMACOF with a precomputed `V⁺` (which must come from `w`).
pub fn smacof_with_pinv(
    d: &DissimilarityMatrix,
    w: &WeightMatrix,
    v_pinv: &DMatrix<f64>,
    z0: &Embedding,
    tol: f64,
    max_iter: usize,
) -> Result<(Embedding, StressReport)> {
    if v_pinv.nrows() != z0.nrows() || v_pinv.ncols() != z0.nrows() {
        return Err(invalid("pseudo-inverse size does not match embedding"));
    }
    smacof_loop(d, w, |bz| v_pinv * bz, z0, tol, max_iter)
}

/// SMACOF with a factorisation built from `w`.
pub fn smacof_with_operator(
    d: &DissimilarityMatrix,
    w: &WeightMatrix,
    op: &GuttmanOperator,
    z0: &Embedding,
    tol: f64,
    max_iter: usize,
) -> Result<(Embedding, StressReport)> {
    if op.size() != z0.nrows() {
        return Err(invalid("Guttman operator size does not match embedding"));
    }
    smacof_loop(d, w, |bz| op.apply(bz), z0, tol, max_iter)
}

fn smacof_loop(
    d: &DissimilarityMatrix,
    w: &WeightMatrix,
    apply_pinv: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    z0: &Embedding,
    tol: f64,
    max_iter: usize,
) -> Result<(Embedding, StressReport)> {
    check_shapes(z0, d, w)?;
    if !(tol >= 0.0) || max_iter == 0 {
        return Err(invalid("smacof needs tol >= 0 and max_iter >= 1"));
    }
    let (dm, wm) = (d.as_matrix(), w.as_matrix());
    let mut z = z0.0.clone();
    let mut dist = embedded_distances(&z);
    let mut current = stress_from_distances(&dist, dm, wm);
    let mut report = StressReport { per_iteration: vec![current], iterations_used: 0, converged: false };
    for _ in 0..max_iter {
        let next = apply_pinv(&b_times_z(&dist, dm, wm, &z));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("Guttman transform produced non-finite values".into()));
        }
        dist = embedded_distances(&next);
        let s = stress_from_distances(&dist, dm, wm);
        z = next;
        report.per_iteration.push(s);
        report.iterations_used += 1;
        if current - s < tol {
            report.converged = true;
            break;
        }
        current = s;
    }
    Ok((Embedding(z), report))
}

/// Stacks the two problems into one weighted MDS instance: block-diagonal
/// dissimilarities, `λP` / `λPᵀ` cross weights, stacked coordinates.
#[allow(clippy::too_many_arguments)]
pub fn assemble_joint(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    w1: &WeightMatrix,
    w2: &WeightMatrix,
    p: &Coupling,
    lambda: f64,
    z1: &Embedding,
    z2: &Embedding,
) -> Result<JointBlocks> {
    check_shapes(z1, d1, w1)?;
    check_shapes(z2, d2, w2)?;
    let (n1, n2) = (d1.size(), d2.size());
    if p.shape() != (n1, n2) {
        return Err(invalid(format!("coupling is {:?}, expected ({n1}, {n2})", p.shape())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n = n1 + n2;
    let mut dt = DMatrix::zeros(n, n);
    dt.view_mut((0, 0), (n1, n1)).copy_from(d1.as_matrix());
    dt.view_mut((n1, n1), (n2, n2)).copy_from(d2.as_matrix());

    let mut wt = DMatrix::zeros(n, n);
    wt.view_mut((0, 0), (n1, n1)).copy_from(w1.as_matrix());
    wt.view_mut((n1, n1), (n2, n2)).copy_from(w2.as_matrix());
    let cross = p.as_matrix() * lambda;
    wt.view_mut((0, n1), (n1, n2)).copy_from(&cross);
    wt.view_mut((n1, 0), (n2, n1)).copy_from(&cross.transpose());

    Ok(JointBlocks {
        d_tilde: DissimilarityMatrix::from_symmetric_unchecked(dt),
        w_tilde: WeightMatrix::from_symmetric_unchecked(wt),
        z_tilde: Embedding::vstack(z1, z2)?,
    })
}
