//! Entropic optimal transport, orthogonal Procrustes and their alternation.
//!
//! Sinkhorn runs on dual potentials in the log domain so that small
//! regularisation does not underflow the Gibbs kernel.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{invalid, Error, Result};
use crate::smacof::Embedding;

pub const SINKHORN_MAX_ITER: usize = 1000;
pub const SINKHORN_TOL: f64 = 1e-6;
pub const GW_OUTER_ITERS: usize = 50;

const SIMPLEX_TOL: f64 = 1e-12;

/// Source and target probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Marginals {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        for (name, v) in [("a", &a), ("b", &b)] {
            if v.is_empty() {
                return Err(invalid(format!("marginal {name} is empty")));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(invalid(format!("marginal {name} has negative or non-finite mass")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL * v.len() as f64 {
                return Err(invalid(format!("marginal {name} sums to {s}, not 1")));
            }
        }
        Ok(Self { a, b })
    }

    pub fn uniform(n: usize, m: usize) -> Self {
        Self { a: vec![1.0 / n as f64; n], b: vec![1.0 / m as f64; m] }
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn swapped(&self) -> Self {
        Self { a: self.b.clone(), b: self.a.clone() }
    }
}

/// Nonnegative transport plan. `tol` is the L1 marginal violation
/// (rows plus columns) measured when the plan was produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coupling {
    values: DMatrix<f64>,
    tol: f64,
}

impl Coupling {
    pub fn new(values: DMatrix<f64>, tol: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("coupling entries must be finite and nonnegative"));
        }
        Ok(Self { values, tol })
    }

    /// Independent coupling `a bᵀ`.
    pub fn product(a: &[f64], b: &[f64]) -> Self {
        Self { values: DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j]), tol: 0.0 }
    }

    /// `(1/n)` times the permutation matrix sending row `i` to `perm[i]`.
    pub fn from_permutation(perm: &[usize]) -> Self {
        let n = perm.len();
        let mut values = DMatrix::zeros(n, n);
        for (i, &j) in perm.iter().enumerate() {
            values[(i, j)] = 1.0 / n as f64;
        }
        Self { values, tol: 0.0 }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn transpose(&self) -> Self {
        Self { values: self.values.transpose(), tol: self.tol }
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    /// `Σ_i |rowsum_i - a_i| + Σ_j |colsum_j - b_j|`.
    pub fn marginal_violation(&self, m: &Marginals) -> f64 {
        let rows: f64 = self.values.row_iter().zip(m.a()).map(|(r, a)| (r.sum() - a).abs()).sum();
        let cols: f64 = self.values.column_iter().zip(m.b()).map(|(c, b)| (c.sum() - b).abs()).sum();
        rows + cols
    }

    /// Negative entropy term `Σ P (log P - 1)`, with `0 log 0 = 0`.
    pub fn neg_entropy(&self) -> f64 {
        self.values.iter().filter(|&&p| p > 0.0).map(|&p| p * (p.ln() - 1.0)).sum()
    }
}

/// `d × d` orthogonal matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rotation(DMatrix<f64>);

impl Rotation {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(invalid("rotation must be square"));
        }
        let d = values.nrows();
        let err = (values.transpose() * &values - DMatrix::<f64>::identity(d, d)).amax();
        if !(err <= 1e-8) {
            return Err(invalid(format!("matrix is not orthogonal (max |OᵀO - I| = {err:e})")));
        }
        Ok(Self(values))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornParams {
    pub max_iter: usize,
    /// L1 marginal violation (rows plus columns) at which to stop.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { max_iter: SINKHORN_MAX_ITER, tol: SINKHORN_TOL }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub converged: bool,
    pub marginal_violation: f64,
    /// Dual objective after each full (f, g) sweep.
    pub dual_trace: Vec<f64>,
}

/// `C_ij = ‖z1_i - z2_j‖²`.
pub fn cost_matrix(z1: &Embedding, z2: &Embedding) -> Result<DMatrix<f64>> {
    if z1.dim() != z2.dim() {
        return Err(invalid(format!("embedding dimensions differ ({} vs {})", z1.dim(), z2.dim())));
    }
    let (a, b) = (z1.as_matrix(), z2.as_matrix());
    let (n, m, d) = (a.nrows(), b.nrows(), a.ncols());
    Ok(DMatrix::from_fn(n, m, |i, j| (0..d).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn state. `g` may be warm-started.
pub(crate) struct SinkhornOutcome {
    pub coupling: Coupling,
    pub report: SinkhornReport,
    pub g: Vec<f64>,
}

/// Plain sweeps before switching to Newton steps on the semi-dual.
const NEWTON_SWITCH: usize = 200;
/// The same, when `g` is warm-started and already close.
const NEWTON_SWITCH_WARM: usize = 20;

struct SemiDual<'a> {
    cts: &'a [f64],
    log_a: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    n: usize,
    k: usize,
    epsilon: f64,
}

impl SemiDual<'_> {
    /// Row potentials that make every row marginal exact for `g`.
    fn rows(&self, g: &[f64]) -> Vec<f64> {
        let inv_eps = 1.0 / self.epsilon;
        (0..self.n)
            .map(|i| {
                let row = &self.cts[i * self.k..(i + 1) * self.k];
                let lse = log_sum_exp(row.iter().zip(g).map(|(cij, gj)| (gj - cij) * inv_eps));
                self.epsilon * (self.log_a[i] - lse)
            })
            .collect()
    }

    fn value(&self, f: &[f64], g: &[f64]) -> f64 {
        dot_finite(f, self.a) + dot_finite(g, self.b) - self.epsilon
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> DMatrix<f64> {
        let inv_eps = 1.0 / self.epsilon;
        DMatrix::from_fn(self.n, self.k, |i, j| ((f[i] + g[j] - self.cts[i * self.k + j]) * inv_eps).exp())
    }

    /// Newton direction on the columns with positive target mass. The
    /// Hessian is singular along constant shifts of `g`; that direction is
    /// pinned by a rank-one term since the gradient is orthogonal to it.
    fn newton_direction(&self, p: &DMatrix<f64>, grad: &[f64], active: &[usize], damping: f64) -> Option<Vec<f64>> {
        let ka = active.len();
        let q = DMatrix::from_fn(
            self.n,
            ka,
            |i, c| {
                if self.a[i] > 0.0 {
                    p[(i, active[c])] / self.a[i].sqrt()
                } else {
                    0.0
                }
            },
        );
        let mut h = gram(&q);
        h.neg_mut();
        for (c, &j) in active.iter().enumerate() {
            h[(c, c)] += p.column(j).sum() + damping;
        }
        h.add_scalar_mut(1.0 / ka as f64);
        let rhs = DVector::from_iterator(ka, active.iter().map(|&j| grad[j]));
        let step = h.cholesky()?.solve(&rhs);
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut full = vec![0.0; self.k];
        for (c, &j) in active.iter().enumerate() {
            full[j] = self.epsilon * step[c];
        }
        Some(full)
    }
}

/// `qᵀq`. Near convergence at small ε most entries of a row are below
/// 1e-16 of its maximum; those are skipped when that leaves the matrix
/// sparse. The result only shapes a search direction, so this is safe.
fn gram(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = q.shape();
    let qt = q.transpose();
    let mut support: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut nnz = 0;
    for i in 0..n {
        let row = qt.column(i);
        let cut = 1e-16 * row.amax();
        let s: Vec<(usize, f64)> = row.iter().copied().enumerate().filter(|&(_, v)| v > cut).collect();
        nnz += s.len();
        support.push(s);
    }
    if nnz * 4 > n * k {
        return &qt * q;
    }
    let mut h = DMatrix::zeros(k, k);
    for s in &support {
        for &(j, vj) in s {
            for &(l, vl) in s {
                h[(j, l)] += vj * vl;
            }
        }
    }
    h
}

pub(crate) fn sinkhorn_log(
    c: &DMatrix<f64>,
    m: &Marginals,
    epsilon: f64,
    params: SinkhornParams,
    g_init: Option<&[f64]>,
) -> Result<SinkhornOutcome> {
    let (n, k) = c.shape();
    if m.a().len() != n || m.b().len() != k {
        return Err(invalid(format!("cost is {n}x{k} but marginals have lengths {} and {}", m.a().len(), m.b().len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(invalid("cost matrix has non-finite entries"));
    }
    let log_a: Vec<f64> = m.a().iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = m.b().iter().map(|x| x.ln()).collect();
    // Row-contiguous copy for the f-update.
    let ct = c.transpose();
    let cs = c.as_slice();
    let cts = ct.as_slice();
    let inv_eps = 1.0 / epsilon;
    let semi = SemiDual { cts, log_a: &log_a, a: m.a(), b: m.b(), n, k, epsilon };

    let mut f = vec![0.0; n];
    let (mut g, switch) = match g_init {
        Some(g0) if g0.len() == k && g0.iter().all(|v| v.is_finite()) => (g0.to_vec(), NEWTON_SWITCH_WARM),
        _ => (vec![0.0; k], NEWTON_SWITCH),
    };
    let mut report =
        SinkhornReport { iterations: 0, converged: false, marginal_violation: f64::INFINITY, dual_trace: Vec::new() };
    // Scaling iterations run on the kernel K = exp((f ⊕ g - C) / ε) with
    // multipliers u, v; they are folded back into (f, g) by an exact
    // log-domain sweep whenever they leave a safe range.
    let a = DVector::from_column_slice(m.a());
    let b = DVector::from_column_slice(m.b());
    let sweep_budget = params.max_iter.min(switch);
    'absorb: while report.iterations < sweep_budget {
        for i in 0..n {
            let row = &cts[i * k..(i + 1) * k];
            let lse = log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) * inv_eps));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for j in 0..k {
            let col = &cs[j * n..(j + 1) * n];
            let lse = log_sum_exp(col.iter().zip(&f).map(|(cij, fi)| (fi - cij) * inv_eps));
            g[j] = epsilon * (log_b[j] - lse);
        }
        report.iterations += 1;
        report.dual_trace.push(semi.value(&f, &g));

        let kernel = semi.plan(&f, &g);
        let mut u = DVector::from_element(n, 1.0);
        let mut v = DVector::from_element(k, 1.0);
        loop {
            // Columns are exact after the v-update; only rows can be off.
            let kv = &kernel * &v;
            let err: f64 = (0..n).map(|i| (u[i] * kv[i] - a[i]).abs()).sum();
            report.marginal_violation = err;
            if !err.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "sinkhorn diverged at iteration {} (epsilon = {epsilon:e})",
                    report.iterations
                )));
            }
            let fold = |f: &mut [f64], g: &mut [f64], u: &DVector<f64>, v: &DVector<f64>| {
                f.iter_mut().zip(u.iter()).for_each(|(fi, ui)| *fi += epsilon * ui.ln());
                g.iter_mut().zip(v.iter()).for_each(|(gj, vj)| *gj += epsilon * vj.ln());
            };
            if err < params.tol {
                fold(&mut f, &mut g, &u, &v);
                report.converged = true;
                break 'absorb;
            }
            if report.iterations >= sweep_budget {
                fold(&mut f, &mut g, &u, &v);
                break 'absorb;
            }
            let u_next = a.zip_map(&kv, |ai, kvi| if ai > 0.0 { ai / kvi } else { 0.0 });
            let ktu = kernel.tr_mul(&u_next);
            let v_next = b.zip_map(&ktu, |bj, kj| if bj > 0.0 { bj / kj } else { 0.0 });
            let safe = |x: &DVector<f64>, mass: &DVector<f64>| {
                x.iter().zip(mass.iter()).all(|(xi, wi)| *wi == 0.0 || (1e-50..1e50).contains(xi))
            };
            if !safe(&u_next, &a) || !safe(&v_next, &b) {
                fold(&mut f, &mut g, &u, &v);
                continue 'absorb;
            }
            u = u_next;
            v = v_next;
            report.iterations += 1;
            let dual = semi.value(&f, &g)
                + epsilon
                    * (dot_finite(u.map(f64::ln).as_slice(), m.a()) + dot_finite(v.map(f64::ln).as_slice(), m.b()));
            report.dual_trace.push(dual);
        }
    }

    let values = if report.converged || report.iterations >= params.max_iter {
        semi.plan(&f, &g)
    } else {
        // Slow-mixing regime: the plan is close to a sparse matching and
        // plain sweeps contract very slowly. Damped Newton (Levenberg-Marquardt)
        // on the semi-dual in g; the damping shrinks after accepted steps.
        let active: Vec<usize> = (0..k).filter(|&j| m.b()[j] > 0.0).collect();
        let column_violation = |p: &DMatrix<f64>| -> (Vec<f64>, f64) {
            let grad: Vec<f64> = (0..k).map(|j| m.b()[j] - p.column(j).sum()).collect();
            let err = grad.iter().map(|v| v.abs()).sum();
            (grad, err)
        };
        let f0 = semi.rows(&g);
        let mut value = semi.value(&f0, &g);
        let mut p = semi.plan(&f0, &g);
        let (mut grad, mut err) = column_violation(&p);
        let mut damping = 1e-3;
        while report.iterations < params.max_iter {
            report.marginal_violation = err;
            if !err.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "sinkhorn diverged in the Newton phase (epsilon = {epsilon:e})"
                )));
            }
            if err < params.tol {
                report.converged = true;
                break;
            }
            report.iterations += 1;
            let trial = semi
                .newton_direction(&p, &grad, &active, damping)
                .map(|dir| g.iter().zip(&dir).map(|(gj, dj)| gj + dj).collect::<Vec<f64>>());
            let accepted = trial.and_then(|trial| {
                let f_trial = semi.rows(&trial);
                let v = semi.value(&f_trial, &trial);
                let p_trial = semi.plan(&f_trial, &trial);
                let (grad_trial, err_trial) = column_violation(&p_trial);
                // Close to the optimum the ascent drowns in rounding noise of
                // the dual value; a smaller violation decides instead.
                let noise = 1e-13 * (1.0 + value.abs());
                let ok = v.is_finite() && (v > value || (v >= value - noise && err_trial < err));
                ok.then_some((trial, v, p_trial, grad_trial, err_trial))
            });
            match accepted {
                Some((g_new, v, p_new, grad_new, err_new)) => {
                    g = g_new;
                    value = v.max(value);
                    p = p_new;
                    grad = grad_new;
                    err = err_new;
                    damping = (damping * 0.1).max(1e-15);
                    report.dual_trace.push(value);
                }
                None => {
                    damping *= 10.0;
                    if damping > 1e12 {
                        break;
                    }
                }
            }
        }
        report.marginal_violation = err;
        p
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("sinkhorn produced non-finite coupling".into()));
    }
    if !report.converged {
        log::debug!(
            "sinkhorn stopped at max_iter={} with marginal violation {:e}",
            params.max_iter,
            report.marginal_violation
        );
    }
    Ok(SinkhornOutcome { coupling: Coupling { values, tol: report.marginal_violation }, report, g })
}

// Zero-mass entries carry -inf potentials; they contribute nothing.
fn dot_finite(potential: &[f64], mass: &[f64]) -> f64 {
    potential.iter().zip(mass).filter(|(_, &w)| w > 0.0).map(|(p, w)| p * w).sum()
}

/// Entropic OT plan `argmin_P ⟨P, C⟩ + ε Σ P (log P - 1)` over couplings
/// with marginals `m`.
pub fn sinkhorn(c: &DMatrix<f64>, m: &Marginals, epsilon: f64, max_iter: usize, tol: f64) -> Result<Coupling> {
    sinkhorn_with_report(c, m, epsilon, max_iter, tol).map(|(p, _)| p)
}

pub fn sinkhorn_with_report(
    c: &DMatrix<f64>,
    m: &Marginals,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(Coupling, SinkhornReport)> {
    let out = sinkhorn_log(c, m, epsilon, SinkhornParams { max_iter, tol }, None)?;
    Ok((out.coupling, out.report))
}

/// Orthogonal `O` maximising `⟨O, M⟩` for a `d × d` cross-covariance `M`.
pub fn procrustes_from_cross(m: &DMatrix<f64>) -> Result<Rotation> {
    if !m.is_square() {
        return Err(invalid("cross-covariance must be square"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite cross-covariance".into()));
    }
    let svd = m.clone().svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::NumericalFailure("SVD did not return singular vectors".into()));
    };
    let o = u * v_t;
    Rotation::new(o).map_err(|e| Error::NumericalFailure(format!("procrustes: {e}")))
}

/// `O = UVᵀ` from the SVD of `M = z1ᵀ P z2`; maximises `⟨O, M⟩` over the
/// orthogonal group (reflections included).
pub fn orthogonal_procrustes(z1: &Embedding, p: &Coupling, z2: &Embedding) -> Result<Rotation> {
    if z1.dim() != z2.dim() {
        return Err(invalid("embedding dimensions differ"));
    }
    if p.shape() != (z1.nrows(), z2.nrows()) {
        return Err(invalid(format!("coupling is {:?}, expected ({}, {})", p.shape(), z1.nrows(), z2.nrows())));
    }
    let m = z1.as_matrix().transpose() * p.as_matrix() * z2.as_matrix();
    procrustes_from_cross(&m)
}

/// `⟨P, d²(Z1·O, Z2)⟩ + ε Σ P (log P - 1)`.
pub fn procrustes_objective(z1: &Embedding, z2: &Embedding, p: &Coupling, o: &Rotation, epsilon: f64) -> Result<f64> {
    let c = cost_matrix(&z1.rotated(o)?, z2)?;
    if c.shape() != p.shape() {
        return Err(invalid("coupling shape does not match embeddings"));
    }
    Ok(p.as_matrix().dot(&c) + epsilon * p.neg_entropy())
}

#[derive(Clone, Debug)]
pub struct ProcrustesAlignment {
    pub coupling: Coupling,
    pub rotation: Rotation,
    /// Regularised objective after each round.
    pub objective_trace: Vec<f64>,
}

/// Alternates Sinkhorn on `cost(z1·O, z2)` and orthogonal Procrustes for
/// `inner_iters` rounds. Starts from `O` fitted to `p0` when given, else
/// from the identity.
pub fn wasserstein_procrustes(
    z1: &Embedding,
    z2: &Embedding,
    m: &Marginals,
    epsilon: f64,
    inner_iters: usize,
    p0: Option<&Coupling>,
) -> Result<ProcrustesAlignment> {
    wasserstein_procrustes_with(z1, z2, m, epsilon, inner_iters, p0, SinkhornParams::default())
}

pub fn wasserstein_procrustes_with(
    z1: &Embedding,
    z2: &Embedding,
    m: &Marginals,
    epsilon: f64,
    inner_iters: usize,
    p0: Option<&Coupling>,
    params: SinkhornParams,
) -> Result<ProcrustesAlignment> {
    if z1.dim() != z2.dim() {
        return Err(invalid("embedding dimensions differ"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = z1.dim();
    if inner_iters == 0 {
        let coupling = p0.cloned().unwrap_or_else(|| Coupling::product(m.a(), m.b()));
        return Ok(ProcrustesAlignment { coupling, rotation: Rotation::identity(d), objective_trace: Vec::new() });
    }
    let mut rotation = match p0 {
        Some(p) => orthogonal_procrustes(z1, p, z2)?,
        None => Rotation::identity(d),
    };
    let mut coupling = None;
    let mut g: Option<Vec<f64>> = None;
    let mut trace = Vec::with_capacity(inner_iters);
    for _ in 0..inner_iters {
        let c = cost_matrix(&z1.rotated(&rotation)?, z2)?;
        let out = sinkhorn_log(&c, m, epsilon, params, g.as_deref())?;
        g = Some(out.g);
        rotation = orthogonal_procrustes(z1, &out.coupling, z2)?;
        trace.push(procrustes_objective(z1, z2, &out.coupling, &rotation, epsilon)?);
        coupling = Some(out.coupling);
    }
    Ok(ProcrustesAlignment { coupling: coupling.expect("at least one round"), rotation, objective_trace: trace })
}

/// Entropic Gromov-Wasserstein with squared loss: mirror-descent steps,
/// each a Sinkhorn projection of the GW gradient cost at the current plan.
pub fn entropic_gw(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    m: &Marginals,
    epsilon: f64,
    outer_iters: usize,
) -> Result<Coupling> {
    entropic_gw_with(d1, d2, m, epsilon, outer_iters, SinkhornParams::default())
}

pub fn entropic_gw_with(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    m: &Marginals,
    epsilon: f64,
    outer_iters: usize,
    params: SinkhornParams,
) -> Result<Coupling> {
    let (n, k) = (d1.size(), d2.size());
    if m.a().len() != n || m.b().len() != k {
        return Err(invalid("marginal lengths do not match dissimilarity sizes"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (a, b) = (d1.as_matrix(), d2.as_matrix());
    let a_sq = a.map(|x| x * x);
    let b_sq = b.map(|x| x * x);
    let ra = &a_sq * DVector::from_column_slice(m.a());
    let rb = &b_sq * DVector::from_column_slice(m.b());
    let const_c = DMatrix::from_fn(n, k, |i, j| ra[i] + rb[j]);

    let mut p = Coupling::product(m.a(), m.b());
    let mut g: Option<Vec<f64>> = None;
    for it in 0..outer_iters {
        let grad = &const_c - (a * p.as_matrix() * b) * 2.0;
        let out = sinkhorn_log(&grad, m, epsilon, params, g.as_deref())?;
        g = Some(out.g);
        let change = (out.coupling.as_matrix() - p.as_matrix()).amax();
        p = out.coupling;
        if change < 1e-10 {
            log::debug!("entropic GW converged after {} iterations", it + 1);
            break;
        }
    }
    Ok(p)
}

/// GW objective `Σ (d1_ik - d2_jl)² P_ij P_kl` (squared loss).
pub fn gw_objective(d1: &DissimilarityMatrix, d2: &DissimilarityMatrix, p: &Coupling) -> f64 {
    let (a, b, pm) = (d1.as_matrix(), d2.as_matrix(), p.as_matrix());
    let pa = pm.column_sum();
    let pb = pm.row_sum_tr();
    let a_sq = a.map(|x| x * x);
    let b_sq = b.map(|x| x * x);
    let first = (pa.transpose() * &a_sq * &pa)[(0, 0)];
    let second = (pb.transpose() * &b_sq * &pb)[(0, 0)];
    let cross = (a * pm * b).dot(pm);
    first + second - 2.0 * cross
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if prefix.len() == used.len() {
                out.push(prefix.clone());
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    prefix.push(i);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        g.qr().q()
    }

    #[test]
    fn cost_matrix_examples() {
        let p = Embedding::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(cost_matrix(&p, &p).unwrap()[(0, 0)], 0.0);
        let a = Embedding::from_rows(&[vec![0.0]]).unwrap();
        let b = Embedding::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(cost_matrix(&a, &b).unwrap()[(0, 0)], 9.0);

        let z1 = Embedding::random(5, 3, 1);
        let z2 = Embedding::random(4, 3, 2);
        let c = cost_matrix(&z1, &z2).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (z1.as_matrix()[(i, k)] - z2.as_matrix()[(j, k)]).powi(2);
                }
                assert!((c[(i, j)] - s).abs() <= 1e-12);
            }
        }
        assert!(cost_matrix(&z1, &Embedding::random(4, 2, 3)).is_err());
    }

    #[test]
    fn sinkhorn_single_cell_and_errors() {
        let c = DMatrix::from_element(1, 1, 42.0);
        let m = Marginals::uniform(1, 1);
        let p = sinkhorn(&c, &m, 0.5, 100, 1e-9).unwrap();
        assert!((p.as_matrix()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(matches!(sinkhorn(&c, &m, 0.0, 100, 1e-9), Err(Error::InvalidInput(_))));
        assert!(matches!(sinkhorn(&c, &m, -1.0, 100, 1e-9), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sinkhorn_identity_assignment() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 10.0, 10.0, 0.0]);
        let p = sinkhorn(&c, &Marginals::uniform(2, 2), 0.01, 1000, 1e-9).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        assert!((p.as_matrix() - expect).amax() < 1e-6);
    }

    #[test]
    fn sinkhorn_near_permutation_optimum() {
        let perms = permutations(5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let c = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
        let best = perms.iter().map(|p| (0..5).map(|i| c[(i, p[i])]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let m = Marginals::uniform(5, 5);
        let (p, report) = sinkhorn_with_report(&c, &m, 1e-3, 10_000, 1e-6).unwrap();
        assert!(report.converged);
        assert!(p.as_matrix().dot(&c) <= best / 5.0 + 0.01);
        assert!(p.marginal_violation(&m) <= 1e-6);
    }

    #[test]
    fn sinkhorn_dual_ascends_and_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = DMatrix::from_fn(6, 4, |_, _| rng.random_range(0.0..3.0));
        let a = vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1];
        let b = vec![0.4, 0.1, 0.25, 0.25];
        let m = Marginals::new(a, b).unwrap();
        let (p, rep) = sinkhorn_with_report(&c, &m, 0.1, 5000, 1e-12).unwrap();
        for w in rep.dual_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "dual decreased: {} -> {}", w[0], w[1]);
        }
        let (pt, _) = sinkhorn_with_report(&c.transpose(), &m.swapped(), 0.1, 5000, 1e-12).unwrap();
        assert!((pt.as_matrix().transpose() - p.as_matrix()).amax() < 1e-10);
    }

    #[test]
    fn procrustes_identity_and_planted() {
        let m = DMatrix::<f64>::identity(3, 3) * 2.5;
        let o = procrustes_from_cross(&m).unwrap();
        assert!((o.as_matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_orthogonal(4, &mut rng);
        let z1 = Embedding::random(20, 4, 9);
        let z2 = Embedding::new(z1.as_matrix() * &q).unwrap();
        let p = Coupling::from_permutation(&(0..20).collect::<Vec<_>>());
        let o = orthogonal_procrustes(&z1, &p, &z2).unwrap();
        assert!((o.as_matrix() - &q).norm() <= 1e-8);
    }

    #[test]
    fn procrustes_beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z1 = Embedding::random(15, 3, 11);
        let z2 = Embedding::random(12, 3, 12);
        let p = Coupling::product(&[1.0 / 15.0; 15], &[1.0 / 12.0; 12]);
        let p = Coupling::new(p.as_matrix().map(|v| v * rng.random_range(0.5..1.5)), 0.0).unwrap();
        let m = z1.as_matrix().transpose() * p.as_matrix() * z2.as_matrix();
        let o = orthogonal_procrustes(&z1, &p, &z2).unwrap();
        let best = o.as_matrix().dot(&m);
        let nuclear: f64 = m.singular_values().sum();
        assert!((best - nuclear).abs() <= 1e-8);
        for _ in 0..1000 {
            let q = random_orthogonal(3, &mut rng);
            assert!(best >= q.dot(&m) - 1e-12);
        }
        let ortho = o.as_matrix().transpose() * o.as_matrix();
        assert!((ortho - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-8);
    }

    #[test]
    fn wasserstein_procrustes_noop_and_self_alignment() {
        let z = Embedding::random(12, 2, 13);
        let m = Marginals::uniform(12, 12);
        let p0 = Coupling::from_permutation(&(0..12).rev().collect::<Vec<_>>());
        let out = wasserstein_procrustes(&z, &z, &m, 0.1, 0, Some(&p0)).unwrap();
        assert_eq!(out.coupling, p0);
        assert_eq!(out.rotation, Rotation::identity(2));

        let out = wasserstein_procrustes(&z, &z, &m, 1e-3, 5, None).unwrap();
        let aligned = z.rotated(&out.rotation).unwrap();
        assert!((aligned.as_matrix() - z.as_matrix()).amax() < 1e-6);
        for i in 0..12 {
            let row = out.coupling.as_matrix().row(i);
            assert_eq!(row.transpose().argmax().0, i);
        }
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn gw_trivial_and_self_matching() {
        let one = DissimilarityMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        let p = entropic_gw(&one, &one, &Marginals::uniform(1, 1), 0.1, 10).unwrap();
        assert!((p.as_matrix()[(0, 0)] - 1.0).abs() < 1e-12);

        let pts = Embedding::random(12, 3, 14);
        let d = {
            let c = cost_matrix(&pts, &pts).unwrap();
            DissimilarityMatrix::new(c.map(f64::sqrt)).unwrap()
        };
        let m = Marginals::uniform(12, 12);
        let p = entropic_gw(&d, &d, &m, 5e-3, 200).unwrap();
        for i in 0..12 {
            assert_eq!(p.as_matrix().row(i).transpose().argmax().0, i);
        }
        assert!(p.marginal_violation(&m) <= 1e-5);
    }

    #[test]
    fn gw_objective_zero_for_identity_matching() {
        let pts = Embedding::random(6, 2, 15);
        let d = DissimilarityMatrix::new(cost_matrix(&pts, &pts).unwrap().map(f64::sqrt)).unwrap();
        let p = Coupling::from_permutation(&(0..6).collect::<Vec<_>>());
        assert!(gw_objective(&d, &d, &p).abs() < 1e-12);
    }
}
