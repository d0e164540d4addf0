//! Alternating solver for joint MDS.
//!
//! Each outer iteration fits a coupling and an orthogonal map between the
//! current embeddings (Wasserstein Procrustes), rotates the first embedding,
//! then runs SMACOF on the stacked problem whose cross weights are `λP`.
//! Several seeded restarts run independently; the one with the smallest
//! final objective wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::{DissimilarityMatrix, WeightMatrix};
use crate::error::{invalid, Error, Result};
use crate::smacof::{self, assemble_joint, smacof_with_operator, Embedding, GuttmanOperator, FULL_MATRIX_FACTOR};
use crate::transport::{
    cost_matrix, entropic_gw_with, wasserstein_procrustes_with, Coupling, Marginals, Rotation, SinkhornParams,
};

/// ε never drops below this multiple of the mean transport cost.
pub const EPSILON_FLOOR_RATIO: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Matching penalty.
    pub lambda: f64,
    /// Initial entropic regularisation.
    pub epsilon0: f64,
    /// Per-iteration decay of ε, in (0, 1].
    pub alpha: f64,
    /// Outer iterations.
    #[serde(rename = "T")]
    pub outer_iters: usize,
    pub inner_smacof_iters: usize,
    pub inner_wp_iters: usize,
    /// Iteration budget for the standalone SMACOF used to initialise.
    pub init_smacof_iters: usize,
    pub smacof_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub gw_init: bool,
    /// Entropic regularisation for the GW initialisation.
    pub gw_epsilon: f64,
    pub gw_iters: usize,
    pub lambda_anneal: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            d: 2,
            lambda: 0.1,
            epsilon0: 1.0,
            alpha: 0.95,
            outer_iters: 30,
            inner_smacof_iters: 50,
            inner_wp_iters: 10,
            init_smacof_iters: smacof::DEFAULT_MAX_ITER,
            smacof_tol: smacof::DEFAULT_TOL,
            sinkhorn_max_iter: crate::transport::SINKHORN_MAX_ITER,
            sinkhorn_tol: crate::transport::SINKHORN_TOL,
            restarts: 4,
            seed: 0,
            gw_init: false,
            gw_epsilon: 0.05,
            gw_iters: crate::transport::GW_OUTER_ITERS,
            lambda_anneal: false,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(invalid(format!("config: {msg}")));
        if self.d == 0 {
            return fail("d must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and >= 0");
        }
        if !(self.epsilon0 > 0.0 && self.epsilon0.is_finite()) {
            return fail("epsilon0 must be > 0");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha must lie in (0, 1]");
        }
        if self.outer_iters == 0 {
            return fail("T must be >= 1");
        }
        if self.restarts == 0 {
            return fail("restarts must be >= 1");
        }
        if self.inner_smacof_iters == 0 || self.init_smacof_iters == 0 {
            return fail("SMACOF iteration budgets must be >= 1");
        }
        if !(self.smacof_tol >= 0.0) || !(self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iter == 0 {
            return fail("tolerances must be positive and sinkhorn_max_iter >= 1");
        }
        if self.gw_init && !(self.gw_epsilon > 0.0) {
            return fail("gw_epsilon must be > 0");
        }
        Ok(())
    }

    fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams { max_iter: self.sinkhorn_max_iter, tol: self.sinkhorn_tol }
    }

    /// λ used at outer iteration `t` (1-based).
    pub fn lambda_at(&self, t: usize) -> f64 {
        if self.lambda_anneal && self.gw_init {
            let ramp = self.outer_iters.div_ceil(2);
            self.lambda * (t as f64 / ramp as f64).min(1.0)
        } else {
            self.lambda
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointResult {
    pub z1: Embedding,
    pub z2: Embedding,
    pub p: Coupling,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub restart_index: usize,
}

/// Joint objective with full-matrix stress:
/// `stress(Z) + stress(Z') + 2λ⟨P, d²(ZO, Z')⟩`, where each stress sums
/// over all ordered pairs.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    z1: &Embedding,
    z2: &Embedding,
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    w1: &WeightMatrix,
    w2: &WeightMatrix,
    p: &Coupling,
    o: &Rotation,
    lambda: f64,
) -> Result<f64> {
    let s1 = smacof::stress(z1, d1, w1)?;
    let s2 = smacof::stress(z2, d2, w2)?;
    let c = cost_matrix(&z1.rotated(o)?, z2)?;
    if c.shape() != p.shape() {
        return Err(invalid(format!("coupling is {:?}, expected {:?}", p.shape(), c.shape())));
    }
    Ok(FULL_MATRIX_FACTOR * (s1 + s2) + 2.0 * lambda * p.as_matrix().dot(&c))
}

/// Row-wise argmax of a coupling; ties go to the lowest column.
pub fn match_argmax(p: &Coupling) -> Vec<usize> {
    p.as_matrix()
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_inputs(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    w1: &WeightMatrix,
    w2: &WeightMatrix,
) -> Result<()> {
    if d1.size() != w1.size() || d2.size() != w2.size() {
        return Err(invalid("weight matrix size does not match dissimilarities"));
    }
    Ok(())
}

pub fn solve(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    w1: &WeightMatrix,
    w2: &WeightMatrix,
    cfg: &JointConfig,
) -> Result<JointResult> {
    cfg.validate()?;
    check_inputs(d1, d2, w1, w2)?;
    // GW depends only on the inputs, so every restart shares it.
    let marginals = Marginals::uniform(d1.size(), d2.size());
    let gw = if cfg.gw_init {
        Some(entropic_gw_with(d1, d2, &marginals, cfg.gw_epsilon, cfg.gw_iters, cfg.sinkhorn())?)
    } else {
        None
    };
    let runs: Vec<(usize, Result<JointResult>)> =
        (0..cfg.restarts).into_par_iter().map(|r| (r, run_restart(d1, d2, w1, w2, cfg, r, gw.as_ref()))).collect();

    let mut best: Option<JointResult> = None;
    let mut last_err = None;
    for (r, run) in runs {
        match run {
            Ok(res) => {
                log::info!("restart {r}: final objective {:e}", res.final_objective);
                let better = best.as_ref().is_none_or(|b| res.final_objective < b.final_objective);
                if better {
                    best = Some(res);
                }
            }
            Err(Error::NumericalFailure(msg)) => {
                log::warn!("restart {r} failed: {msg}");
                last_err = Some(Error::NumericalFailure(msg));
            }
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::NumericalFailure("no restart succeeded".into())))
}

fn mean(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.sum() / (m.len().max(1)) as f64
}

#[allow(clippy::too_many_arguments)]
fn run_restart(
    d1: &DissimilarityMatrix,
    d2: &DissimilarityMatrix,
    w1: &WeightMatrix,
    w2: &WeightMatrix,
    cfg: &JointConfig,
    restart: usize,
    gw: Option<&Coupling>,
) -> Result<JointResult> {
    let (n1, n2) = (d1.size(), d2.size());
    let seed = cfg.seed.wrapping_add(restart as u64);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let init1 = Embedding::random_with(n1, cfg.d, &mut rng);
    let init2 = Embedding::random_with(n2, cfg.d, &mut rng);
    let (mut z1, _) = smacof::smacof(d1, w1, &init1, cfg.smacof_tol, cfg.init_smacof_iters)?;
    let (mut z2, _) = smacof::smacof(d2, w2, &init2, cfg.smacof_tol, cfg.init_smacof_iters)?;

    let marginals = Marginals::uniform(n1, n2);
    let mut p: Option<Coupling> = gw.cloned();
    let mut epsilon = cfg.epsilon0;
    let mut trace = Vec::with_capacity(cfg.outer_iters);

    for t in 1..=cfg.outer_iters {
        let lambda = cfg.lambda_at(t);
        let floor = EPSILON_FLOOR_RATIO * mean(&cost_matrix(&z1, &z2)?);
        let eps_t = epsilon.max(floor);

        let wp =
            wasserstein_procrustes_with(&z1, &z2, &marginals, eps_t, cfg.inner_wp_iters, p.as_ref(), cfg.sinkhorn())?;
        z1 = z1.rotated(&wp.rotation)?;
        let coupling = wp.coupling;

        let blocks = assemble_joint(d1, d2, w1, w2, &coupling, lambda, &z1, &z2)?;
        let op = GuttmanOperator::new(&blocks.w_tilde)?;
        let (z, _) = smacof_with_operator(
            &blocks.d_tilde,
            &blocks.w_tilde,
            &op,
            &blocks.z_tilde,
            cfg.smacof_tol,
            cfg.inner_smacof_iters,
        )?;
        (z1, z2) = z.split_at(n1);

        let objective = joint_objective(&z1, &z2, d1, d2, w1, w2, &coupling, &Rotation::identity(cfg.d), lambda)?;
        log::debug!("restart {restart} iter {t}: epsilon {eps_t:e} lambda {lambda} objective {objective:e}");
        trace.push(objective);
        p = Some(coupling);
        epsilon *= cfg.alpha;
    }

    let final_objective = *trace.last().expect("outer_iters >= 1");
    Ok(JointResult {
        z1,
        z2,
        p: p.expect("outer_iters >= 1"),
        objective_trace: trace,
        final_objective,
        restart_index: restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissimilarity::{pairwise_euclidean, uniform_weight_matrix, FeatureMatrix};
    use nalgebra::DMatrix;

    fn dist_of(z: &Embedding) -> DissimilarityMatrix {
        let rows: Vec<Vec<f64>> = (0..z.nrows()).map(|i| z.row(i)).collect();
        pairwise_euclidean(&FeatureMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn match_argmax_examples() {
        let p = Coupling::from_permutation(&[0, 1, 2, 3]);
        assert_eq!(match_argmax(&p), vec![0, 1, 2, 3]);
        let p = Coupling::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.4, 0.3, 0.2]), 0.0).unwrap();
        assert_eq!(match_argmax(&p), vec![1, 0]);
        let p = Coupling::product(&[0.25; 4], &[0.25; 4]);
        assert_eq!(match_argmax(&p), vec![0; 4]);
    }

    #[test]
    fn objective_lambda_zero_and_perfect_fit() {
        let z1 = Embedding::random(5, 2, 1);
        let z2 = Embedding::random(4, 2, 2);
        let d1 = dist_of(&Embedding::random(5, 2, 3));
        let d2 = dist_of(&Embedding::random(4, 2, 4));
        let (w1, w2) = (uniform_weight_matrix(5), uniform_weight_matrix(4));
        let p = Coupling::product(&[0.2; 5], &[0.25; 4]);
        let o = Rotation::identity(2);
        let obj = joint_objective(&z1, &z2, &d1, &d2, &w1, &w2, &p, &o, 0.0).unwrap();
        let s = smacof::stress(&z1, &d1, &w1).unwrap() + smacof::stress(&z2, &d2, &w2).unwrap();
        assert!((obj - FULL_MATRIX_FACTOR * s).abs() < 1e-12);

        let z = Embedding::random(6, 2, 5);
        let d = dist_of(&z);
        let w = uniform_weight_matrix(6);
        let p = Coupling::from_permutation(&(0..6).collect::<Vec<_>>());
        let obj = joint_objective(&z, &z, &d, &d, &w, &w, &p, &o, 0.7).unwrap();
        assert!(obj.abs() < 1e-20);
    }

    #[test]
    fn lambda_ramp() {
        let cfg =
            JointConfig { outer_iters: 10, gw_init: true, lambda_anneal: true, lambda: 1.0, ..Default::default() };
        assert_eq!(cfg.lambda_at(1), 0.2);
        assert_eq!(cfg.lambda_at(5), 1.0);
        assert_eq!(cfg.lambda_at(9), 1.0);
        let off = JointConfig { lambda_anneal: true, gw_init: false, ..cfg.clone() };
        assert_eq!(off.lambda_at(1), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(JointConfig::default().validate().is_ok());
        assert!(JointConfig { d: 0, ..Default::default() }.validate().is_err());
        assert!(JointConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(JointConfig { restarts: 0, ..Default::default() }.validate().is_err());
        assert!(JointConfig { epsilon0: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let cfg: JointConfig = serde_json::from_str(r#"{"d": 3, "T": 7}"#).unwrap();
        assert_eq!(cfg.d, 3);
        assert_eq!(cfg.outer_iters, 7);
        assert_eq!(cfg.lambda, 0.1);
        assert!(serde_json::from_str::<JointConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
