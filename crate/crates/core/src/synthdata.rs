//! Synthetic manifold pairs and planted-correspondence fixtures.
//!
//! The latent shapes are re-implementations; they are not byte-compatible
//! with any published data files.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::FeatureMatrix;
use crate::error::{invalid, Result};
use crate::smacof::Embedding;

/// Relative noise level used when none is given.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;

const BIFURCATION_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Bifurcation,
    SwissRoll,
    CircularFrustum,
}

impl std::str::FromStr for GenKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bifurcation" => Ok(Self::Bifurcation),
            "swiss_roll" | "swiss-roll" => Ok(Self::SwissRoll),
            "circular_frustum" | "circular-frustum" => Ok(Self::CircularFrustum),
            other => Err(invalid(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// `noise_sigma` is relative: the injected white noise has standard
/// deviation `noise_sigma` times the pooled standard deviation of the
/// projected features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    pub n: usize,
    pub p1: usize,
    pub p2: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Skip the random projections; requires `p1 == p2 == 3`.
    #[serde(default)]
    pub identity_projection: bool,
}

impl GenSpec {
    pub fn new(kind: GenKind, n: usize, p1: usize, p2: usize, seed: u64) -> Self {
        Self { kind, n, p1, p2, noise_sigma: DEFAULT_NOISE_SIGMA, seed, identity_projection: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        if self.p1 < 3 || self.p2 < 3 {
            return Err(invalid(format!("projected dimensions must be at least 3, got {} and {}", self.p1, self.p2)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.identity_projection && (self.p1 != 3 || self.p2 != 3) {
            return Err(invalid("identity projection requires p1 = p2 = 3"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub x1: FeatureMatrix,
    pub x2: FeatureMatrix,
    pub labels: Vec<i64>,
    pub latent: FeatureMatrix,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Latent points plus the scalar generative parameter of each row.
fn sample_latent(kind: GenKind, n: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<f64>) {
    let mut latent = DMatrix::zeros(n, 3);
    let mut param = Vec::with_capacity(n);
    for i in 0..n {
        let (row, s) = match kind {
            GenKind::SwissRoll => {
                let t = rng.random_range(1.5 * PI..=4.5 * PI);
                let h = rng.random_range(0.0..=21.0);
                ([t * t.cos(), h, t * t.sin()], t)
            }
            GenKind::CircularFrustum => {
                let s: f64 = rng.random_range(0.0..=1.0);
                let theta = rng.random_range(0.0..2.0 * PI);
                let r = 1.0 + s;
                ([r * theta.cos(), r * theta.sin(), 3.0 * s], s)
            }
            GenKind::Bifurcation => {
                let s: f64 = rng.random_range(0.0..=1.0);
                let branch = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let split = 4.0 * (s - 0.5).max(0.0);
                let jy = BIFURCATION_JITTER * gaussian(rng);
                let jz = BIFURCATION_JITTER * gaussian(rng);
                ([4.0 * s, branch * split + jy, split * split * 0.5 + jz], s)
            }
        };
        for (c, v) in row.into_iter().enumerate() {
            latent[(i, c)] = v;
        }
        param.push(s);
    }
    (latent, param)
}

/// Three contiguous, equally sized segments by rank of the parameter.
fn segment_labels(param: &[f64]) -> Vec<i64> {
    let n = param.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| param[a].total_cmp(&param[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = (3 * rank / n) as i64;
    }
    labels
}

fn pooled_std(x: &DMatrix<f64>) -> f64 {
    let len = x.len() as f64;
    let mean = x.sum() / len;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt()
}

fn project_with_noise(latent: &DMatrix<f64>, p: usize, spec: &GenSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = if spec.identity_projection {
        latent.clone()
    } else {
        let proj = DMatrix::from_fn(3, p, |_, _| gaussian(rng));
        latent * proj
    };
    if spec.noise_sigma > 0.0 {
        let sigma = spec.noise_sigma * pooled_std(&x);
        x.iter_mut().for_each(|v| *v += sigma * gaussian(rng));
    }
    x
}

pub fn generate(spec: &GenSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (latent, param) = sample_latent(spec.kind, spec.n, &mut rng);
    let x1 = project_with_noise(&latent, spec.p1, spec, &mut rng);
    let x2 = project_with_noise(&latent, spec.p2, spec, &mut rng);
    Ok(SyntheticPair {
        x1: FeatureMatrix::new(x1)?,
        x2: FeatureMatrix::new(x2)?,
        labels: segment_labels(&param),
        latent: FeatureMatrix::new(latent)?,
    })
}

/// Column-wise z-scores with the population standard deviation. Constant
/// columns become zero.
pub fn standardize(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(invalid(format!("standardize needs at least 2 rows, got {n}")));
    }
    let mut m = x.as_matrix().clone();
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if sd > f64::EPSILON * (1.0 + mean.abs()) {
            col.iter_mut().for_each(|v| *v /= sd);
        } else {
            col.fill(0.0);
        }
    }
    FeatureMatrix::new(m)
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Returns `(z1, z2, perm)` with `z2[perm[i]] = (z1 Q)[i] + noise * N(0, 1)`
/// for a hidden orthogonal `Q`.
pub fn planted_pair(n: usize, d: usize, seed: u64, noise: f64) -> Result<(Embedding, Embedding, Vec<usize>)> {
    if n < 2 {
        return Err(invalid(format!("planted_pair needs n >= 2, got {n}")));
    }
    if d == 0 {
        return Err(invalid("planted_pair needs d >= 1"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(invalid(format!("noise must be finite and >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1 = DMatrix::from_fn(n, d, |_, _| gaussian(&mut rng));
    let q = random_orthogonal(d, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let rotated = &z1 * q;
    let mut z2 = DMatrix::zeros(n, d);
    for (i, &j) in perm.iter().enumerate() {
        for c in 0..d {
            z2[(j, c)] = rotated[(i, c)];
        }
    }
    if noise > 0.0 {
        z2.iter_mut().for_each(|v| *v += noise * gaussian(&mut rng));
    }
    Ok((Embedding::new(z1)?, Embedding::new(z2)?, perm))
}
