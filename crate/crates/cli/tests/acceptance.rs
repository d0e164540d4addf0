//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use jointscale::dissimilarity::{
    graph_dissimilarity, isomap_distances, normalized_adjacency, pairwise_euclidean, power_weight_matrix,
    rescale_by_mean, uniform_weight_matrix,
};
use jointscale::jointmds::{joint_objective, match_argmax, solve};
use jointscale::metrics::{
    accuracy, foscttm, knn_transfer, node_correctness, rmsd_d, GroundTruthMatch, LabeledEmbedding,
};
use jointscale::smacof::{assemble_joint, smacof, stress, FULL_MATRIX_FACTOR};
use jointscale::synthdata::{generate, planted_pair, random_orthogonal, standardize, GenKind, GenSpec};
use jointscale::transport::{
    cost_matrix, entropic_gw, orthogonal_procrustes, sinkhorn, wasserstein_procrustes, Marginals, GW_OUTER_ITERS,
    SINKHORN_MAX_ITER,
};
use jointscale::{
    Coupling, DissimilarityMatrix, EdgeLength, Embedding, FeatureMatrix, JointConfig, Rotation, WeightMatrix,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn euclid(x: &DMatrix<f64>) -> DissimilarityMatrix {
    pairwise_euclidean(&FeatureMatrix::new(x.clone()).unwrap()).unwrap()
}

fn sum_sq_upper(d: &DissimilarityMatrix, w: &WeightMatrix) -> f64 {
    let n = d.size();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| w.get(i, j) * d.get(i, j).powi(2)).sum()
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    for c in 0..y.ncols() {
        let m = y.column(c).mean();
        y.column_mut(c).add_scalar_mut(-m);
    }
    y
}

/// RMS residual after the best rigid alignment of `a` onto `b`.
fn procrustes_rms(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (a, b) = (centered(a), centered(b));
    let svd = (a.transpose() * &b).svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    ((&a * r - b).norm_squared() / a.nrows() as f64).sqrt()
}

fn smacof_exactness() -> Outcome {
    let start = Instant::now();
    let x = Embedding::random(100, 3, 2024);
    let d = euclid(x.as_matrix());
    let w = uniform_weight_matrix(100);
    let (z, _) = smacof(&d, &w, &Embedding::random(100, 3, 7), 0.0, 5000).unwrap();
    let elapsed = start.elapsed();
    let rel = stress(&z, &d, &w).unwrap() / sum_sq_upper(&d, &w);
    let rms = procrustes_rms(z.as_matrix(), x.as_matrix());
    outcome(
        rel <= 1e-8 && rms <= 1e-3 && elapsed <= Duration::from_secs(5),
        format!("relative stress {rel:.3e}, aligned RMS {rms:.3e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn stress_monotonicity() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..40);
        let d = euclid(Embedding::random(n, 4, seed + 1000).as_matrix());
        let mut wm = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.05..2.0);
                wm[(i, j)] = v;
                wm[(j, i)] = v;
            }
        }
        let w = WeightMatrix::new(wm).unwrap();
        let (_, report) = smacof(&d, &w, &Embedding::random(n, 2, seed + 2000), 0.0, 200).unwrap();
        for pair in report.per_iteration.windows(2) {
            worst = worst.max(pair[1] - pair[0]);
        }
    }
    outcome(worst <= 1e-10, format!("largest stress increase {worst:.3e} over 50 instances"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                rec(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn sinkhorn_vs_brute_force() -> Outcome {
    let perms = permutations(5);
    assert_eq!(perms.len(), 120);
    let m = Marginals::uniform(5, 5);
    let (mut worst_gap, mut worst_violation) = (f64::NEG_INFINITY, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0.0..1.0));
        let opt = perms.iter().map(|s| (0..5).map(|i| c[(i, s[i])]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let p = sinkhorn(&c, &m, 1e-3, SINKHORN_MAX_ITER, 1e-8).unwrap();
        worst_gap = worst_gap.max(p.as_matrix().dot(&c) - (opt / 5.0 + 0.01));
        worst_violation = worst_violation.max(p.marginal_violation(&m));
    }
    outcome(
        worst_gap <= 0.0 && worst_violation <= 1e-6,
        format!("max <P,C> - (opt/5 + 0.01) = {worst_gap:.3e}, max violation {worst_violation:.3e}"),
    )
}

fn procrustes_recovery() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (k, d) in [2usize, 3, 8].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let q = random_orthogonal(d, &mut rng);
        let z1 = Embedding::random(40, d, 100 + k as u64);
        let z2 = Embedding::new(z1.as_matrix() * &q).unwrap();
        let p = Coupling::from_permutation(&(0..40).collect::<Vec<_>>());
        let o = orthogonal_procrustes(&z1, &p, &z2).unwrap();
        let err = (o.as_matrix() - &q).norm();
        let m = z1.as_matrix().transpose() * p.as_matrix() * z2.as_matrix();
        let nuclear: f64 = m.clone().svd(false, false).singular_values.sum();
        let cert = ((o.as_matrix().transpose() * &m).trace() - nuclear).abs();
        pass &= err <= 1e-8 && cert <= 1e-8;
        detail.push(format!("d={d}: |O-Q| {err:.1e}, certificate gap {cert:.1e}"));
    }
    outcome(pass, detail.join("; "))
}

fn planted_correspondence() -> Outcome {
    let n = 200;
    let m = Marginals::uniform(n, n);
    let mut rates = Vec::new();
    for seed in 0..5u64 {
        let (z1, z2, perm) = planted_pair(n, 5, seed, 0.01).unwrap();
        let (d1, d2) = (euclid(z1.as_matrix()), euclid(z2.as_matrix()));
        let p0 = entropic_gw(&d1, &d2, &m, 0.05, GW_OUTER_ITERS).unwrap();
        let wp = wasserstein_procrustes(&z1, &z2, &m, 0.01, 20, Some(&p0)).unwrap();
        let hits = match_argmax(&wp.coupling).iter().zip(&perm).filter(|(a, b)| a == b).count();
        rates.push(hits as f64 / n as f64);
    }
    let med = common::median(rates.clone());
    outcome(med >= 0.95, format!("median recovery {med:.3} (per seed {rates:?})"))
}

/// Standardised features, 20-NN geodesics, mean rescaling.
fn swiss_roll_inputs(seed: u64) -> (DissimilarityMatrix, DissimilarityMatrix, Vec<i64>) {
    let pair = generate(&GenSpec::new(GenKind::SwissRoll, 300, 1000, 2000, seed)).unwrap();
    let prep = |x: &FeatureMatrix| {
        let d = pairwise_euclidean(&standardize(x).unwrap()).unwrap();
        rescale_by_mean(&isomap_distances(&d, 20, false).unwrap()).unwrap()
    };
    (prep(&pair.x1), prep(&pair.x2), pair.labels)
}

fn swiss_roll_foscttm() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let start = Instant::now();
        let (d1, d2, _) = swiss_roll_inputs(seed);
        let w = uniform_weight_matrix(300);
        let res = solve(&d1, &d2, &w, &w, &JointConfig::default()).unwrap();
        let f = foscttm(&res.z1, &res.z2).unwrap();
        let t = start.elapsed();
        pass &= f <= 0.05 && t <= Duration::from_secs(120);
        detail.push(format!("data seed {seed}: {f:.4} in {:.1}s", t.as_secs_f64()));
    }
    outcome(pass, format!("FOSCTTM {}", detail.join(", ")))
}

fn swiss_roll_transfer() -> Outcome {
    let mut scores = Vec::new();
    for seed in 0..3u64 {
        let (d1, d2, labels) = swiss_roll_inputs(seed);
        let w = uniform_weight_matrix(300);
        let cfg = JointConfig { d: 16, ..JointConfig::default() };
        let res = solve(&d1, &d2, &w, &w, &cfg).unwrap();
        let source = LabeledEmbedding::new(res.z1, labels.clone()).unwrap();
        let predicted = knn_transfer(&source, &res.z2, 5).unwrap();
        scores.push(accuracy(&predicted, &labels).unwrap());
    }
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(worst >= 0.95, format!("5-NN transfer accuracy {scores:?}"))
}

fn graph_self_matching() -> Outcome {
    let n = 100;
    let mut scores = Vec::new();
    for seed in 0..3u64 {
        let (g1, g2, perm) = common::planted_graphs(n, 0.1, seed);
        let prep = |edges: &[(usize, usize)]| {
            let weighted: Vec<(usize, usize, f64)> = edges.iter().map(|&(i, j)| (i, j, 1.0)).collect();
            let adj = normalized_adjacency(&weighted, n).unwrap();
            let d = graph_dissimilarity(&adj, EdgeLength::Hop).unwrap();
            let w = power_weight_matrix(&d, 4.0).unwrap();
            (d, w)
        };
        let ((d1, w1), (d2, w2)) = (prep(&g1), prep(&g2));
        let cfg = JointConfig { d: 16, gw_init: true, seed, ..JointConfig::default() };
        let res = solve(&d1, &d2, &w1, &w2, &cfg).unwrap();
        let truth = GroundTruthMatch::from_permutation(&perm).unwrap();
        scores.push(node_correctness(&res.p, &truth).unwrap());
    }
    let med = common::median(scores.clone());
    outcome(med >= 0.9, format!("median node correctness {med:.3} (per seed {scores:?})"))
}

/// Three-loop evaluation of the RMSD-D formula.
fn rmsd_oracle(d1: &DMatrix<f64>, d2: &DMatrix<f64>, z1: &DMatrix<f64>, z2: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = d1.nrows();
    let dist = |z: &DMatrix<f64>, i: usize, j: usize| {
        let mut s = 0.0;
        for c in 0..z.ncols() {
            s += (z[(i, c)] - z[(j, c)]).powi(2);
        }
        s.sqrt()
    };
    let mut terms = [0.0; 2];
    for (t, (d, z)) in [(d1, z1), (d2, z2)].into_iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                terms[t] += (d[(i, j)] - dist(z, i, j)).powi(2);
            }
        }
    }
    let mut matched = 0.0;
    for i in 0..n {
        for j in 0..n {
            if perm[i] == j {
                for c in 0..z1.ncols() {
                    matched += (z1[(i, c)] - z2[(j, c)]).powi(2);
                }
            }
        }
    }
    let nn = (n * n) as f64;
    (terms[0] / nn).sqrt() + (terms[1] / nn).sqrt() + (matched / n as f64).sqrt()
}

fn rmsd_identity() -> Outcome {
    let z = Embedding::random(60, 3, 9);
    let d = euclid(z.as_matrix());
    let ident: Vec<usize> = (0..60).collect();
    let self_value = rmsd_d(&d, &d, &z, &z, &GroundTruthMatch::from_permutation(&ident).unwrap()).unwrap();

    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..30);
        let d1 = euclid(Embedding::random(n, 3, seed + 1).as_matrix());
        let d2 = euclid(Embedding::random(n, 3, seed + 2).as_matrix());
        let (z1, z2) = (Embedding::random(n, 3, seed + 3), Embedding::random(n, 3, seed + 4));
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let got = rmsd_d(&d1, &d2, &z1, &z2, &GroundTruthMatch::from_permutation(&perm).unwrap()).unwrap();
        let want = rmsd_oracle(d1.as_matrix(), d2.as_matrix(), z1.as_matrix(), z2.as_matrix(), &perm);
        worst = worst.max((got - want).abs());
    }
    outcome(
        self_value <= 1e-6 && worst <= 1e-10,
        format!("self-alignment {self_value:.3e}, max oracle gap {worst:.3e}"),
    )
}

fn run_joint(data: &Path, out: &Path) -> std::process::Output {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let args = [
        "joint".to_string(),
        s(&data.join("x1.csv")),
        s(&data.join("x2.csv")),
        "--standardize".into(),
        "--geodesic".into(),
        "10".into(),
        "--rescale-mean".into(),
        "--seed".into(),
        "17".into(),
        "--labels1".into(),
        s(&data.join("labels.csv")),
        "--labels2".into(),
        s(&data.join("labels.csv")),
        "--truth".into(),
        s(&data.join("truth.csv")),
        "--out".into(),
        s(out),
    ];
    common::jointscale(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Manifest with the fields that legitimately differ between runs removed.
fn stable_manifest(dir: &Path) -> serde_json::Value {
    let mut v = common::read_json(&dir.join("manifest.json"));
    let obj = v.as_object_mut().unwrap();
    obj.remove("duration_secs");
    obj.remove("argv");
    obj["arguments"].as_object_mut().unwrap().remove("out");
    v
}

fn joint_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = common::jointscale(&[
        "gen",
        "--n",
        "120",
        "--p1",
        "30",
        "--p2",
        "50",
        "--seed",
        "5",
        "--out",
        data.to_str().unwrap(),
    ]);
    if !gen.status.success() {
        return outcome(false, format!("gen failed: {}", common::stderr(&gen)));
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = run_joint(&data, out);
        if !run.status.success() {
            return outcome(false, format!("joint failed: {}", common::stderr(&run)));
        }
    }
    let files = ["z1.csv", "z2.csv", "coupling.csv", "trace.jsonl", "metrics.json"];
    let differing: Vec<&str> =
        files.into_iter().filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap()).collect();
    let manifest_same = stable_manifest(&a) == stable_manifest(&b);
    outcome(
        differing.is_empty() && manifest_same,
        format!(
            "{} data files compared, differing {differing:?}, manifest identical outside timing: {manifest_same}",
            files.len()
        ),
    )
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(lo..hi);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn objective_block_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n1, n2, d) = (rng.random_range(2..15), rng.random_range(2..15), rng.random_range(1..5));
        let d1 = DissimilarityMatrix::new(random_symmetric(n1, &mut rng, 0.1, 3.0)).unwrap();
        let d2 = DissimilarityMatrix::new(random_symmetric(n2, &mut rng, 0.1, 3.0)).unwrap();
        let w1 = WeightMatrix::new(random_symmetric(n1, &mut rng, 0.0, 1.0)).unwrap();
        let w2 = WeightMatrix::new(random_symmetric(n2, &mut rng, 0.0, 1.0)).unwrap();
        let (z1, z2) = (Embedding::random(n1, d, seed + 50), Embedding::random(n2, d, seed + 60));
        let raw = DMatrix::from_fn(n1, n2, |_, _| rng.random_range(0.0..1.0));
        let p = Coupling::new(&raw / raw.sum(), 0.0).unwrap();
        let o = Rotation::new(random_orthogonal(d, &mut rng)).unwrap();
        let lambda = rng.random_range(0.0..2.0);

        let direct = joint_objective(&z1, &z2, &d1, &d2, &w1, &w2, &p, &o, lambda).unwrap();
        let z1o = z1.rotated(&o).unwrap();
        let blocks = assemble_joint(&d1, &d2, &w1, &w2, &p, lambda, &z1o, &z2).unwrap();
        let assembled = FULL_MATRIX_FACTOR * stress(&blocks.z_tilde, &blocks.d_tilde, &blocks.w_tilde).unwrap();
        // Independent check of the cross term against the cost matrix.
        let cross = 2.0 * lambda * p.as_matrix().dot(&cost_matrix(&z1o, &z2).unwrap());
        let parts = FULL_MATRIX_FACTOR * (stress(&z1, &d1, &w1).unwrap() + stress(&z2, &d2, &w2).unwrap()) + cross;
        worst = worst.max((direct - assembled).abs()).max((direct - parts).abs());
    }
    outcome(worst <= 1e-10, format!("max |objective - assembled stress| {worst:.3e} over 20 instances"))
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 11] = [
        ("smacof recovers a Euclidean configuration", smacof_exactness),
        ("smacof stress is monotone", stress_monotonicity),
        ("sinkhorn matches brute-force assignment", sinkhorn_vs_brute_force),
        ("procrustes recovers a planted rotation", procrustes_recovery),
        ("wasserstein procrustes recovers a planted matching", planted_correspondence),
        ("swiss roll alignment FOSCTTM", swiss_roll_foscttm),
        ("swiss roll label transfer at d=16", swiss_roll_transfer),
        ("random graph self-matching", graph_self_matching),
        ("rmsd-d identity and oracle", rmsd_identity),
        ("joint command is deterministic", joint_determinism),
        ("joint objective equals assembled block stress", objective_block_identity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{:>2}] {name}: {} ({:.1}s)", i + 1, result.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
