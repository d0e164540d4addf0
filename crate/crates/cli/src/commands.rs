use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use jointscale::dissimilarity::{
    graph_dissimilarity, isomap_distances, normalized_adjacency, pairwise_euclidean, power_weight_matrix,
    rescale_by_mean, uniform_weight_matrix,
};
use jointscale::io::{self, CsvFormat};
use jointscale::jointmds::{match_argmax, solve, JointConfig, JointResult};
use jointscale::metrics::{
    accuracy, foscttm, knn_transfer, node_correctness, rmsd_d, topk_accuracy, GroundTruthMatch, LabeledEmbedding,
};
use jointscale::smacof::{classical_scaling, smacof, stress};
use jointscale::synthdata::{generate, standardize, GenKind, GenSpec};
use jointscale::{Coupling, DissimilarityMatrix, EdgeLength, Embedding, FeatureMatrix, WeightMatrix};

use crate::cli::{
    DatasetKind, EmbedArgs, EvalArgs, FormatArgs, GenArgs, GraphMode, InputKind, JointArgs, MatchArgs, PrepArgs,
    SolverArgs,
};
use crate::report::{Metrics, Run};

pub const SEED_ENV: &str = "JOINTSCALE_SEED";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(text) => {
            text.trim().parse().map(Some).with_context(|| format!("{SEED_ENV} is not an unsigned integer: `{text}`"))
        }
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn csv_format(fmt: &FormatArgs) -> Result<CsvFormat> {
    if !fmt.delimiter.is_ascii() {
        bail!("delimiter must be a single ASCII character");
    }
    Ok(CsvFormat { delimiter: fmt.delimiter as u8, header: fmt.header })
}

fn edge_length(mode: GraphMode) -> EdgeLength {
    match mode {
        GraphMode::Hop => EdgeLength::Hop,
        GraphMode::Inv => EdgeLength::InverseWeight,
    }
}

fn graph_distances(path: &Path, mode: GraphMode) -> Result<DissimilarityMatrix> {
    let list = io::read_edge_list(path, 0)?;
    if list.self_loops_dropped > 0 {
        log::warn!("{}: dropped {} self-loop(s)", path.display(), list.self_loops_dropped);
    }
    let adj = normalized_adjacency(&list.edges, list.node_count)
        .with_context(|| format!("building adjacency of {}", path.display()))?;
    graph_dissimilarity(&adj, edge_length(mode)).with_context(|| format!("shortest paths on {}", path.display()))
}

fn load_dissimilarity(path: &Path, fmt: &FormatArgs, prep: &PrepArgs) -> Result<DissimilarityMatrix> {
    let csv = csv_format(fmt)?;
    let mut d = match fmt.kind {
        InputKind::Features => {
            let mut x = FeatureMatrix::new(io::read_matrix(path, csv)?)?;
            if prep.standardize {
                x = standardize(&x)?;
            }
            pairwise_euclidean(&x)?
        }
        InputKind::Distances => DissimilarityMatrix::new(io::read_matrix(path, csv)?)
            .with_context(|| format!("{} is not a dissimilarity matrix", path.display()))?,
        InputKind::Edgelist => graph_distances(path, prep.graph)?,
    };
    if let Some(k) = prep.geodesic {
        if fmt.kind == InputKind::Edgelist {
            bail!("--geodesic does not apply to edge-list inputs");
        }
        d = isomap_distances(&d, k as usize, prep.bridge)
            .with_context(|| format!("geodesics of {}", path.display()))?;
    }
    if prep.rescale_mean {
        d = rescale_by_mean(&d)?;
    }
    Ok(d)
}

fn weights_for(d: &DissimilarityMatrix, exponent: Option<f64>) -> Result<WeightMatrix> {
    Ok(match exponent {
        Some(e) => power_weight_matrix(d, e)?,
        None => uniform_weight_matrix(d.size()),
    })
}

/// Defaults, then the JSON config, then flags. The seed additionally falls
/// back to the environment when neither JSON nor flags set it.
pub fn joint_config(solver: &SolverArgs, mut base: JointConfig) -> Result<JointConfig> {
    let mut seed_in_json = false;
    if let Some(path) = &solver.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overrides: Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        let Value::Object(fields) = overrides else {
            bail!("{} must contain a JSON object", path.display());
        };
        seed_in_json = fields.contains_key("seed");
        let Value::Object(mut merged) = serde_json::to_value(&base)? else {
            unreachable!("config serializes to an object")
        };
        merged.extend(fields);
        base = serde_json::from_value(Value::Object(merged))
            .with_context(|| format!("invalid config in {}", path.display()))?;
    }
    if !seed_in_json {
        if let Some(s) = env_seed()? {
            base.seed = s;
        }
    }
    let cfg = JointConfig {
        d: solver.dim.map_or(base.d, |v| v as usize),
        lambda: solver.lambda.unwrap_or(base.lambda),
        epsilon0: solver.epsilon.unwrap_or(base.epsilon0),
        alpha: solver.alpha.unwrap_or(base.alpha),
        outer_iters: solver.iters.map_or(base.outer_iters, |v| v as usize),
        inner_smacof_iters: solver.inner_smacof.map_or(base.inner_smacof_iters, |v| v as usize),
        inner_wp_iters: solver.inner_wp.map_or(base.inner_wp_iters, |v| v as usize),
        restarts: solver.restarts.map_or(base.restarts, |v| v as usize),
        seed: solver.seed.unwrap_or(base.seed),
        gw_init: base.gw_init || solver.gw_init,
        lambda_anneal: base.lambda_anneal || solver.lambda_anneal,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_labels_for(path: &Path, n: usize) -> Result<Vec<i64>> {
    let labels = io::read_labels(path)?;
    if labels.len() != n {
        bail!("{} has {} labels but the data has {n} rows", path.display(), labels.len());
    }
    Ok(labels)
}

fn read_truth(path: &Path, n1: usize, n2: usize) -> Result<GroundTruthMatch> {
    let pairs = io::read_pairs(path)?;
    GroundTruthMatch::from_pairs(n1, n2, pairs).with_context(|| format!("truth file {}", path.display()))
}

/// `z2` reordered so that row `i` is the true partner of `z1` row `i`.
fn aligned_partner(z2: &Embedding, perm: &[usize]) -> Result<Embedding> {
    let m = z2.as_matrix();
    Ok(Embedding::new(DMatrix::from_fn(perm.len(), m.ncols(), |i, c| m[(perm[i], c)]))?)
}

fn transfer_metric(
    out: &mut Metrics,
    z1: &Embedding,
    z2: &Embedding,
    labels: (Option<&Path>, Option<&Path>),
    k: usize,
) -> Result<()> {
    match labels {
        (Some(l1), Some(l2)) => {
            let source = LabeledEmbedding::new(z1.clone(), read_labels_for(l1, z1.nrows())?)?;
            let truth = read_labels_for(l2, z2.nrows())?;
            let predicted = knn_transfer(&source, z2, k)?;
            out.set("transfer_accuracy", accuracy(&predicted, &truth)?);
        }
        (None, None) => out.omit("transfer_accuracy", "no --labels1/--labels2 given"),
        _ => out.omit("transfer_accuracy", "needs both --labels1 and --labels2"),
    }
    Ok(())
}

fn coupling_metrics(out: &mut Metrics, p: &Coupling, truth: Option<&GroundTruthMatch>, k: usize) -> Result<()> {
    let Some(t) = truth else {
        out.omit("node_correctness", "no --truth given");
        out.omit("topk_accuracy", "no --truth given");
        return Ok(());
    };
    out.set("node_correctness", node_correctness(p, t)?);
    let best: Option<Vec<usize>> = t.first_match_per_row().into_iter().collect();
    match best {
        Some(best) if k <= p.shape().1 => out.set(&format!("top{k}_accuracy"), topk_accuracy(p, &best, k)?),
        Some(_) => out.omit("topk_accuracy", format!("k = {k} exceeds the number of columns")),
        None => out.omit("topk_accuracy", "some rows have no true match"),
    }
    Ok(())
}

fn embedding_metrics(
    out: &mut Metrics,
    z1: &Embedding,
    z2: &Embedding,
    truth: Option<&GroundTruthMatch>,
) -> Result<()> {
    match truth.map(|t| t.as_permutation()) {
        Some(Some(perm)) => out.set("foscttm", foscttm(z1, &aligned_partner(z2, &perm)?)?),
        Some(None) => out.omit("foscttm", "truth is not a one-to-one correspondence"),
        None => out.omit("foscttm", "no --truth given"),
    }
    Ok(())
}

fn trace_lines(trace: &[f64], key: &str) -> Vec<Value> {
    trace.iter().enumerate().map(|(t, v)| json!({ "iteration": t + 1, key: v })).collect()
}

fn write_joint_outputs(run: &mut Run, res: &JointResult, sparse: bool) -> Result<()> {
    io::write_embedding(&run.output("z1.csv"), &res.z1)?;
    io::write_embedding(&run.output("z2.csv"), &res.z2)?;
    io::write_coupling(&run.output("coupling.csv"), &res.p, sparse)?;
    run.write_lines("trace.jsonl", trace_lines(&res.objective_trace, "objective"))
}

fn print_metrics(metrics: &Metrics) {
    for (name, value) in &metrics.metrics {
        println!("{name}: {value:?}");
    }
}

pub fn embed(args: &EmbedArgs) -> Result<()> {
    let mut run = Run::new("embed", &args.out)?;
    run.record_input(&args.input)?;
    let seed = resolve_seed(args.seed)?;
    let d = load_dissimilarity(&args.input, &args.format, &args.prep)?;
    let w = weights_for(&d, args.prep.weight_exponent)?;
    let dim = args.dim as usize;

    let mut best: Option<(usize, Embedding, jointscale::StressReport)> = None;
    for r in 0..args.restarts as usize {
        let z0 = if r == 0 {
            classical_scaling(&d, dim)?
        } else {
            Embedding::random(d.size(), dim, seed.wrapping_add(r as u64 - 1))
        };
        let (z, report) = smacof(&d, &w, &z0, args.tol, args.iters as usize)?;
        log::info!("restart {r}: stress {:e} after {} iterations", report.final_stress(), report.iterations_used);
        if best.as_ref().is_none_or(|(_, _, b)| report.final_stress() < b.final_stress()) {
            best = Some((r, z, report));
        }
    }
    let (restart, z, report) = best.expect("restarts >= 1");
    let final_stress = stress(&z, &d, &w)?;
    let scale: f64 = {
        let (dm, wm) = (d.as_matrix(), w.as_matrix());
        let n = d.size();
        (0..n).flat_map(|j| (j + 1..n).map(move |i| (i, j))).map(|(i, j)| wm[(i, j)] * dm[(i, j)].powi(2)).sum()
    };
    let relative = if scale > 0.0 { final_stress / scale } else { 0.0 };

    io::write_embedding(&run.output("embedding.csv"), &z)?;
    run.write_lines(
        "trace.jsonl",
        report.per_iteration.iter().enumerate().map(|(t, s)| json!({ "iteration": t, "stress": s })),
    )?;
    println!("stress: {final_stress:?}");
    println!("relative_stress: {relative:?}");
    let summary = json!({
        "stress": final_stress,
        "relative_stress": relative,
        "iterations": report.iterations_used,
        "converged": report.converged,
        "restart": restart,
    });
    let config = json!({ "dim": dim, "iters": args.iters, "tol": args.tol, "restarts": args.restarts });
    run.finish(args, config, seed, summary)
}

pub fn joint(args: &JointArgs) -> Result<()> {
    let mut run = Run::new("joint", &args.out)?;
    run.record_input(&args.input1)?;
    run.record_input(&args.input2)?;
    for path in [&args.metrics.labels1, &args.metrics.labels2, &args.metrics.truth].into_iter().flatten() {
        run.record_input(path)?;
    }
    let cfg = joint_config(&args.solver, JointConfig::default())?;
    let d1 = load_dissimilarity(&args.input1, &args.format, &args.prep)?;
    let d2 = load_dissimilarity(&args.input2, &args.format, &args.prep)?;
    let w1 = weights_for(&d1, args.prep.weight_exponent)?;
    let w2 = weights_for(&d2, args.prep.weight_exponent)?;
    let res = solve(&d1, &d2, &w1, &w2, &cfg)?;
    write_joint_outputs(&mut run, &res, args.sparse_coupling)?;

    let mut metrics = Metrics::default();
    let m = &args.metrics;
    let truth = m.truth.as_deref().map(|t| read_truth(t, d1.size(), d2.size())).transpose()?;
    transfer_metric(&mut metrics, &res.z1, &res.z2, (m.labels1.as_deref(), m.labels2.as_deref()), m.knn as usize)?;
    embedding_metrics(&mut metrics, &res.z1, &res.z2, truth.as_ref())?;
    coupling_metrics(&mut metrics, &res.p, truth.as_ref(), m.topk as usize)?;
    run.write_json("metrics.json", &metrics)?;

    println!("final_objective: {:?}", res.final_objective);
    print_metrics(&metrics);
    let summary = json!({ "final_objective": res.final_objective, "restart": res.restart_index, "metrics": metrics });
    run.finish(args, serde_json::to_value(&cfg)?, cfg.seed, summary)
}

/// Graph matching defaults differ from `joint`: a higher embedding dimension
/// and a Gromov-Wasserstein initial coupling.
pub fn match_defaults() -> JointConfig {
    JointConfig { d: 16, gw_init: true, ..JointConfig::default() }
}

pub fn match_graphs(args: &MatchArgs) -> Result<()> {
    let mut run = Run::new("match", &args.out)?;
    run.record_input(&args.edges1)?;
    run.record_input(&args.edges2)?;
    if let Some(t) = &args.truth {
        run.record_input(t)?;
    }
    let mut cfg = joint_config(&args.solver, match_defaults())?;
    cfg.gw_init = true;
    let prep = |path: &Path| -> Result<(DissimilarityMatrix, WeightMatrix)> {
        let mut d = graph_distances(path, args.graph)?;
        if args.rescale_mean {
            d = rescale_by_mean(&d)?;
        }
        let w = power_weight_matrix(&d, args.weight_exponent)?;
        Ok((d, w))
    };
    let (d1, w1) = prep(&args.edges1)?;
    let (d2, w2) = prep(&args.edges2)?;
    let res = solve(&d1, &d2, &w1, &w2, &cfg)?;
    write_joint_outputs(&mut run, &res, args.sparse_coupling)?;
    let matches = match_argmax(&res.p);
    io::write_pairs(&run.output("matches.csv"), &matches.iter().copied().enumerate().collect::<Vec<_>>())?;

    let mut metrics = Metrics::default();
    let truth = args.truth.as_deref().map(|t| read_truth(t, d1.size(), d2.size())).transpose()?;
    coupling_metrics(&mut metrics, &res.p, truth.as_ref(), args.topk as usize)?;
    match &truth {
        Some(t) => {
            let hits = matches.iter().enumerate().filter(|&(i, &j)| t.contains(i, j)).count();
            metrics.set("argmax_accuracy", hits as f64 / matches.len() as f64);
        }
        None => metrics.omit("argmax_accuracy", "no --truth given"),
    }
    run.write_json("metrics.json", &metrics)?;

    println!("final_objective: {:?}", res.final_objective);
    print_metrics(&metrics);
    let summary = json!({ "final_objective": res.final_objective, "restart": res.restart_index, "metrics": metrics });
    run.finish(args, serde_json::to_value(&cfg)?, cfg.seed, summary)
}

fn shape_error(what: &str, a: &Path, b: &Path) -> anyhow::Error {
    jointscale::Error::InvalidInput(format!("{what}: {} and {} are inconsistent", a.display(), b.display())).into()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let z1 = args.z1.as_deref().map(io::read_embedding).transpose()?;
    let z2 = args.z2.as_deref().map(io::read_embedding).transpose()?;
    let p = args.coupling.as_deref().map(io::read_coupling).transpose()?;
    let read_d = |path: &Path| -> Result<DissimilarityMatrix> {
        Ok(DissimilarityMatrix::new(io::read_matrix(path, CsvFormat::default())?)?)
    };
    let d1 = args.d1.as_deref().map(read_d).transpose()?;
    let d2 = args.d2.as_deref().map(read_d).transpose()?;

    if let (Some(a), Some(b), Some(pa), Some(pb)) = (&z1, &z2, &args.z1, &args.z2) {
        if a.dim() != b.dim() {
            return Err(shape_error("embedding dimensions differ", pa, pb));
        }
    }
    if let (Some(p), Some(path)) = (&p, &args.coupling) {
        let (rows, cols) = p.shape();
        for (z, zp, expected) in [(&z1, &args.z1, rows), (&z2, &args.z2, cols)] {
            if let (Some(z), Some(zp)) = (z, zp) {
                if z.nrows() != expected {
                    return Err(shape_error("coupling shape does not match embedding rows", path, zp));
                }
            }
        }
    }

    // Sizes of both sides, from whichever inputs carry them.
    let n1 = z1.as_ref().map(|z| z.nrows()).or(p.as_ref().map(|p| p.shape().0)).or(d1.as_ref().map(|d| d.size()));
    let n2 = z2.as_ref().map(|z| z.nrows()).or(p.as_ref().map(|p| p.shape().1)).or(d2.as_ref().map(|d| d.size()));
    let truth = match (&args.metrics.truth, n1, n2) {
        (Some(path), Some(n1), Some(n2)) => Some(read_truth(path, n1, n2)?),
        (Some(_), _, _) => bail!("--truth needs an embedding, coupling or dissimilarity for both sides"),
        _ => None,
    };
    // Without a truth file, equal-sized embeddings are taken as row-aligned.
    let identity = match (n1, n2) {
        (Some(a), Some(b)) if a == b && truth.is_none() => {
            Some(GroundTruthMatch::from_permutation(&(0..a).collect::<Vec<_>>())?)
        }
        _ => None,
    };
    let correspondence = truth.as_ref().or(identity.as_ref());

    let mut metrics = Metrics::default();
    match (&z1, &z2) {
        (Some(a), Some(b)) => {
            embedding_metrics(&mut metrics, a, b, correspondence)?;
            transfer_metric(
                &mut metrics,
                a,
                b,
                (args.metrics.labels1.as_deref(), args.metrics.labels2.as_deref()),
                args.metrics.knn as usize,
            )?;
        }
        _ => {
            metrics.omit("foscttm", "needs --z1 and --z2");
            metrics.omit("transfer_accuracy", "needs --z1 and --z2");
        }
    }
    match &p {
        Some(p) => coupling_metrics(&mut metrics, p, truth.as_ref(), args.metrics.topk as usize)?,
        None => {
            metrics.omit("node_correctness", "no --coupling given");
            metrics.omit("topk_accuracy", "no --coupling given");
        }
    }
    match (&d1, &d2, &z1, &z2, correspondence) {
        (Some(d1), Some(d2), Some(a), Some(b), Some(t)) => {
            if d1.size() != a.nrows() {
                return Err(shape_error(
                    "dissimilarity size does not match embedding",
                    args.d1.as_ref().unwrap(),
                    args.z1.as_ref().unwrap(),
                ));
            }
            if d2.size() != b.nrows() {
                return Err(shape_error(
                    "dissimilarity size does not match embedding",
                    args.d2.as_ref().unwrap(),
                    args.z2.as_ref().unwrap(),
                ));
            }
            match t.as_permutation() {
                Some(_) => metrics.set("rmsd_d", rmsd_d(d1, d2, a, b, t)?),
                None => metrics.omit("rmsd_d", "correspondence is not a permutation"),
            }
        }
        _ => metrics.omit("rmsd_d", "needs --d1, --d2, --z1, --z2 and a one-to-one correspondence"),
    }

    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(dir) = &args.out {
        let mut run = Run::new("eval", dir)?;
        for path in [
            &args.z1,
            &args.z2,
            &args.coupling,
            &args.d1,
            &args.d2,
            &args.metrics.truth,
            &args.metrics.labels1,
            &args.metrics.labels2,
        ]
        .into_iter()
        .flatten()
        {
            run.record_input(path)?;
        }
        run.write_json("metrics.json", &metrics)?;
        run.finish(args, Value::Null, 0, serde_json::to_value(&metrics)?)?;
    }
    Ok(())
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let mut run = Run::new("gen", &args.out)?;
    let seed = resolve_seed(args.seed)?;
    let kind = match args.kind {
        DatasetKind::Bifurcation => GenKind::Bifurcation,
        DatasetKind::SwissRoll => GenKind::SwissRoll,
        DatasetKind::CircularFrustum => GenKind::CircularFrustum,
    };
    let spec = GenSpec {
        noise_sigma: args.noise,
        ..GenSpec::new(kind, args.n as usize, args.p1 as usize, args.p2 as usize, seed)
    };
    let pair = generate(&spec)?;
    let fmt = CsvFormat::default();
    io::write_matrix(&run.output("x1.csv"), pair.x1.as_matrix(), fmt)?;
    io::write_matrix(&run.output("x2.csv"), pair.x2.as_matrix(), fmt)?;
    io::write_labels(&run.output("labels.csv"), &pair.labels)?;
    io::write_matrix(&run.output("latent.csv"), pair.latent.as_matrix(), fmt)?;
    let truth: Vec<(usize, usize)> = (0..pair.labels.len()).map(|i| (i, i)).collect();
    io::write_pairs(&run.output("truth.csv"), &truth)?;
    println!("wrote {} samples to {}", spec.n, args.out.display());
    run.finish(args, serde_json::to_value(&spec)?, seed, Value::Null)
}
