#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn jointscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointscale"))
        .args(args)
        .env_remove("JOINTSCALE_SEED")
        .output()
        .expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("json file exists")).expect("valid json")
}

pub fn metric(dir: &Path, name: &str) -> f64 {
    read_json(&dir.join("metrics.json"))["metrics"][name]
        .as_f64()
        .unwrap_or_else(|| panic!("metric {name} missing in {}", dir.display()))
}

/// Undirected G(n, p) edges, resampled until connected.
pub fn connected_er(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    loop {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        if is_connected(n, &edges) {
            return edges;
        }
    }
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub type Edges = Vec<(usize, usize)>;

/// A connected ER graph, a copy relabelled by a random permutation, and
/// that permutation (`node i` of the first is `perm[i]` of the second).
pub fn planted_graphs(n: usize, p: f64, seed: u64) -> (Edges, Edges, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = connected_er(n, p, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let relabelled = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
    (edges, relabelled, perm)
}

pub fn write_edges(path: &Path, edges: &[(usize, usize)]) {
    let text: String = edges.iter().map(|(i, j)| format!("{i} {j}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn write_truth(path: &Path, perm: &[usize]) {
    let text: String = perm.iter().enumerate().map(|(i, j)| format!("{i},{j}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn write_csv(path: &Path, rows: &[Vec<f64>]) {
    let text: String =
        rows.iter().map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n").collect();
    fs::write(path, text).unwrap();
}

/// Euclidean distance matrix of the given points.
pub fn distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()).collect())
        .collect()
}

pub fn uniform_points(n: usize, d: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..scale)).collect()).collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
