//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code it is used to check.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use weakgraph::rng::{seeded, Pcg64};
use weakgraph::{DenseMatrix, Metric, SparseGraph};

pub fn gaussian(rows: usize, cols: usize, rng: &mut Pcg64) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random connected graph: a random spanning tree plus extra random edges.
pub fn random_connected_graph(n: usize, extra: usize, rng: &mut Pcg64) -> SparseGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    SparseGraph::from_edges(n, edges).unwrap()
}

fn oracle_similarity(x: &DenseMatrix<f64>, i: usize, j: usize, metric: Metric) -> f64 {
    let (a, b) = (x.row(i), x.row(j));
    match metric {
        Metric::Cosine => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return f64::NEG_INFINITY;
            }
            a.iter().zip(b).map(|(p, q)| (p / na) * (q / nb)).sum()
        }
        Metric::Euclidean => -a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt(),
    }
}

/// O(n²d) all-pairs kNN: full sort of every row by (similarity desc, id asc),
/// union of each node's first `k`.
pub fn brute_force_knn(x: &DenseMatrix<f64>, k: usize, metric: Metric) -> BTreeSet<(usize, usize)> {
    let n = x.rows();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (oracle_similarity(x, i, j, metric), j))
            .collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

pub fn edge_set(g: &SparseGraph) -> BTreeSet<(usize, usize)> {
    g.edges().collect()
}

/// Independent scalar recomputation of the prototype alignment loss over the
/// classes valid in both sets.
pub fn cpa_oracle(p: &DenseMatrix<f64>, q: &DenseMatrix<f64>, valid: &[bool], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let f = |a: &[f64], b: &[f64]| (cos(a, b) / tau).exp();
    let classes: Vec<usize> = (0..valid.len()).filter(|&j| valid[j]).collect();
    let mut total = 0.0;
    for &j in &classes {
        let pos = f(p.row(j), q.row(j));
        let row: f64 = classes
            .iter()
            .filter(|&&m| m != j)
            .map(|&m| f(p.row(j), q.row(m)))
            .sum();
        let col: f64 = classes
            .iter()
            .filter(|&&m| m != j)
            .map(|&m| f(p.row(m), q.row(j)))
            .sum();
        total += (pos / row).ln() + (pos / col).ln();
    }
    -total / (2.0 * classes.len() as f64)
}

/// Relative error with an absolute floor so entries that are zero on both
/// sides do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random points with some duplicated rows (exact similarity ties) and, for
/// cosine, an occasional all-zero row.
pub fn knn_instance(seed: u64, n: usize, d: usize, with_zero_row: bool) -> DenseMatrix<f64> {
    let mut rng = seeded(seed);
    let mut x = gaussian(n, d, &mut rng);
    let dups = n / 10;
    for _ in 0..dups {
        let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
        let row = x.row(src).to_vec();
        x.row_mut(dst).copy_from_slice(&row);
    }
    if with_zero_row {
        let z = rng.random_range(0..n);
        x.row_mut(z).fill(0.0);
    }
    x
}
