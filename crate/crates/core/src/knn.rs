//! kNN global-graph construction over propagated features.
//!
//! An undirected edge `(i, j)` exists when `j` is among the `k` most similar
//! rows to `i` or vice versa. [`knn_exact`] compares all pairs;
//! [`glocal_knn`] searches only inside random batches, twice with independent
//! splits, and unions the two batch-local graphs.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::DenseMatrix;
use crate::parallel::use_parallel;
use crate::rng::seeded;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    /// Minkowski with p = 2.
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" | "minkowski" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidParam(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnParams {
    pub k: usize,
    pub metric: Metric,
    /// Neighbors per node in the first glocal split.
    pub k1: usize,
    /// Neighbors per node in the second glocal split.
    pub k2: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl KnnParams {
    pub fn exact(k: usize, metric: Metric) -> Self {
        Self {
            k,
            metric,
            k1: k.div_ceil(2),
            k2: k / 2,
            batch_size: 0,
            seed: 0,
        }
    }

    pub fn glocal(k1: usize, k2: usize, batch_size: usize, metric: Metric, seed: u64) -> Self {
        Self {
            k: k1 + k2,
            metric,
            k1,
            k2,
            batch_size,
            seed,
        }
    }
}

/// Per-row data the similarity kernel needs, widened to `f64`.
struct Points {
    data: DenseMatrix<f64>,
    norms: Vec<f64>,
    metric: Metric,
}

impl Points {
    fn new<T: Scalar>(x: &DenseMatrix<T>, metric: Metric) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite("kNN input features"));
        }
        let data: DenseMatrix<f64> = x.cast();
        let norms = (0..data.rows())
            .map(|i| data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            data,
            norms,
            metric,
        })
    }

    /// Larger is more similar. Euclidean uses negated squared distance, which
    /// ranks identically to distance.
    fn similarity(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.data.row(i), self.data.row(j));
        match self.metric {
            Metric::Cosine => {
                let denom = self.norms[i] * self.norms[j];
                if denom == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom
                }
            }
            Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        }
    }
}

/// Descending similarity, then ascending node id.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Top-`k` neighbors of every member, searched only among `members`.
fn batch_top_k(points: &Points, members: &[usize], k: usize) -> Vec<(usize, usize)> {
    let per_member = |&i: &usize| {
        let mut cand: Vec<(f64, usize)> = members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (points.similarity(i, j), j))
            .collect();
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, rank_order);
            cand.truncate(k);
        }
        cand.into_iter().map(|(_, j)| (i, j)).collect::<Vec<_>>()
    };
    let work = members.len() * members.len() * points.data.cols().max(1);
    if use_parallel(work) {
        members.par_iter().flat_map_iter(per_member).collect()
    } else {
        members.iter().flat_map(per_member).collect()
    }
}

pub fn knn_exact<T: Scalar>(
    propagated: &DenseMatrix<T>,
    params: &KnnParams,
) -> Result<SparseGraph> {
    let n = propagated.rows();
    if n < 2 {
        return Err(Error::InvalidParam(format!(
            "kNN needs at least 2 nodes, got {n}"
        )));
    }
    if params.k == 0 || params.k >= n {
        return Err(Error::InvalidParam(format!(
            "k must satisfy 1 <= k < n = {n}, got {}",
            params.k
        )));
    }
    let points = Points::new(propagated, params.metric)?;
    let all: Vec<usize> = (0..n).collect();
    SparseGraph::from_edges(n, batch_top_k(&points, &all, params.k))
}

/// Splits a permutation into batches of `b`; a trailing batch too small to
/// supply `k` neighbors joins the previous one.
fn split_batches(order: &[usize], b: usize, k: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(b).collect();
    if batches.len() > 1 && batches.last().unwrap().len() < k + 1 {
        batches.pop();
        let start = (batches.len() - 1) * b;
        *batches.last_mut().unwrap() = &order[start..];
    }
    batches
}

pub fn glocal_knn<T: Scalar>(
    propagated: &DenseMatrix<T>,
    params: &KnnParams,
) -> Result<SparseGraph> {
    let n = propagated.rows();
    let (k1, k2, b) = (params.k1, params.k2, params.batch_size);
    if k1 == 0 || k2 == 0 {
        return Err(Error::InvalidParam(
            "glocal k1 and k2 must be positive".into(),
        ));
    }
    if k1 + k2 != params.k {
        return Err(Error::InvalidParam(format!(
            "glocal requires k1 + k2 = k, got {k1} + {k2} != {}",
            params.k
        )));
    }
    let need = k1.max(k2) + 1;
    if b < need {
        return Err(Error::InvalidParam(format!(
            "batch size {b} cannot supply {} neighbors",
            need - 1
        )));
    }
    if n < need {
        return Err(Error::InvalidParam(format!(
            "{n} nodes cannot supply {} neighbors",
            need - 1
        )));
    }
    let points = Points::new(propagated, params.metric)?;
    let mut edges = Vec::new();
    for (split, k_split) in [(0u64, k1), (1, k2)] {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(params.seed.wrapping_add(split)));
        for batch in split_batches(&order, b, k_split) {
            edges.extend(batch_top_k(&points, batch, k_split));
        }
    }
    SparseGraph::from_edges(n, edges)
}
