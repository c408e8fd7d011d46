//! Weak-information scenarios built from complete data: edge removal,
//! feature masking and scarce stratified labels. Also a planted-partition
//! generator used as a dataset-free test bed.
//!
//! All sampling is exact-count and driven by a seeded [`Pcg64`](crate::rng::Pcg64).

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::io::{format_key_values, parse_key_values, LabeledSplit};
use crate::matrix::DenseMatrix;
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub edge_missing_rate: f64,
    pub feature_missing_rate: f64,
    pub labels_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

const EDGE_STREAM: u64 = 1;
const FEATURE_STREAM: u64 = 2;
const LABEL_STREAM: u64 = 3;

impl ScenarioSpec {
    /// Half the edges removed, half the feature entries zeroed, five labels
    /// per class.
    pub fn extreme(seed: u64) -> Self {
        Self {
            edge_missing_rate: 0.5,
            feature_missing_rate: 0.5,
            labels_per_class: 5,
            val_per_class: 30,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("edge_missing_rate", self.edge_missing_rate),
            ("feature_missing_rate", self.feature_missing_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidParam(format!(
                    "{name} must lie in [0, 1), got {r}"
                )));
            }
        }
        if self.labels_per_class == 0 {
            return Err(Error::InvalidParam(
                "labels_per_class must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        format_key_values(&[
            ("edge_missing_rate", self.edge_missing_rate.to_string()),
            (
                "feature_missing_rate",
                self.feature_missing_rate.to_string(),
            ),
            ("labels_per_class", self.labels_per_class.to_string()),
            ("val_per_class", self.val_per_class.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn from_manifest(path: &Path, text: &str) -> Result<Self> {
        let map = parse_key_values(path, text)?;
        let field = |k: &str| {
            map.get(k).ok_or_else(|| Error::Parse {
                path: path.into(),
                line: 0,
                msg: format!("missing key {k}"),
            })
        };
        fn parse<V: std::str::FromStr>(
            path: &Path,
            k: &str,
            (line, v): &(usize, String),
        ) -> Result<V> {
            v.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: *line,
                msg: format!("bad value {v:?} for {k}"),
            })
        }
        let spec = Self {
            edge_missing_rate: parse(path, "edge_missing_rate", field("edge_missing_rate")?)?,
            feature_missing_rate: parse(
                path,
                "feature_missing_rate",
                field("feature_missing_rate")?,
            )?,
            labels_per_class: parse(path, "labels_per_class", field("labels_per_class")?)?,
            val_per_class: parse(path, "val_per_class", field("val_per_class")?)?,
            seed: parse(path, "seed", field("seed")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn exact_count(rate: f64, total: usize) -> usize {
    ((rate * total as f64).round() as usize).min(total)
}

/// Removes exactly `round(rate·m)` undirected edges, chosen uniformly.
pub fn drop_edges(g: &SparseGraph, rate: f64, seed: u64) -> Result<SparseGraph> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParam(format!(
            "edge rate must lie in [0, 1), got {rate}"
        )));
    }
    let edges: Vec<(usize, usize)> = g.edges().collect();
    let remove = exact_count(rate, edges.len());
    let mut dropped = vec![false; edges.len()];
    for i in index::sample(&mut seeded(seed), edges.len(), remove) {
        dropped[i] = true;
    }
    SparseGraph::from_edges(
        g.num_nodes(),
        edges
            .into_iter()
            .zip(dropped)
            .filter(|(_, d)| !d)
            .map(|(e, _)| e),
    )
}

/// Positions zeroed by [`mask_features`]; the implicit 0/1 mask `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Flat row-major indices of masked entries, ascending.
    pub zeroed: Vec<usize>,
}

impl MaskMatrix {
    pub fn to_dense<T: Scalar>(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::filled(self.rows, self.cols, T::one());
        for &p in &self.zeroed {
            m.as_mut_slice()[p] = T::zero();
        }
        m
    }

    pub fn apply<T: Scalar>(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        x.hadamard(&self.to_dense())
    }
}

/// Zeroes exactly `round(rate·n·d)` entries, uniform over positions.
pub fn mask_features<T: Scalar>(
    x: &DenseMatrix<T>,
    rate: f64,
    seed: u64,
) -> Result<(DenseMatrix<T>, MaskMatrix)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParam(format!(
            "feature rate must lie in [0, 1), got {rate}"
        )));
    }
    let total = x.rows() * x.cols();
    let mut zeroed = index::sample(&mut seeded(seed), total, exact_count(rate, total)).into_vec();
    zeroed.sort_unstable();
    let mut out = x.clone();
    for &p in &zeroed {
        out.as_mut_slice()[p] = T::zero();
    }
    Ok((
        out,
        MaskMatrix {
            rows: x.rows(),
            cols: x.cols(),
            zeroed,
        },
    ))
}

/// Stratified split: per class, `labels_per_class` train and `val_per_class`
/// validation nodes drawn uniformly; everything else is test.
pub fn sample_labels(
    classes: &[usize],
    num_classes: usize,
    labels_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<LabeledSplit> {
    if labels_per_class == 0 {
        return Err(Error::InvalidParam(
            "labels_per_class must be at least 1".into(),
        ));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (v, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Dataset(format!(
                "class id {c} outside [0, {num_classes})"
            )));
        }
        members[c].push(v);
    }
    let need = labels_per_class + val_per_class;
    let mut rng = seeded(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, nodes) in members.iter_mut().enumerate() {
        if nodes.len() < need {
            return Err(Error::ClassTooSmall {
                class,
                have: nodes.len(),
                need,
            });
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..labels_per_class]);
        val.extend_from_slice(&nodes[labels_per_class..need]);
        test.extend_from_slice(&nodes[need..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(LabeledSplit {
        classes: classes.to_vec(),
        num_classes,
        train,
        val,
        test,
    })
}

/// Graph, features and split after applying a scenario.
#[derive(Clone, Debug)]
pub struct ScenarioData<T> {
    pub graph: SparseGraph,
    pub features: DenseMatrix<T>,
    pub mask: MaskMatrix,
    pub split: LabeledSplit,
}

/// Applies all three deficiencies, each from its own seed stream.
pub fn apply_scenario<T: Scalar>(
    graph: &SparseGraph,
    features: &DenseMatrix<T>,
    classes: &[usize],
    num_classes: usize,
    spec: &ScenarioSpec,
) -> Result<ScenarioData<T>> {
    spec.validate()?;
    let graph = drop_edges(
        graph,
        spec.edge_missing_rate,
        derive_seed(spec.seed, &[EDGE_STREAM]),
    )?;
    let (features, mask) = mask_features(
        features,
        spec.feature_missing_rate,
        derive_seed(spec.seed, &[FEATURE_STREAM]),
    )?;
    let split = sample_labels(
        classes,
        num_classes,
        spec.labels_per_class,
        spec.val_per_class,
        derive_seed(spec.seed, &[LABEL_STREAM]),
    )?;
    Ok(ScenarioData {
        graph,
        features,
        mask,
        split,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedPartition {
    pub nodes: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    /// Length of each class centroid; centroids lie on distinct coordinate axes.
    pub centroid_sep: f64,
    pub seed: u64,
}

/// A graph with homophilous structure plus Gaussian class-conditional features.
#[derive(Clone, Debug)]
pub struct SyntheticData<T> {
    pub graph: SparseGraph,
    pub features: DenseMatrix<T>,
    pub classes: Vec<usize>,
}

impl PlantedPartition {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.classes == 0 || !self.nodes.is_multiple_of(self.classes) {
            return bad(format!(
                "{} nodes not divisible into {} classes",
                self.nodes, self.classes
            ));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.p_in <= self.p_out {
            return bad(format!(
                "p_in {} must exceed p_out {}",
                self.p_in, self.p_out
            ));
        }
        if self.dim < self.classes {
            return bad(format!(
                "feature dim {} below class count {}",
                self.dim, self.classes
            ));
        }
        if !self.centroid_sep.is_finite() {
            return bad("centroid_sep must be finite".into());
        }
        Ok(())
    }

    /// Expected number of undirected edges.
    pub fn expected_edges(&self) -> f64 {
        let s = (self.nodes / self.classes) as f64;
        let c = self.classes as f64;
        c * s * (s - 1.0) / 2.0 * self.p_in + c * (c - 1.0) / 2.0 * s * s * self.p_out
    }

    pub fn generate<T: Scalar>(&self) -> Result<SyntheticData<T>> {
        self.validate()?;
        let block = self.nodes / self.classes;
        let classes: Vec<usize> = (0..self.nodes).map(|v| v / block).collect();
        let mut rng = seeded(derive_seed(self.seed, &[0]));
        let mut edges = Vec::new();
        for i in 0..self.nodes {
            for j in i + 1..self.nodes {
                let p = if classes[i] == classes[j] {
                    self.p_in
                } else {
                    self.p_out
                };
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let graph = SparseGraph::from_edges(self.nodes, edges)?;
        let mut rng = seeded(derive_seed(self.seed, &[1]));
        let features = DenseMatrix::from_fn(self.nodes, self.dim, |i, j| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centroid = if j == classes[i] {
                self.centroid_sep
            } else {
                0.0
            };
            T::lit(centroid + noise)
        });
        Ok(SyntheticData {
            graph,
            features,
            classes,
        })
    }
}

/// Convenience wrapper over [`PlantedPartition::generate`].
#[allow(clippy::too_many_arguments)]
pub fn planted_partition<T: Scalar>(
    n: usize,
    c: usize,
    p_in: f64,
    p_out: f64,
    d: usize,
    centroid_sep: f64,
    seed: u64,
) -> Result<SyntheticData<T>> {
    PlantedPartition {
        nodes: n,
        classes: c,
        p_in,
        p_out,
        dim: d,
        centroid_sep,
        seed,
    }
    .generate()
}
