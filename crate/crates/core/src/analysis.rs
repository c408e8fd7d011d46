//! Stray-node diagnostics: component structure, how far propagation moves
//! features, and accuracy inside versus outside the largest component.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{connected_components, stray_mask, SparseGraph};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// A per-group statistic; `None` when the group is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupSplit {
    pub lcc: Option<f64>,
    pub stray: Option<f64>,
}

/// Mean of `‖X_i − X̄_i‖₂` within LCC nodes and within stray nodes.
pub fn feature_shift<T: Scalar>(
    x: &DenseMatrix<T>,
    x_bar: &DenseMatrix<T>,
    stray: &[bool],
) -> Result<GroupSplit> {
    if x.shape() != x_bar.shape() || stray.len() != x.rows() {
        return Err(Error::shape(
            "feature_shift",
            format!("{:?} with {} mask entries", x.shape(), x.rows()),
            format!("{:?} with {} mask entries", x_bar.shape(), stray.len()),
        ));
    }
    let dist: Vec<f64> = (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x_bar.row(i))
                .map(|(&a, &b)| (a.widen() - b.widen()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(split_means(&dist, stray, |_| true))
}

fn split_means(values: &[f64], stray: &[bool], include: impl Fn(usize) -> bool) -> GroupSplit {
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (i, &v) in values.iter().enumerate() {
        if include(i) {
            let g = stray[i] as usize;
            sums[g] += v;
            counts[g] += 1;
        }
    }
    let mean = |g: usize| (counts[g] > 0).then(|| sums[g] / counts[g] as f64);
    GroupSplit {
        lcc: mean(0),
        stray: mean(1),
    }
}

/// Accuracy on `test` nodes, split by LCC membership.
pub fn accuracy_split(
    predictions: &[usize],
    truths: &[usize],
    test: &[usize],
    stray: &[bool],
) -> Result<GroupSplit> {
    if predictions.len() != truths.len() || stray.len() != truths.len() {
        return Err(Error::shape(
            "accuracy_split",
            format!("{} entries", truths.len()),
            format!(
                "{} predictions, {} mask entries",
                predictions.len(),
                stray.len()
            ),
        ));
    }
    let mut in_test = vec![false; truths.len()];
    for &v in test {
        *in_test
            .get_mut(v)
            .ok_or_else(|| Error::InvalidParam(format!("test node {v} out of range")))? = true;
    }
    let correct: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p == t) as u8 as f64)
        .collect();
    Ok(split_means(&correct, stray, |i| in_test[i]))
}

/// Fraction of `test` nodes predicted correctly.
pub fn accuracy(predictions: &[usize], truths: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&v| predictions[v] == truths[v])
        .count();
    hits as f64 / nodes.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrayReport {
    pub num_nodes: usize,
    pub num_components: usize,
    pub lcc_fraction: f64,
    pub isolated_fraction: f64,
    /// Fraction of nodes in non-LCC components of size ≥ 2.
    pub stray_subgraph_fraction: f64,
    /// Component size → number of components of that size.
    pub size_histogram: BTreeMap<usize, usize>,
    pub shift: GroupSplit,
    pub accuracy: Option<GroupSplit>,
}

impl StrayReport {
    /// Builds the structural part of the report and the feature shift.
    /// `predictions` with `(predicted, truths, test)` adds the accuracy split.
    pub fn build<T: Scalar>(
        graph: &SparseGraph,
        x: &DenseMatrix<T>,
        x_bar: &DenseMatrix<T>,
        predictions: Option<(&[usize], &[usize], &[usize])>,
    ) -> Result<Self> {
        let labeling = connected_components(graph);
        let stray = stray_mask(&labeling);
        let n = graph.num_nodes();
        let mut size_histogram = BTreeMap::new();
        for &s in &labeling.component_sizes {
            *size_histogram.entry(s).or_insert(0) += 1;
        }
        let isolated = (0..n).filter(|&v| graph.degree(v) == 0).count();
        let stray_count = stray.iter().filter(|&&s| s).count();
        // A singleton LCC is isolated but not stray.
        let isolated_stray = (0..n).filter(|&v| stray[v] && graph.degree(v) == 0).count();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let accuracy = predictions
            .map(|(p, t, test)| accuracy_split(p, t, test, &stray))
            .transpose()?;
        Ok(Self {
            num_nodes: n,
            num_components: labeling.num_components(),
            lcc_fraction: frac(labeling.lcc_size()),
            isolated_fraction: frac(isolated),
            stray_subgraph_fraction: frac(stray_count - isolated_stray),
            size_histogram,
            shift: feature_shift(x, x_bar, &stray)?,
            accuracy,
        })
    }

    fn fmt_opt(v: Option<f64>) -> String {
        v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
    }

    /// `key = value` rendering.
    pub fn to_key_values(&self) -> String {
        let hist: Vec<String> = self
            .size_histogram
            .iter()
            .map(|(s, c)| format!("{s}:{c}"))
            .collect();
        let acc = self.accuracy.unwrap_or(GroupSplit {
            lcc: None,
            stray: None,
        });
        crate::io::format_key_values(&[
            ("num_nodes", self.num_nodes.to_string()),
            ("num_components", self.num_components.to_string()),
            ("lcc_fraction", format!("{:.6}", self.lcc_fraction)),
            (
                "isolated_fraction",
                format!("{:.6}", self.isolated_fraction),
            ),
            (
                "stray_subgraph_fraction",
                format!("{:.6}", self.stray_subgraph_fraction),
            ),
            ("component_size_histogram", hist.join(",")),
            ("mean_l2_shift_lcc", Self::fmt_opt(self.shift.lcc)),
            ("mean_l2_shift_stray", Self::fmt_opt(self.shift.stray)),
            ("acc_lcc", Self::fmt_opt(acc.lcc)),
            ("acc_stray", Self::fmt_opt(acc.stray)),
        ])
    }

    /// Single tab-separated line: `stray_report` followed by `key=value` fields.
    pub fn to_record_line(&self) -> String {
        let acc = self.accuracy.unwrap_or(GroupSplit {
            lcc: None,
            stray: None,
        });
        format!(
            "stray_report\tn={}\tcomponents={}\tlcc_fraction={:.6}\tisolated_fraction={:.6}\tshift_lcc={}\tshift_stray={}\tacc_lcc={}\tacc_stray={}",
            self.num_nodes,
            self.num_components,
            self.lcc_fraction,
            self.isolated_fraction,
            Self::fmt_opt(self.shift.lcc),
            Self::fmt_opt(self.shift.stray),
            Self::fmt_opt(acc.lcc),
            Self::fmt_opt(acc.stray),
        )
    }
}
