//! End-to-end training: one-time preprocessing (diffusion, global kNN graph,
//! global-graph diffusion), then dual-channel epochs with validation-based
//! checkpoint selection.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;

use crate::analysis::accuracy;
use crate::diffusion::{diffuse, DiffusionParams};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, SparseGraph};
use crate::io::{format_key_values, parse_key_values, LabeledSplit};
use crate::knn::{glocal_knn, knn_exact, KnnParams, Metric};
use crate::matrix::DenseMatrix;
use crate::model::{
    build_objective, predict, Checkpoint, CheckpointHeader, DropoutSites, ModelDims, ModelParams,
    ObjectiveInputs, ObjectiveWeights,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KnnMode {
    #[default]
    Exact,
    Glocal,
}

impl FromStr for KnnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(KnnMode::Exact),
            "glocal" => Ok(KnnMode::Glocal),
            other => Err(Error::InvalidParam(format!("unknown knn mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for KnnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KnnMode::Exact => "exact",
            KnnMode::Glocal => "glocal",
        })
    }
}

/// Channel whose output is used for validation and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InferenceChannel {
    #[default]
    Original,
    Global,
}

impl FromStr for InferenceChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(InferenceChannel::Original),
            "global" => Ok(InferenceChannel::Global),
            other => Err(Error::InvalidParam(format!(
                "unknown inference channel {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for InferenceChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InferenceChannel::Original => "original",
            InferenceChannel::Global => "global",
        })
    }
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub restart_alpha: f64,
    pub knn_mode: KnnMode,
    pub k: usize,
    pub k1: usize,
    pub k2: usize,
    pub knn_batch: usize,
    pub metric: Metric,
    pub tau: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub dropout_input: bool,
    pub dropout_hidden: bool,
    pub hidden: usize,
    /// Projection width; 0 means "same as hidden".
    pub projection: usize,
    /// Unlabeled nodes sampled per epoch; 0 trains on all nodes.
    pub batch_nodes: usize,
    pub include_positive_in_denominator: bool,
    pub inference_channel: InferenceChannel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            restart_alpha: 0.1,
            knn_mode: KnnMode::Exact,
            k: 10,
            k1: 5,
            k2: 5,
            knn_batch: 1024,
            metric: Metric::Cosine,
            tau: 0.3,
            gamma1: 1.0,
            gamma2: 1.0,
            epochs: 200,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            dropout_input: true,
            dropout_hidden: true,
            hidden: 64,
            projection: 0,
            batch_nodes: 0,
            include_positive_in_denominator: false,
            inference_channel: InferenceChannel::Original,
            seed: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "iterations",
    "alpha",
    "knn_mode",
    "k",
    "k1",
    "k2",
    "knn_batch",
    "metric",
    "tau",
    "gamma1",
    "gamma2",
    "epochs",
    "lr",
    "weight_decay",
    "dropout",
    "dropout_input",
    "dropout_hidden",
    "hidden",
    "projection",
    "batch_nodes",
    "include_positive_in_denominator",
    "inference_channel",
    "seed",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::InvalidParam(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn projection_width(&self) -> usize {
        if self.projection == 0 {
            self.hidden
        } else {
            self.projection
        }
    }

    pub fn diffusion(&self) -> Result<DiffusionParams> {
        DiffusionParams::new(self.restart_alpha, self.iterations)
    }

    pub fn knn_params(&self) -> KnnParams {
        match self.knn_mode {
            KnnMode::Exact => KnnParams::exact(self.k, self.metric),
            KnnMode::Glocal => KnnParams {
                k: self.k,
                metric: self.metric,
                k1: self.k1,
                k2: self.k2,
                batch_size: self.knn_batch,
                seed: derive_seed(self.seed, &[KNN_STREAM]),
            },
        }
    }

    pub fn objective_weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            tau: self.tau,
            include_positive: self.include_positive_in_denominator,
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" | "T" => self.iterations = parse_value(key, value)?,
            "alpha" => self.restart_alpha = parse_value(key, value)?,
            "knn_mode" => self.knn_mode = value.parse()?,
            "k" => self.k = parse_value(key, value)?,
            "k1" => self.k1 = parse_value(key, value)?,
            "k2" => self.k2 = parse_value(key, value)?,
            "knn_batch" => self.knn_batch = parse_value(key, value)?,
            "metric" => self.metric = value.parse()?,
            "tau" => self.tau = parse_value(key, value)?,
            "gamma1" => self.gamma1 = parse_value(key, value)?,
            "gamma2" => self.gamma2 = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "dropout_input" => self.dropout_input = parse_value(key, value)?,
            "dropout_hidden" => self.dropout_hidden = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "projection" => self.projection = parse_value(key, value)?,
            "batch_nodes" => self.batch_nodes = parse_value(key, value)?,
            "include_positive_in_denominator" => {
                self.include_positive_in_denominator = parse_value(key, value)?
            }
            "inference_channel" => self.inference_channel = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::InvalidParam(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<()> {
        for (key, (line, value)) in parse_key_values(path, text)? {
            self.set(&key, &value).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format_key_values(&[
            ("iterations", self.iterations.to_string()),
            ("alpha", self.restart_alpha.to_string()),
            ("knn_mode", self.knn_mode.to_string()),
            ("k", self.k.to_string()),
            ("k1", self.k1.to_string()),
            ("k2", self.k2.to_string()),
            ("knn_batch", self.knn_batch.to_string()),
            ("metric", self.metric.to_string()),
            ("tau", self.tau.to_string()),
            ("gamma1", self.gamma1.to_string()),
            ("gamma2", self.gamma2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("dropout_input", self.dropout_input.to_string()),
            ("dropout_hidden", self.dropout_hidden.to_string()),
            ("hidden", self.hidden.to_string()),
            ("projection", self.projection.to_string()),
            ("batch_nodes", self.batch_nodes.to_string()),
            (
                "include_positive_in_denominator",
                self.include_positive_in_denominator.to_string(),
            ),
            ("inference_channel", self.inference_channel.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion()?;
        let bad = |m: String| Err(Error::InvalidParam(m));
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("lr", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.knn_mode == KnnMode::Glocal && self.k1 + self.k2 != self.k {
            return bad(format!(
                "k1 + k2 must equal k ({} + {} != {})",
                self.k1, self.k2, self.k
            ));
        }
        Ok(())
    }
}

const KNN_STREAM: u64 = 0x6b6e6e;
const BATCH_STREAM: u64 = 0x6261;
const DROPOUT_STREAM: u64 = 0x6470;

/// Preprocessed inputs for both channels.
#[derive(Clone, Debug)]
pub struct Preprocessed<T> {
    pub x_bar: DenseMatrix<T>,
    pub global_graph: SparseGraph,
    pub x_bar_global: DenseMatrix<T>,
}

/// Diffuses raw features over the original graph, builds the kNN graph from
/// the result, then diffuses the *raw* features again over that kNN graph.
pub fn preprocess<T: Scalar>(
    graph: &SparseGraph,
    features: &DenseMatrix<T>,
    cfg: &TrainConfig,
) -> Result<Preprocessed<T>> {
    cfg.validate()?;
    let diffusion = cfg.diffusion()?;
    let x_bar = diffuse(features, &normalize_adjacency(graph), &diffusion)?;
    let knn = cfg.knn_params();
    let global_graph = match cfg.knn_mode {
        KnnMode::Exact => knn_exact(&x_bar, &knn)?,
        KnnMode::Glocal => glocal_knn(&x_bar, &knn)?,
    };
    let x_bar_global = diffuse(features, &normalize_adjacency(&global_graph), &diffusion)?;
    Ok(Preprocessed {
        x_bar,
        global_graph,
        x_bar_global,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub ce_global: Option<f64>,
    pub cpa: Option<f64>,
    pub total: f64,
    pub val_acc: f64,
    pub cpa_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub warnings: Vec<String>,
}

pub const REPORT_HEADER: &str = "epoch,L_ce,L_ce_prime,L_cpa,total,val_acc";

impl TrainReport {
    /// One header line then one comma-separated line per epoch; absent
    /// channel losses are written as `NA`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.ce,
                opt(r.ce_global),
                opt(r.cpa),
                r.total,
                r.val_acc
            )
            .unwrap();
        }
        out
    }
}

/// Result of a training run: the report plus the selected and final models.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub best: ModelParams<T>,
    pub last: ModelParams<T>,
    pub optimizer: AdamW<T>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                dims: self.best.dims(),
                iterations: cfg.iterations,
                restart_alpha: cfg.restart_alpha,
            },
            params: self.best.clone(),
            moments: Some(self.optimizer.moments().to_vec()),
        }
    }
}

/// Nodes forming this epoch's scope (sorted) and the row of each training
/// node within it.
fn epoch_scope(
    n: usize,
    split: &LabeledSplit,
    unlabeled: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<usize> {
    if cfg.batch_nodes == 0 {
        return (0..n).collect();
    }
    let take = cfg.batch_nodes.min(unlabeled.len());
    let mut rng = seeded(derive_seed(cfg.seed, &[BATCH_STREAM, epoch as u64]));
    let mut scope: Vec<usize> = index::sample(&mut rng, unlabeled.len(), take)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect();
    scope.extend_from_slice(&split.train);
    scope.sort_unstable();
    scope
}

/// Trains on preprocessed features. With `x_bar_global = None` only the
/// original channel exists: no global forward pass, projection or prototypes.
pub fn train<T: Scalar>(
    x_bar: &DenseMatrix<T>,
    x_bar_global: Option<&DenseMatrix<T>>,
    split: &LabeledSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    split.validate()?;
    let n = x_bar.rows();
    if split.num_nodes() != n {
        return Err(Error::shape(
            "train",
            format!("{n} labeled nodes"),
            split.num_nodes(),
        ));
    }
    if let Some(g) = x_bar_global {
        if g.shape() != x_bar.shape() {
            return Err(Error::shape(
                "train",
                format!("{:?}", x_bar.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    if split.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if split.val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if cfg.inference_channel == InferenceChannel::Global && x_bar_global.is_none() {
        return Err(Error::InvalidParam(
            "global inference channel needs global features".into(),
        ));
    }
    let dims = ModelDims {
        input: x_bar.cols(),
        hidden: cfg.hidden,
        projection: cfg.projection_width(),
        classes: split.num_classes,
    };
    let mut params = ModelParams::<T>::init(dims, cfg.seed);
    let shapes = [params.w1.shape(), params.w2.shape(), params.w3.shape()];
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.learning_rate, cfg.weight_decay),
        &shapes,
    );
    let weights = cfg.objective_weights();

    let mut is_train = vec![false; n];
    for &v in &split.train {
        is_train[v] = true;
    }
    let unlabeled: Vec<usize> = (0..n).filter(|&v| !is_train[v]).collect();
    let val_source = match cfg.inference_channel {
        InferenceChannel::Original => x_bar,
        InferenceChannel::Global => x_bar_global.expect("checked above"),
    };
    let x_val = val_source.select_rows(&split.val);
    let val_truth: Vec<usize> = split.val.iter().map(|&v| split.classes[v]).collect();
    let val_rows: Vec<usize> = (0..split.val.len()).collect();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut degenerate_epochs = 0;
    for epoch in 1..=cfg.epochs {
        let scope = epoch_scope(n, split, &unlabeled, cfg, epoch);
        let labeled: Vec<(usize, usize)> = scope
            .iter()
            .enumerate()
            .filter(|(_, &v)| is_train[v])
            .map(|(row, &v)| (row, split.classes[v]))
            .collect();
        let full = scope.len() == n;
        let x = if full {
            x_bar.clone()
        } else {
            x_bar.select_rows(&scope)
        };
        let xg = x_bar_global.map(|g| {
            if full {
                g.clone()
            } else {
                g.select_rows(&scope)
            }
        });
        let tag = epoch as u64;
        let inputs = ObjectiveInputs {
            x: &x,
            x_global: xg.as_ref(),
            labeled: &labeled,
            dropout_rate: cfg.dropout,
            dropout_sites: DropoutSites {
                input: cfg.dropout_input,
                hidden: cfg.dropout_hidden,
            },
            training: true,
            channel_seeds: [
                derive_seed(cfg.seed, &[DROPOUT_STREAM, tag, 0]),
                derive_seed(cfg.seed, &[DROPOUT_STREAM, tag, 1]),
            ],
            allocation: None,
        };
        let objective = build_objective(&params, &inputs, &weights)?;
        let total = objective.total();
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if objective.cpa_degenerate {
            degenerate_epochs += 1;
        }
        let [g1, g2, g3] = objective.gradients();
        {
            let ModelParams { w1, w2, w3 } = &mut params;
            opt.step(&mut [w1, w2, w3], &[g1.as_ref(), g2.as_ref(), g3.as_ref()]);
        }
        let preds = predict(&params, &x_val)?;
        let val_acc = accuracy(&preds, &val_truth, &val_rows);
        records.push(EpochRecord {
            epoch,
            ce: objective.ce.widen(),
            ce_global: objective.ce_global.map(Scalar::widen),
            cpa: objective.cpa.map(Scalar::widen),
            total: total.widen(),
            val_acc,
            cpa_degenerate: objective.cpa_degenerate,
        });
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best = params.clone();
        }
        log::debug!("epoch {epoch}: loss {} val_acc {val_acc:.4}", total.widen());
    }
    let mut warnings = Vec::new();
    if x_bar_global.is_some() && degenerate_epochs * 2 > cfg.epochs {
        warnings.push(format!(
            "prototype alignment had fewer than two valid classes in {degenerate_epochs} of {} epochs",
            cfg.epochs
        ));
    }
    Ok(TrainOutcome {
        report: TrainReport {
            epochs: records,
            best_epoch,
            best_val_acc: best_val,
            warnings,
        },
        best,
        last: params,
        optimizer: opt,
    })
}

/// Predicts with a stored checkpoint after checking its header against `x_bar`.
pub fn predict_checkpoint<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    x_bar: &DenseMatrix<T>,
) -> Result<Vec<usize>> {
    if x_bar.cols() != checkpoint.header.dims.input {
        return Err(Error::shape(
            "predict",
            format!("{} feature columns", checkpoint.header.dims.input),
            format!("{} feature columns", x_bar.cols()),
        ));
    }
    predict(&checkpoint.params, x_bar)
}
