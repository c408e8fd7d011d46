//! Training node classifiers on graphs with missing edges, missing features
//! and few labels: feature diffusion over the observed graph and over a kNN
//! graph built from the diffused features, a shared MLP trained on both, and a
//! contrastive loss aligning class prototypes across the two channels.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common `f64` choice.

pub mod analysis;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod io;
pub mod knn;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod trainer;

pub use analysis::{accuracy, accuracy_split, feature_shift, GroupSplit, StrayReport};
pub use diffusion::{diffuse, diffuse_trace, ppr_closed_form, DiffusionParams};
pub use error::{Error, Result};
pub use graph::{
    connected_components, normalize_adjacency, stray_mask, ComponentLabeling, NormalizedGraph,
    SparseGraph,
};
pub use io::{load_dataset, save_dataset, DatasetBundle, LabeledSplit, LoadOptions};
pub use knn::{glocal_knn, knn_exact, KnnParams, Metric};
pub use matrix::DenseMatrix;
pub use model::{Checkpoint, ModelDims, ModelParams};
pub use scalar::Scalar;
pub use scenario::{apply_scenario, planted_partition, PlantedPartition, ScenarioSpec};
pub use trainer::{
    preprocess, train, KnnMode, Preprocessed, TrainConfig, TrainOutcome, TrainReport,
};

pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type Params = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
pub type Dataset = DatasetBundle<f64>;
pub type Outcome = TrainOutcome<f64>;
