use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use weakgraph::analysis::{accuracy, StrayReport};
use weakgraph::io::{format_key_values, resolve_data_dir, LoadOptions, MANIFEST_FILE};
use weakgraph::model::Checkpoint;
use weakgraph::trainer::{predict_checkpoint, preprocess, train, TrainConfig};
use weakgraph::{
    diffuse, normalize_adjacency, parallel, Dataset, DiffusionParams, Matrix, PlantedPartition,
    ScenarioSpec, SparseGraph,
};

const X_BAR_FILE: &str = "x_bar.bin";
const X_BAR_GLOBAL_FILE: &str = "x_bar_global.bin";
const GLOBAL_EDGES_FILE: &str = "global_edges.tsv";
const CONFIG_FILE: &str = "config.txt";
const REPORT_FILE: &str = "report.csv";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(
    name = "weakgraph",
    version,
    about = "Node classification on graphs with missing edges, features and labels"
)]
struct Cli {
    /// Base seed; overrides `seed` from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key = value` training configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded kernels.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-partition dataset.
    GenSynthetic(GenArgs),
    /// Drop edges, mask features and sample a label split.
    Scenario(ScenarioArgs),
    /// Diffuse features and build the global kNN graph.
    Preprocess(PreprocessArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Component structure, feature shift and accuracy by component.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    centroid_sep: f64,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    edge_missing_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    feature_missing_rate: f64,
    #[arg(long, default_value_t = 5)]
    labels_per_class: usize,
    #[arg(long, default_value_t = 30)]
    val_per_class: usize,
    #[arg(long)]
    remap_classes: bool,
}

/// Per-key overrides shared by `preprocess` and `train`.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    knn_mode: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_nodes: Option<usize>,
    /// Any config key, as `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    remap_classes: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output directory of an earlier `preprocess` run to reuse.
    #[arg(long)]
    preprocessed: Option<PathBuf>,
    #[arg(long)]
    remap_classes: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training output directory or checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Write `node<TAB>class` predictions here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    remap_classes: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Add the accuracy split using this checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    remap_classes: bool,
    #[command(flatten)]
    overrides: Overrides,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        let pairs: [(&str, Option<String>); 12] = [
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("knn_mode", self.knn_mode.clone()),
            ("metric", self.metric.clone()),
            ("gamma1", self.gamma1.map(|v| v.to_string())),
            ("gamma2", self.gamma2.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("batch_nodes", self.batch_nodes.map(|v| v.to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for item in &self.set {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                weakgraph::Error::InvalidParam(format!("--set expects key=value, got {item:?}"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Tracks files and directories created by a command so a failure leaves
/// nothing half-written behind.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> anyhow::Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> anyhow::Result<()> {
        let path = self.track(path);
        fs::write(&path, contents).map_err(|e| weakgraph::Error::Io { path, source: e })?;
        Ok(())
    }

    /// Registers a path about to be written. Paths that already exist are
    /// not ours to delete.
    fn track(&mut self, path: PathBuf) -> PathBuf {
        if !path.exists() {
            self.files.push(path.clone());
        }
        path
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = if f.is_dir() {
                fs::remove_dir_all(f)
            } else {
                fs::remove_file(f)
            };
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn load(data: &Path, remap_classes: bool) -> anyhow::Result<Dataset> {
    let dir = resolve_data_dir(data);
    Ok(weakgraph::load_dataset(
        &dir,
        LoadOptions { remap_classes },
    )?)
}

fn base_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| weakgraph::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(path, &text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen_synthetic(cli: &Cli, args: &GenArgs) -> anyhow::Result<()> {
    let planted = PlantedPartition {
        nodes: args.n,
        classes: args.classes,
        p_in: args.p_in,
        p_out: args.p_out,
        dim: args.dim,
        centroid_sep: args.centroid_sep,
        seed: cli.seed.unwrap_or(0),
    };
    let data = planted.generate::<f64>()?;
    let manifest = format_key_values(&[
        ("generator", "planted_partition".to_string()),
        ("n", planted.nodes.to_string()),
        ("classes", planted.classes.to_string()),
        ("p_in", planted.p_in.to_string()),
        ("p_out", planted.p_out.to_string()),
        ("dim", planted.dim.to_string()),
        ("centroid_sep", planted.centroid_sep.to_string()),
        ("seed", planted.seed.to_string()),
    ]);
    let bundle = Dataset {
        graph: data.graph,
        features: data.features,
        classes: data.classes,
        num_classes: planted.classes,
        split: None,
        provenance: Some(manifest),
    };
    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    for p in dataset_paths(&args.out, &bundle) {
        outputs.track(p);
    }
    weakgraph::save_dataset(&args.out, &bundle)?;
    outputs.committed = true;
    println!(
        "wrote {} nodes, {} edges to {}",
        bundle.graph.num_nodes(),
        bundle.graph.num_edges(),
        args.out.display()
    );
    Ok(())
}

fn dataset_paths(dir: &Path, bundle: &Dataset) -> Vec<PathBuf> {
    use weakgraph::io::{EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLIT_FILE};
    let mut names = vec![EDGES_FILE, FEATURES_FILE, LABELS_FILE];
    if bundle.split.is_some() {
        names.push(SPLIT_FILE);
    }
    if bundle.provenance.is_some() {
        names.push(MANIFEST_FILE);
    }
    names.into_iter().map(|n| dir.join(n)).collect()
}

fn scenario(cli: &Cli, args: &ScenarioArgs) -> anyhow::Result<()> {
    let source = load(&args.data, args.remap_classes)?;
    let spec = ScenarioSpec {
        edge_missing_rate: args.edge_missing_rate,
        feature_missing_rate: args.feature_missing_rate,
        labels_per_class: args.labels_per_class,
        val_per_class: args.val_per_class,
        seed: cli.seed.unwrap_or(0),
    };
    let out = weakgraph::apply_scenario(
        &source.graph,
        &source.features,
        &source.classes,
        source.num_classes,
        &spec,
    )?;
    let mut manifest = spec.to_manifest();
    manifest.push_str(&format!("source = {}\n", args.data.display()));
    if let Some(p) = &source.provenance {
        for line in p
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        {
            manifest.push_str(&format!("source_{}\n", line.trim()));
        }
    }
    let bundle = Dataset {
        graph: out.graph,
        features: out.features,
        classes: source.classes,
        num_classes: source.num_classes,
        split: Some(out.split),
        provenance: Some(manifest),
    };
    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    for p in dataset_paths(&args.out, &bundle) {
        outputs.track(p);
    }
    weakgraph::save_dataset(&args.out, &bundle)?;
    outputs.committed = true;
    println!(
        "scenario: {} edges kept, {} feature entries zeroed, {} train / {} val / {} test",
        bundle.graph.num_edges(),
        out.mask.zeroed.len(),
        bundle.split.as_ref().map_or(0, |s| s.train.len()),
        bundle.split.as_ref().map_or(0, |s| s.val.len()),
        bundle.split.as_ref().map_or(0, |s| s.test.len()),
    );
    Ok(())
}

fn run_preprocess(cli: &Cli, args: &PreprocessArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(cli)?;
    args.overrides.apply(&mut cfg)?;
    let data = load(&args.data, args.remap_classes)?;
    let pre = preprocess(&data.graph, &data.features, &cfg)?;
    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    pre.x_bar.save(outputs.track(args.out.join(X_BAR_FILE)))?;
    pre.x_bar_global
        .save(outputs.track(args.out.join(X_BAR_GLOBAL_FILE)))?;
    pre.global_graph
        .save_edge_list(outputs.track(args.out.join(GLOBAL_EDGES_FILE)))?;
    outputs.write(args.out.join(CONFIG_FILE), &cfg.to_text())?;
    outputs.committed = true;
    println!(
        "global graph: {} edges, min degree {}",
        pre.global_graph.num_edges(),
        pre.global_graph.min_degree()
    );
    Ok(())
}

/// Loads preprocessed matrices, refusing ones built with different settings.
fn load_preprocessed(dir: &Path, cfg: &TrainConfig) -> anyhow::Result<(Matrix, Matrix)> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| weakgraph::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut stored = TrainConfig::default();
    stored.apply_text(&path, &text)?;
    let same = stored.iterations == cfg.iterations
        && stored.restart_alpha == cfg.restart_alpha
        && stored.knn_params() == cfg.knn_params()
        && stored.knn_mode == cfg.knn_mode;
    if !same {
        return Err(weakgraph::Error::InvalidParam(format!(
            "{} was preprocessed with different diffusion or kNN settings",
            dir.display()
        ))
        .into());
    }
    Ok((
        Matrix::load(dir.join(X_BAR_FILE))?,
        Matrix::load(dir.join(X_BAR_GLOBAL_FILE))?,
    ))
}

fn run_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(cli)?;
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    let data = load(&args.data, args.remap_classes)?;
    let Some(split) = &data.split else {
        bail!(weakgraph::Error::Dataset(format!(
            "{} has no split.tsv; run `weakgraph scenario` first",
            args.data.display()
        )));
    };
    let (x_bar, x_bar_global) = match &args.preprocessed {
        Some(dir) => load_preprocessed(dir, &cfg)?,
        None => {
            let pre = preprocess(&data.graph, &data.features, &cfg)?;
            (pre.x_bar, pre.x_bar_global)
        }
    };
    let outcome = train(&x_bar, Some(&x_bar_global), split, &cfg)?;
    for w in &outcome.report.warnings {
        eprintln!("warning: {w}");
    }
    let dims = outcome.best.dims();
    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    outputs.write(args.out.join(REPORT_FILE), &outcome.report.to_text())?;
    outputs.write(args.out.join(CONFIG_FILE), &cfg.to_text())?;
    outcome
        .checkpoint(&cfg)
        .save(outputs.track(args.out.join(CHECKPOINT_DIR)))?;
    let test_pred = weakgraph::model::predict(&outcome.best, &x_bar)?;
    let test_acc = accuracy(&test_pred, &split.classes, &split.test);
    outputs.committed = true;
    println!(
        "best_epoch = {}\nbest_val_acc = {:.6}\ntest_acc = {:.6}\nmodel = {}x{}x{}",
        outcome.report.best_epoch,
        outcome.report.best_val_acc,
        test_acc,
        dims.input,
        dims.hidden,
        dims.classes
    );
    Ok(())
}

fn checkpoint_dir(model: &Path) -> PathBuf {
    let nested = model.join(CHECKPOINT_DIR);
    if nested.join("header.txt").exists() {
        nested
    } else {
        model.to_path_buf()
    }
}

/// Recomputes the original-channel features with the checkpoint's diffusion
/// settings and predicts every node.
fn predict_dataset(
    model: &Path,
    graph: &SparseGraph,
    features: &Matrix,
) -> anyhow::Result<Vec<usize>> {
    let ck = Checkpoint::<f64>::load(checkpoint_dir(model))?;
    let params = DiffusionParams::new(ck.header.restart_alpha, ck.header.iterations)?;
    let x_bar = diffuse(features, &normalize_adjacency(graph), &params)?;
    Ok(predict_checkpoint(&ck, &x_bar)?)
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let data = load(&args.data, args.remap_classes)?;
    let preds = predict_dataset(&args.model, &data.graph, &data.features)?;
    let mut outputs = Outputs::default();
    if let Some(path) = &args.predictions {
        let text: String = preds
            .iter()
            .enumerate()
            .map(|(v, c)| format!("{v}\t{c}\n"))
            .collect();
        outputs.write(path.clone(), &text)?;
    }
    let nodes: Vec<usize> = match &data.split {
        Some(s) => s.test.clone(),
        None => (0..preds.len()).collect(),
    };
    outputs.committed = true;
    println!(
        "nodes = {}\naccuracy = {:.6}",
        nodes.len(),
        accuracy(&preds, &data.classes, &nodes)
    );
    Ok(())
}

fn run_analyze(cli: &Cli, args: &AnalyzeArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(cli)?;
    args.overrides.apply(&mut cfg)?;
    let data = load(&args.data, args.remap_classes)?;
    let x_bar = diffuse(
        &data.features,
        &normalize_adjacency(&data.graph),
        &cfg.diffusion()?,
    )?;
    let preds = args
        .model
        .as_ref()
        .map(|m| predict_dataset(m, &data.graph, &data.features))
        .transpose()?;
    let test: Vec<usize> = match &data.split {
        Some(s) => s.test.clone(),
        None => (0..data.classes.len()).collect(),
    };
    let accuracy_inputs = preds
        .as_ref()
        .map(|p| (p.as_slice(), data.classes.as_slice(), test.as_slice()));
    let report = StrayReport::build(&data.graph, &data.features, &x_bar, accuracy_inputs)?;
    let text = report.to_key_values();
    let mut outputs = Outputs::default();
    if let Some(path) = &args.out {
        outputs.write(path.clone(), &text)?;
    }
    outputs.committed = true;
    print!("{text}");
    println!("{}", report.to_record_line());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    parallel::set_deterministic(cli.deterministic);
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(t) = threads {
        if t == 0 {
            bail!(weakgraph::Error::InvalidParam(
                "--threads must be at least 1".into()
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(cli, a),
        Command::Scenario(a) => scenario(cli, a),
        Command::Preprocess(a) => run_preprocess(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<weakgraph::Error>()
                .map_or("runtime", |w| w.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}
