//! Dataset directories, label/split files and `key = value` text records.
//!
//! A dataset directory holds `edges.tsv` (edge list), `features.bin`
//! (binary matrix), `labels.tsv` (`node<TAB>class`) and optionally
//! `split.tsv` (`node<TAB>train|val|test`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "WEAKGRAPH_DATA_DIR";

/// Class assignments plus disjoint train/validation/test node sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSplit {
    pub classes: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl LabeledSplit {
    pub fn num_nodes(&self) -> usize {
        self.classes.len()
    }

    /// `(node, class)` for every training node.
    pub fn train_labels(&self) -> Vec<(usize, usize)> {
        self.train.iter().map(|&v| (v, self.classes[v])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if let Some(&bad) = self.classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "class id {bad} outside [0, {})",
                self.num_classes
            )));
        }
        let mut seen = vec![false; n];
        for (name, set) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &v in set {
                if v >= n {
                    return Err(Error::Dataset(format!("{name} node {v} out of range")));
                }
                if seen[v] {
                    return Err(Error::Dataset(format!(
                        "node {v} appears in more than one split"
                    )));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }

    pub fn write_split(&self, path: &Path) -> Result<()> {
        let mut role = vec![None; self.num_nodes()];
        for (name, set) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &v in set {
                role[v] = Some(name);
            }
        }
        let mut out = String::new();
        for (v, r) in role.iter().enumerate() {
            if let Some(r) = r {
                out.push_str(&format!("{v}\t{r}\n"));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// Returns each value with the line it came from.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.into(),
                line: idx + 1,
                msg: format!("expected `key = value`, found {line:?}"),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line: idx + 1,
                msg: "empty key".into(),
            });
        }
        map.insert(key.to_string(), (idx + 1, v.trim().to_string()));
    }
    Ok(map)
}

/// Renders `key = value` lines in the given order.
pub fn format_key_values<K: AsRef<str>, V: std::fmt::Display>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v))
        .collect()
}

fn tab_lines(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        match (f.next(), f.next(), f.next()) {
            (Some(a), Some(b), None) => rows.push((idx + 1, a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: idx + 1,
                    msg: format!("expected two tab-separated fields, found {line:?}"),
                })
            }
        }
    }
    Ok(rows)
}

fn parse_node(path: &Path, line: usize, s: &str, n: usize) -> Result<usize> {
    let v = s.parse::<usize>().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("bad node id {s:?}"),
    })?;
    if v >= n {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("node {v} out of range for {n} nodes"),
        });
    }
    Ok(v)
}

/// Reads `labels.tsv`. Every node must be labeled exactly once. Class ids must
/// be dense in `[0, c)` unless `remap` compacts them (in ascending id order).
pub fn load_labels(path: &Path, n: usize, remap: bool) -> Result<(Vec<usize>, usize)> {
    let mut classes: Vec<Option<usize>> = vec![None; n];
    for (line, a, b) in tab_lines(path)? {
        let v = parse_node(path, line, &a, n)?;
        let c = b.parse::<usize>().map_err(|_| Error::Parse {
            path: path.into(),
            line,
            msg: format!("bad class id {b:?}"),
        })?;
        if classes[v].replace(c).is_some() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("node {v} labeled twice"),
            });
        }
    }
    if let Some(v) = classes.iter().position(Option::is_none) {
        return Err(Error::Dataset(format!(
            "{}: node {v} has no label",
            path.display()
        )));
    }
    let mut classes: Vec<usize> = classes.into_iter().map(Option::unwrap).collect();
    let distinct: std::collections::BTreeSet<usize> = classes.iter().copied().collect();
    let num_classes = distinct.len();
    let dense = distinct.iter().copied().eq(0..num_classes);
    if !dense {
        if !remap {
            return Err(Error::Dataset(format!(
                "{}: class ids are not dense in [0, {num_classes}); use class remapping",
                path.display()
            )));
        }
        let index: BTreeMap<usize, usize> =
            distinct.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        for c in &mut classes {
            *c = index[c];
        }
    }
    Ok((classes, num_classes))
}

fn load_split(path: &Path, classes: Vec<usize>, num_classes: usize) -> Result<LabeledSplit> {
    let n = classes.len();
    let mut split = LabeledSplit {
        classes,
        num_classes,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut seen = vec![false; n];
    for (line, a, b) in tab_lines(path)? {
        let v = parse_node(path, line, &a, n)?;
        if std::mem::replace(&mut seen[v], true) {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("node {v} listed twice"),
            });
        }
        match b.as_str() {
            "train" => split.train.push(v),
            "val" => split.val.push(v),
            "test" => split.test.push(v),
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!("unknown split role {other:?}"),
                })
            }
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub graph: SparseGraph,
    pub features: DenseMatrix<T>,
    pub classes: Vec<usize>,
    pub num_classes: usize,
    /// `None` when the directory carries no `split.tsv`.
    pub split: Option<LabeledSplit>,
    /// Contents of `manifest.txt`, if any.
    pub provenance: Option<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    pub remap_classes: bool,
}

/// Resolves a dataset path: relative paths that do not exist locally are
/// looked up under `$WEAKGRAPH_DATA_DIR`.
pub fn resolve_data_dir(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

pub fn load_dataset<T: Scalar>(dir: &Path, opts: LoadOptions) -> Result<DatasetBundle<T>> {
    let features: DenseMatrix<T> = DenseMatrix::load(dir.join(FEATURES_FILE))?;
    let n = features.rows();
    if !features.is_finite() {
        return Err(Error::NonFinite("features.bin"));
    }
    let edges_path = dir.join(EDGES_FILE);
    let graph = SparseGraph::load_edge_list(&edges_path, None)?;
    if graph.num_nodes() > n {
        return Err(Error::Dataset(format!(
            "{}: edge list references node {} but features.bin has {n} rows",
            edges_path.display(),
            graph.num_nodes() - 1
        )));
    }
    let graph = if graph.num_nodes() < n {
        SparseGraph::from_edges(n, graph.edges().collect::<Vec<_>>())?
    } else {
        graph
    };
    let (classes, num_classes) = load_labels(&dir.join(LABELS_FILE), n, opts.remap_classes)?;
    let split_path = dir.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let s = load_split(&split_path, classes.clone(), num_classes)?;
        s.validate()?;
        Some(s)
    } else {
        None
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let provenance = if manifest_path.exists() {
        Some(fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)
    } else {
        None
    };
    Ok(DatasetBundle {
        graph,
        features,
        classes,
        num_classes,
        split,
        provenance,
    })
}

/// Writes every file of `bundle` into `dir`, returning the paths written.
pub fn save_dataset<T: Scalar>(dir: &Path, bundle: &DatasetBundle<T>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let edges = dir.join(EDGES_FILE);
    bundle.graph.save_edge_list(&edges)?;
    written.push(edges);
    let feats = dir.join(FEATURES_FILE);
    bundle.features.save(&feats)?;
    written.push(feats);
    let labels = dir.join(LABELS_FILE);
    let text: String = bundle
        .classes
        .iter()
        .enumerate()
        .map(|(v, c)| format!("{v}\t{c}\n"))
        .collect();
    fs::write(&labels, text).map_err(|e| Error::io(&labels, e))?;
    written.push(labels);
    if let Some(split) = &bundle.split {
        let p = dir.join(SPLIT_FILE);
        split.write_split(&p)?;
        written.push(p);
    }
    if let Some(m) = &bundle.provenance {
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, m).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
