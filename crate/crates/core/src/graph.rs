//! Undirected binary graphs in CSR form, symmetric normalization and
//! connected components.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Undirected, unweighted graph without self-loops.
///
/// Both directions of every edge are stored and each row's neighbors are
/// sorted ascending with no duplicates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseGraph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from undirected pairs, symmetrizing and dropping
    /// self-loops and duplicates.
    pub fn from_edges(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut directed = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidParam(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u != v {
                directed.push((u, v));
                directed.push((v, u));
            }
        }
        directed.sort_unstable();
        directed.dedup();
        Ok(Self::from_sorted_directed(num_nodes, &directed))
    }

    fn from_sorted_directed(num_nodes: usize, directed: &[(usize, usize)]) -> Self {
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for &(u, _) in directed {
            row_offsets[u + 1] += 1;
        }
        for i in 0..num_nodes {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = directed.iter().map(|&(_, v)| v).collect();
        Self {
            num_nodes,
            row_offsets,
            col_indices,
        }
    }

    /// Wraps raw CSR arrays after checking every structural invariant.
    pub fn from_csr(
        num_nodes: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidParam(format!("CSR: {msg}")));
        if row_offsets.len() != num_nodes + 1 || row_offsets[0] != 0 {
            return bad("row_offsets must have length n+1 and start at 0".into());
        }
        if *row_offsets.last().unwrap() != col_indices.len() {
            return bad("last offset must equal col_indices length".into());
        }
        let g = Self {
            num_nodes,
            row_offsets,
            col_indices,
        };
        for i in 0..num_nodes {
            if g.row_offsets[i] > g.row_offsets[i + 1] {
                return bad(format!("offsets decrease at row {i}"));
            }
            let nb = g.neighbors(i);
            for w in nb.windows(2) {
                if w[0] >= w[1] {
                    return bad(format!("row {i} not strictly ascending"));
                }
            }
            for &j in nb {
                if j >= num_nodes {
                    return bad(format!("column {j} out of range in row {i}"));
                }
                if j == i {
                    return bad(format!("self-loop at {i}"));
                }
                if !g.has_edge(j, i) {
                    return bad(format!("edge ({i}, {j}) lacks its reverse"));
                }
            }
        }
        Ok(g)
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            row_offsets: vec![0; num_nodes + 1],
            col_indices: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn min_degree(&self) -> usize {
        (0..self.num_nodes)
            .map(|i| self.degree(i))
            .min()
            .unwrap_or(0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    /// Writes the edge-list text format: one `u<TAB>v` line per undirected edge.
    pub fn write_edge_list(&self, mut w: impl Write) -> std::io::Result<()> {
        for (u, v) in self.edges() {
            writeln!(w, "{u}\t{v}")?;
        }
        Ok(())
    }

    pub fn save_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_edge_list(&mut w)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads an edge list. With `num_nodes = None` the node count is the
    /// largest id plus one.
    pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let pairs = parse_edge_lines(path, BufReader::new(file))?;
        let n = match num_nodes {
            Some(n) => {
                if let Some((line, u, v)) = pairs.iter().find(|(_, u, v)| *u >= n || *v >= n) {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: *line,
                        msg: format!("node id {} out of range for {n} nodes", u.max(v)),
                    });
                }
                n
            }
            None => pairs
                .iter()
                .map(|&(_, u, v)| u.max(v) + 1)
                .max()
                .unwrap_or(0),
        };
        Self::from_edges(n, pairs.into_iter().map(|(_, u, v)| (u, v)))
    }
}

fn parse_edge_lines(path: &Path, r: impl BufRead) -> Result<Vec<(usize, usize, usize)>> {
    let mut pairs = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno,
            msg,
        };
        let mut fields = trimmed.split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(format!("expected `u<TAB>v`, found {trimmed:?}")));
        };
        let u = a
            .parse::<usize>()
            .map_err(|_| parse_err(format!("bad node id {a:?}")))?;
        let v = b
            .parse::<usize>()
            .map_err(|_| parse_err(format!("bad node id {b:?}")))?;
        pairs.push((lineno, u, v));
    }
    Ok(pairs)
}

/// `D^{-1/2} A D^{-1/2}` over the topology of a [`SparseGraph`].
///
/// Degree-zero nodes have empty rows; no self-loops are added.
#[derive(Clone, Debug)]
pub struct NormalizedGraph {
    structure: SparseGraph,
    edge_weights: Vec<f64>,
}

impl NormalizedGraph {
    pub fn structure(&self) -> &SparseGraph {
        &self.structure
    }

    pub fn num_nodes(&self) -> usize {
        self.structure.num_nodes
    }

    /// Weights aligned with `structure().col_indices()`.
    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    /// `(neighbor, weight)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.structure.row_offsets[i]..self.structure.row_offsets[i + 1];
        self.structure.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.edge_weights[range].iter().copied())
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let nb = self.structure.neighbors(i);
        nb.binary_search(&j)
            .ok()
            .map(|p| self.edge_weights[self.structure.row_offsets[i] + p])
    }
}

pub fn normalize_adjacency(g: &SparseGraph) -> NormalizedGraph {
    let mut edge_weights = Vec::with_capacity(g.col_indices.len());
    for i in 0..g.num_nodes {
        let di = g.degree(i);
        for &j in g.neighbors(i) {
            edge_weights.push(1.0 / ((di * g.degree(j)) as f64).sqrt());
        }
    }
    NormalizedGraph {
        structure: g.clone(),
        edge_weights,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    /// Component index per node; components are numbered in order of their
    /// lowest node id.
    pub component_id: Vec<usize>,
    pub component_sizes: Vec<usize>,
    /// Largest component; the smallest index wins ties.
    pub lcc_id: usize,
}

impl ComponentLabeling {
    pub fn num_components(&self) -> usize {
        self.component_sizes.len()
    }

    pub fn lcc_size(&self) -> usize {
        self.component_sizes.get(self.lcc_id).copied().unwrap_or(0)
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

pub fn connected_components(g: &SparseGraph) -> ComponentLabeling {
    let n = g.num_nodes;
    let mut dsu = DisjointSet::new(n);
    for (u, v) in g.edges() {
        dsu.union(u, v);
    }
    let mut root_to_id = vec![usize::MAX; n];
    let mut component_id = Vec::with_capacity(n);
    let mut component_sizes = Vec::new();
    for i in 0..n {
        let r = dsu.find(i);
        if root_to_id[r] == usize::MAX {
            root_to_id[r] = component_sizes.len();
            component_sizes.push(0);
        }
        let id = root_to_id[r];
        component_sizes[id] += 1;
        component_id.push(id);
    }
    let mut lcc_id = 0;
    for (id, &size) in component_sizes.iter().enumerate() {
        if size > component_sizes[lcc_id] {
            lcc_id = id;
        }
    }
    ComponentLabeling {
        component_id,
        component_sizes,
        lcc_id,
    }
}

/// `true` for nodes outside the largest connected component.
pub fn stray_mask(labeling: &ComponentLabeling) -> Vec<bool> {
    labeling
        .component_id
        .iter()
        .map(|&c| c != labeling.lcc_id)
        .collect()
}
