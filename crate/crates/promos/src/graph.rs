//! Attributed graphs in CSR form, plus on-disk load/save.
//!
//! Disk layout of a graph directory:
//! - `edges.tsv`: one `u<TAB>v` pair per line, 0-based ids, `#` comments
//! - `features.csv`: one comma-separated row per node, in id order
//! - `labels.csv` (optional): one `0`/`1` per line, in id order

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Immutable attributed graph. The adjacency is undirected: every stored arc
/// `(u, v)` has its reverse `(v, u)` stored too, and there are no self-loops.
#[derive(Debug, Clone)]
pub struct Graph {
    pub name: String,
    n: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    pub features: Tensor,
    pub labels: Option<Vec<u8>>,
}

/// Repairs applied while constructing a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadMeta {
    /// The input mixed conventions — some edges listed in both directions,
    /// others in one — so missing reverse arcs were added. Inputs that list
    /// every edge exactly once (the canonical layout) are not flagged.
    pub symmetrized: bool,
    pub self_loops_dropped: usize,
}

/// Residual-enhanced node features: `enhanced = features + residual` where
/// `residual = features - neighbor_mean`.
#[derive(Debug, Clone)]
pub struct EnhancedFeatures {
    pub residual: Tensor,
    pub enhanced: Tensor,
}

impl Graph {
    pub fn build(
        name: &str,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Option<Vec<u8>>,
    ) -> Result<(Graph, LoadMeta)> {
        let n = features.rows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Invalid(format!(
                    "labels have {} entries but graph has {} nodes",
                    l.len(),
                    n
                )));
            }
        }

        let mut meta = LoadMeta::default();
        let mut directed: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut input: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n {
                return Err(Error::DanglingNode { id: u, n });
            }
            if v >= n {
                return Err(Error::DanglingNode { id: v, n });
            }
            if u == v {
                meta.self_loops_dropped += 1;
                continue;
            }
            input.insert((u, v));
            directed.insert((u, v));
            directed.insert((v, u));
        }
        let doubled = input.iter().any(|&(u, v)| input.contains(&(v, u)));
        let single = input.iter().any(|&(u, v)| !input.contains(&(v, u)));
        meta.symmetrized = doubled && single;

        let mut offsets = vec![0usize; n + 1];
        for &(u, _) in &directed {
            offsets[u + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        // BTreeSet iteration is already (u, v)-sorted
        let targets: Vec<usize> = directed.iter().map(|&(_, v)| v).collect();

        Ok((
            Graph { name: name.to_string(), n, offsets, targets, features, labels },
            meta,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edge list with `u < v`, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 0..self.n {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Row i is the mean of the feature rows of i's neighbors; isolated nodes
    /// get a zero row.
    pub fn neighbor_mean(&self) -> Tensor {
        let d = self.features.cols();
        let mut out = Tensor::zeros(self.n, d);
        for i in 0..self.n {
            let nbrs = self.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let row = out.row_mut(i);
            for &j in nbrs {
                let fj = self.features.row(j);
                for k in 0..d {
                    row[k] += fj[k];
                }
            }
            let inv = 1.0 / nbrs.len() as f64;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        out
    }

    pub fn enhance(&self) -> EnhancedFeatures {
        let residual = self.features.sub(&self.neighbor_mean());
        let enhanced = self.features.add(&residual);
        EnhancedFeatures { residual, enhanced }
    }

    /// Symmetric-normalized adjacency with self-loops:
    /// `A_hat = D^{-1/2} (A + I) D^{-1/2}`.
    pub fn norm_adjacency(&self) -> SparseMatrix {
        let inv_sqrt: Vec<f64> = (0..self.n)
            .map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt())
            .collect();
        let mut offsets = vec![0usize; self.n + 1];
        let mut targets = Vec::with_capacity(self.targets.len() + self.n);
        let mut values = Vec::with_capacity(self.targets.len() + self.n);
        for i in 0..self.n {
            let nbrs = self.neighbors(i);
            let mut placed_self = false;
            for &j in nbrs {
                if !placed_self && j > i {
                    targets.push(i);
                    values.push(inv_sqrt[i] * inv_sqrt[i]);
                    placed_self = true;
                }
                targets.push(j);
                values.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            if !placed_self {
                targets.push(i);
                values.push(inv_sqrt[i] * inv_sqrt[i]);
            }
            offsets[i + 1] = targets.len();
        }
        SparseMatrix { n: self.n, offsets, targets, values }
    }
}

/// Square sparse matrix in CSR form with per-entry values. Symmetric in all
/// uses here (normalized adjacency), which backward passes rely on.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matmul(&self, dense: &Tensor) -> Tensor {
        assert_eq!(dense.rows(), self.n);
        let d = dense.cols();
        let mut out = Tensor::zeros(self.n, d);
        for i in 0..self.n {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.targets[e];
                let w = self.values[e];
                let src = dense.row(j);
                for k in 0..d {
                    row[k] += w * src[k];
                }
            }
        }
        out
    }

    /// Normalized adjacency for an explicit undirected edge list (used for
    /// augmented views during pretraining).
    pub fn normalized_from_pairs(n: usize, pairs: &[(usize, usize)]) -> SparseMatrix {
        let mut directed: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(u, v) in pairs {
            if u != v {
                directed.insert((u, v));
                directed.insert((v, u));
            }
        }
        let mut deg = vec![0usize; n];
        for &(u, _) in &directed {
            deg[u] += 1;
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();

        let mut with_loops: BTreeSet<(usize, usize)> = directed;
        for i in 0..n {
            with_loops.insert((i, i));
        }
        let mut offsets = vec![0usize; n + 1];
        let mut targets = Vec::with_capacity(with_loops.len());
        let mut values = Vec::with_capacity(with_loops.len());
        for &(u, v) in &with_loops {
            offsets[u + 1] += 1;
            targets.push(v);
            values.push(inv_sqrt[u] * inv_sqrt[v]);
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        SparseMatrix { n, offsets, targets, values }
    }
}

/// Load a graph directory. Returns the graph plus repair flags.
pub fn load_graph(dir: &Path) -> Result<(Graph, LoadMeta)> {
    let edges_path = dir.join("edges.tsv");
    let edges_text = read(&edges_path)?;
    let mut edges = Vec::new();
    let mut max_id = None::<usize>;
    for (lineno, line) in edges_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => {
                return Err(Error::Malformed {
                    file: edges_path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected exactly two tab-separated node ids".into(),
                })
            }
        };
        let parse = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Malformed {
                file: edges_path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid node id {s:?}"),
            })
        };
        let (u, v) = (parse(u)?, parse(v)?);
        max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
        edges.push((u, v));
    }

    let features_path = dir.join("features.csv");
    let features_text = read(&features_path)?;
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    let mut d = None::<usize>;
    for (lineno, line) in features_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Malformed {
                    file: features_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("invalid feature value {s:?}"),
                })
            })
            .collect::<Result<_>>()?;
        match d {
            None => d = Some(vals.len()),
            Some(d0) if d0 != vals.len() => {
                return Err(Error::Malformed {
                    file: features_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected {d0} columns, found {}", vals.len()),
                })
            }
            _ => {}
        }
        rows.extend_from_slice(&vals);
        n += 1;
    }
    let d = d.unwrap_or(0);
    if n == 0 {
        return Err(Error::Malformed {
            file: features_path.display().to_string(),
            line: 0,
            msg: "no feature rows".into(),
        });
    }

    if let Some(max_id) = max_id {
        if max_id >= n {
            return Err(Error::DanglingNode { id: max_id, n });
        }
        if max_id + 1 != n {
            return Err(Error::CountMismatch { features: n, max_id });
        }
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let text = read(&labels_path)?;
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "0" => out.push(0u8),
                "1" => out.push(1u8),
                other => {
                    return Err(Error::Malformed {
                        file: labels_path.display().to_string(),
                        line: lineno + 1,
                        msg: format!("labels must be 0 or 1, found {other:?}"),
                    })
                }
            }
        }
        if out.len() != n {
            return Err(Error::Invalid(format!(
                "labels.csv has {} rows but features.csv has {n}",
                out.len()
            )));
        }
        Some(out)
    } else {
        None
    };

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".to_string());
    Graph::build(&name, &edges, Tensor::from_vec(n, d, rows), labels)
}

/// Write a graph directory in the same layout `load_graph` reads.
pub fn save_graph(dir: &Path, g: &Graph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;

    let mut edges = String::new();
    for (u, v) in g.undirected_edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    for i in 0..g.node_count() {
        let row: Vec<String> = g.features.row(i).iter().map(|v| format!("{v}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write(&dir.join("features.csv"), &feats)?;

    if let Some(labels) = &g.labels {
        let mut text = String::new();
        for l in labels {
            text.push_str(&format!("{l}\n"));
        }
        write(&dir.join("labels.csv"), &text)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::Io { path: path.into(), source: e })
}
