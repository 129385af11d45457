//! Graph data model, normalized propagation operators, row-shuffle corruption
//! and dataset files.

mod io;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diff::{CsrMatrix, Matrix, RngStream};
use crate::error::{Error, Result};

pub use io::{import_linqs, load_dataset, save_dataset};

/// Normalized N×N operator in compressed row layout.
pub type SparseOperator = CsrMatrix;

/// Named node index sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub ood: Vec<usize>,
}

impl Splits {
    fn named(&self) -> [(&'static str, &Vec<usize>); 4] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test), ("ood", &self.ood)]
    }
}

/// Undirected attributed graph with labels and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    pub splits: Splits,
}

impl GraphDataset {
    /// Validates and builds a dataset. Edges are given as unordered pairs;
    /// they are stored with `u < v` and sorted.
    pub fn new(
        features: Matrix,
        edges: Vec<(usize, usize)>,
        labels: Vec<Option<usize>>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::contract(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {num_classes})")));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::contract(format!("edge ({u}, {v}) outside [0, {n})")));
            }
            if u == v {
                return Err(Error::contract(format!("self-loop at node {u}")));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::contract(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
            canon.push(e);
        }
        canon.sort_unstable();
        let g = Self {
            features,
            edges: canon,
            labels,
            num_classes,
            splits,
        };
        g.check_splits()?;
        Ok(g)
    }

    fn check_splits(&self) -> Result<()> {
        let n = self.num_nodes();
        let mut owner = vec![None; n];
        for (name, set) in self.splits.named() {
            for &i in set {
                if i >= n {
                    return Err(Error::contract(format!("{name} split index {i} outside [0, {n})")));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::contract(format!("node {i} in both {prev} and {name} splits")));
                }
                owner[i] = Some(name);
                if (name == "train" || name == "valid") && self.labels[i].is_none() {
                    return Err(Error::contract(format!("{name} node {i} is unlabeled")));
                }
            }
        }
        Ok(())
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        self.splits = splits;
        self.check_splits()?;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Undirected edges, each once with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes()];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn average_degree(&self) -> f64 {
        if self.num_nodes() == 0 {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / self.num_nodes() as f64
    }

    /// Binary adjacency with both directions materialized.
    pub fn adjacency(&self) -> CsrMatrix {
        let mut t = Vec::with_capacity(2 * self.edges.len());
        for &(u, v) in &self.edges {
            t.push((u, v, 1.0));
            t.push((v, u, 1.0));
        }
        CsrMatrix::from_triplets(self.num_nodes(), self.num_nodes(), t).expect("edges validated at construction")
    }

    /// Neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            nb[u].push(v);
            nb[v].push(u);
        }
        for l in &mut nb {
            l.sort_unstable();
        }
        nb
    }

    /// Nodes that are labeled and outside the OOD split.
    pub fn id_nodes(&self) -> Vec<usize> {
        let ood: HashSet<_> = self.splits.ood.iter().copied().collect();
        (0..self.num_nodes())
            .filter(|i| self.labels[*i].is_some() && !ood.contains(i))
            .collect()
    }

    /// Labels of `nodes`, failing on unlabeled ones.
    pub fn labels_of(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&i| self.labels[i].ok_or_else(|| Error::contract(format!("node {i} is unlabeled"))))
            .collect()
    }

    /// Subgraph induced on `nodes` (in the given order) and the old index of
    /// every new node. Splits are carried over where their nodes survive.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<(GraphDataset, Vec<usize>)> {
        let mut new_of = vec![usize::MAX; self.num_nodes()];
        for (k, &i) in nodes.iter().enumerate() {
            if i >= self.num_nodes() || new_of[i] != usize::MAX {
                return Err(Error::contract(format!("bad or repeated node {i} in induced subgraph")));
            }
            new_of[i] = k;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| new_of[*u] != usize::MAX && new_of[*v] != usize::MAX)
            .map(|&(u, v)| (new_of[u], new_of[v]))
            .collect();
        let remap = |s: &[usize]| -> Vec<usize> {
            s.iter().filter(|&&i| new_of[i] != usize::MAX).map(|&i| new_of[i]).collect()
        };
        let splits = Splits {
            train: remap(&self.splits.train),
            valid: remap(&self.splits.valid),
            test: remap(&self.splits.test),
            ood: remap(&self.splits.ood),
        };
        let g = GraphDataset::new(
            self.features.select_rows(nodes),
            edges,
            nodes.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            splits,
        )?;
        Ok((g, nodes.to_vec()))
    }

    /// Fraction of edges joining two labeled nodes of the same class, among
    /// edges whose endpoints are both labeled.
    pub fn edge_homophily(&self) -> f64 {
        let mut same = 0usize;
        let mut total = 0usize;
        for &(u, v) in &self.edges {
            if let (Some(a), Some(b)) = (self.labels[u], self.labels[v]) {
                total += 1;
                same += usize::from(a == b);
            }
        }
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }

    /// Feature matrix in compressed row form.
    pub fn feature_csr(&self) -> CsrMatrix {
        CsrMatrix::from_dense(&self.features)
    }
}

/// `βI + D^{-1/2} A D^{-1/2}`; isolated nodes get only the `β` diagonal.
pub fn sym_norm_prop(g: &GraphDataset, beta: f64) -> SparseOperator {
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut t = Vec::with_capacity(2 * g.edges().len() + g.num_nodes());
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        t.push((u, v, w));
        t.push((v, u, w));
    }
    if beta != 0.0 {
        t.extend((0..g.num_nodes()).map(|i| (i, i, beta)));
    }
    CsrMatrix::from_triplets(g.num_nodes(), g.num_nodes(), t).expect("edges validated at construction")
}

/// Renormalized GCN operator `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = D + I`.
pub fn gcn_norm(g: &GraphDataset) -> SparseOperator {
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut t = Vec::with_capacity(2 * g.edges().len() + g.num_nodes());
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        t.push((u, v, w));
        t.push((v, u, w));
    }
    t.extend((0..g.num_nodes()).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
    CsrMatrix::from_triplets(g.num_nodes(), g.num_nodes(), t).expect("edges validated at construction")
}

/// Exact sparse-dense product `P X`.
pub fn spmm(p: &SparseOperator, x: &Matrix) -> Result<Matrix> {
    p.spmm(x)
}

/// Rows of `x` in uniformly random order. Row `i` of the result is row
/// `perm[i]` of the input.
pub fn shuffle_rows(x: &Matrix, rng: &mut RngStream) -> (Matrix, Vec<usize>) {
    let perm = rng.permutation(x.rows());
    (x.select_rows(&perm), perm)
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Train/valid/test partition of the ID nodes (labeled, not OOD). The OOD
/// split is kept as is.
pub fn make_splits(g: &GraphDataset, fractions: (f64, f64, f64), rng: &mut RngStream) -> Result<Splits> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut ids = g.id_nodes();
    if ids.is_empty() {
        return Err(Error::contract("no ID nodes to split"));
    }
    rng.shuffle(&mut ids);
    let n = ids.len();
    // A positive train fraction always yields at least one train node.
    let mut n_train = ((a * n as f64).round() as usize).min(n);
    if a > 0.0 && n_train == 0 {
        n_train = 1;
    }
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);
    let mut train = ids[..n_train].to_vec();
    let mut valid = ids[n_train..n_train + n_valid].to_vec();
    let mut test = ids[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(Splits {
        train,
        valid,
        test,
        ood: g.splits.ood.clone(),
    })
}
