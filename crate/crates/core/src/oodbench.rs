//! Synthetic out-of-distribution benchmarks.
//!
//! Structure and feature bundles append a modified copy of the input graph as
//! a second, disconnected component. Label bundles keep one graph and move
//! the left-out classes to the OOD split. Also here: the 2D eight-mode toy and
//! graphs with a controlled homophily ratio.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diff::{Matrix, RngStream};
use crate::error::{Error, Result};
use crate::graph::{load_dataset, make_splits, save_dataset, GraphDataset, Splits};
use crate::trainer::SPLIT_FRACTIONS;

/// Degree-matched intra/inter probability ratio of the default block model.
pub const SBM_RATIO: f64 = 5.0;
pub const TOY_RADIUS: f64 = 4.0;
pub const TOY_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
}

impl SbmSpec {
    /// Blocks are the label classes (unlabeled nodes form one extra block),
    /// with `p_in = 5 p_out` chosen so the expected degree equals the
    /// average degree of `g`.
    pub fn from_labels(g: &GraphDataset) -> Self {
        let mut block_sizes = vec![0usize; g.num_classes() + 1];
        for y in g.labels() {
            block_sizes[y.unwrap_or(g.num_classes())] += 1;
        }
        block_sizes.retain(|&s| s > 0);
        let n = g.num_nodes() as f64;
        let within: f64 = block_sizes.iter().map(|&b| (b * b.saturating_sub(1)) as f64).sum();
        let across: f64 = block_sizes.iter().map(|&b| b as f64 * (n - b as f64)).sum();
        let denom = SBM_RATIO * within + across;
        let p_out = if denom > 0.0 { g.average_degree() * n / denom } else { 0.0 };
        let p_in = (SBM_RATIO * p_out).min(1.0);
        Self {
            block_sizes,
            p_in,
            p_out: p_out.min(p_in),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.block_sizes.iter().sum::<usize>() != n {
            return Err(Error::contract(format!(
                "block sizes sum to {}, graph has {n} nodes",
                self.block_sizes.iter().sum::<usize>()
            )));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::contract(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in {} p_out {}",
                self.p_in, self.p_out
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OodKind {
    /// Regenerated structure.
    S,
    /// Interpolated features.
    F,
    /// Left-out classes.
    L,
}

/// A combined graph with its ID/OOD partition and generator provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct OodBundle {
    /// OOD nodes are recorded in `graph.splits.ood`; ID evaluation uses the
    /// test split.
    pub graph: GraphDataset,
    pub id_nodes: Vec<usize>,
    pub ood_nodes: Vec<usize>,
    pub kind: OodKind,
    pub seed: u64,
    pub params: Value,
}

impl OodBundle {
    /// ID test nodes followed by OOD nodes.
    pub fn eval_nodes(&self) -> (Vec<usize>, Vec<usize>) {
        (self.graph.splits.test.clone(), self.ood_nodes.clone())
    }
}

fn with_default_splits(g: &GraphDataset, rng: &mut RngStream) -> Result<GraphDataset> {
    if !g.splits.train.is_empty() {
        return Ok(g.clone());
    }
    let s = make_splits(g, SPLIT_FRACTIONS, rng)?;
    g.clone().with_splits(s)
}

/// Appends `copy` as a disconnected second component; its nodes form the
/// OOD split.
fn append_component(g: &GraphDataset, features: Matrix, edges: Vec<(usize, usize)>) -> Result<GraphDataset> {
    let n = g.num_nodes();
    let mut data = g.features().as_slice().to_vec();
    data.extend_from_slice(features.as_slice());
    let x = Matrix::from_vec(2 * n, g.num_features(), data)?;
    let mut all = g.edges().to_vec();
    all.extend(edges.into_iter().map(|(u, v)| (u + n, v + n)));
    let mut labels = g.labels().to_vec();
    labels.extend_from_slice(g.labels());
    let mut splits = g.splits.clone();
    splits.ood = (n..2 * n).collect();
    GraphDataset::new(x, all, labels, g.num_classes(), splits)
}

/// Node order used to assign consecutive block members: by label, unlabeled
/// last, then by index.
fn block_order(g: &GraphDataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.num_nodes()).collect();
    order.sort_by_key(|&i| (g.label(i).unwrap_or(usize::MAX), i));
    order
}

/// Keeps `g` as the ID component and adds a copy whose edges are drawn from
/// the block model.
pub fn gen_structure_ood(g: &GraphDataset, spec: &SbmSpec, seed: u64) -> Result<OodBundle> {
    let n = g.num_nodes();
    spec.validate(n)?;
    if g.splits.ood.len() > 0 {
        return Err(Error::contract("input graph already has an OOD split"));
    }
    let mut rng = RngStream::new(seed);
    let base = with_default_splits(g, &mut rng.derive(1))?;
    let mut block = vec![0; n];
    let order = block_order(g);
    let mut k = 0;
    for (b, &size) in spec.block_sizes.iter().enumerate() {
        for &i in &order[k..k + size] {
            block[i] = b;
        }
        k += size;
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] { spec.p_in } else { spec.p_out };
            if p > 0.0 && (p >= 1.0 || rng.bernoulli(p)) {
                edges.push((u, v));
            }
        }
    }
    let graph = append_component(&base, g.features().clone(), edges)?;
    Ok(OodBundle {
        id_nodes: (0..n).collect(),
        ood_nodes: (n..2 * n).collect(),
        graph,
        kind: OodKind::S,
        seed,
        params: json!({ "sbm": spec }),
    })
}

/// Keeps `g` as the ID component and adds a copy with the same edges whose
/// features interpolate each node with a random other node.
pub fn gen_feature_ood(g: &GraphDataset, seed: u64) -> Result<OodBundle> {
    let n = g.num_nodes();
    if n < 2 {
        return Err(Error::contract("feature interpolation needs at least two nodes"));
    }
    if !g.splits.ood.is_empty() {
        return Err(Error::contract("input graph already has an OOD split"));
    }
    let mut rng = RngStream::new(seed);
    let base = with_default_splits(g, &mut rng.derive(1))?;
    let d = g.num_features();
    let x = g.features();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let t = rng.uniform();
        data.extend(x.row(i).iter().zip(x.row(j)).map(|(a, b)| t * a + (1.0 - t) * b));
    }
    let graph = append_component(&base, Matrix::from_vec(n, d, data)?, g.edges().to_vec())?;
    Ok(OodBundle {
        id_nodes: (0..n).collect(),
        ood_nodes: (n..2 * n).collect(),
        graph,
        kind: OodKind::F,
        seed,
        params: json!({}),
    })
}

/// The ⌈C/2⌉ most frequent classes, ties to the lower index, sorted.
pub fn default_id_classes(g: &GraphDataset) -> Vec<usize> {
    let mut count = vec![0usize; g.num_classes()];
    for y in g.labels().iter().flatten() {
        count[*y] += 1;
    }
    let mut classes: Vec<usize> = (0..g.num_classes()).collect();
    classes.sort_by_key(|&c| (std::cmp::Reverse(count[c]), c));
    classes.truncate(g.num_classes().div_ceil(2));
    classes.sort_unstable();
    classes
}

/// Nodes of `id_classes` become ID with labels re-indexed densely; the other
/// labeled nodes become OOD and lose their labels.
pub fn split_label_leaveout(g: &GraphDataset, id_classes: &[usize], seed: u64) -> Result<OodBundle> {
    let set: HashSet<usize> = id_classes.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::contract("no ID classes given"));
    }
    if let Some(bad) = set.iter().find(|&&c| c >= g.num_classes()) {
        return Err(Error::contract(format!("class {bad} outside [0, {})", g.num_classes())));
    }
    if set.len() == g.num_classes() {
        return Err(Error::contract("ID classes cover every class; nothing is left out"));
    }
    let mut sorted: Vec<usize> = set.into_iter().collect();
    sorted.sort_unstable();
    let remap = |c: usize| sorted.binary_search(&c).ok();
    let mut labels = Vec::with_capacity(g.num_nodes());
    let (mut id_nodes, mut ood_nodes) = (Vec::new(), Vec::new());
    for (i, y) in g.labels().iter().enumerate() {
        match y.map(|c| (c, remap(c))) {
            Some((_, Some(k))) => {
                id_nodes.push(i);
                labels.push(Some(k));
            }
            Some((_, None)) => {
                ood_nodes.push(i);
                labels.push(None);
            }
            None => labels.push(None),
        }
    }
    let splits = Splits {
        ood: ood_nodes.clone(),
        ..Splits::default()
    };
    let staged = GraphDataset::new(g.features().clone(), g.edges().to_vec(), labels, sorted.len(), splits)?;
    let mut rng = RngStream::new(seed);
    let splits = make_splits(&staged, SPLIT_FRACTIONS, &mut rng)?;
    Ok(OodBundle {
        graph: staged.with_splits(splits)?,
        id_nodes,
        ood_nodes,
        kind: OodKind::L,
        seed,
        params: json!({ "id_classes": sorted }),
    })
}

/// `n` points around eight modes at angles `2πk/8` on a circle, with the mode
/// of each point.
pub fn gen_eight_gaussians(n: usize, radius: f64, std: f64, rng: &mut RngStream) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(2 * n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(8);
        let a = 2.0 * PI * k as f64 / 8.0;
        data.push(radius * a.cos() + std * rng.normal());
        data.push(radius * a.sin() + std * rng.normal());
        modes.push(k);
    }
    (Matrix::from_vec(n, 2, data).expect("finite points"), modes)
}

/// Edgeless toy bundle: `n_train` training and `n_id` held-out mode samples,
/// and `n_ood` points uniform in the bounding box of the training samples.
pub fn gen_toy_bundle(n_train: usize, n_id: usize, n_ood: usize, radius: f64, std: f64, seed: u64) -> Result<OodBundle> {
    let mut rng = RngStream::new(seed);
    let (train, train_modes) = gen_eight_gaussians(n_train, radius, std, &mut rng);
    let (held, held_modes) = gen_eight_gaussians(n_id, radius, std, &mut rng);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in 0..train.rows() {
        for c in 0..2 {
            lo[c] = lo[c].min(train.get(r, c));
            hi[c] = hi[c].max(train.get(r, c));
        }
    }
    if n_train == 0 {
        (lo, hi) = ([-radius; 2], [radius; 2]);
    }
    let mut data = train.into_vec();
    data.extend(held.into_vec());
    for _ in 0..n_ood {
        for c in 0..2 {
            data.push(rng.uniform_range(lo[c], hi[c]));
        }
    }
    let n = n_train + n_id + n_ood;
    let mut labels: Vec<Option<usize>> = train_modes.into_iter().chain(held_modes).map(Some).collect();
    labels.extend(std::iter::repeat_n(None, n_ood));
    let splits = Splits {
        train: (0..n_train).collect(),
        valid: Vec::new(),
        test: (n_train..n_train + n_id).collect(),
        ood: (n_train + n_id..n).collect(),
    };
    let graph = GraphDataset::new(Matrix::from_vec(n, 2, data)?, Vec::new(), labels, 8, splits)?;
    Ok(OodBundle {
        id_nodes: (0..n_train + n_id).collect(),
        ood_nodes: (n_train + n_id..n).collect(),
        graph,
        kind: OodKind::F,
        seed,
        params: json!({ "toy": "eight_gaussians", "radius": radius, "std": std, "n_train": n_train, "n_id": n_id, "n_ood": n_ood }),
    })
}

/// Parameters of [`gen_synthetic_homophily`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomophilySpec {
    pub nodes: usize,
    pub classes: usize,
    pub homophily: f64,
    pub avg_degree: f64,
    pub feature_std: f64,
}

/// Uniform labels, Gaussian features around `e_c/√2` (unit distance between
/// class means), and `round(avg_degree / 2)` endpoints drawn per node, each
/// of the same class with probability `h`.
pub fn gen_synthetic_homophily(spec: &HomophilySpec, rng: &mut RngStream) -> Result<GraphDataset> {
    let HomophilySpec {
        nodes: n,
        classes: c,
        homophily: h,
        avg_degree,
        feature_std,
    } = *spec;
    if n < 2 || c < 2 || !(0.0..=1.0).contains(&h) || !(avg_degree > 0.0) || !(feature_std >= 0.0) {
        return Err(Error::contract(format!("degenerate synthetic graph parameters {spec:?}")));
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let mut members = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mean = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(n * c);
    for &y in &labels {
        for k in 0..c {
            let m = if k == y { mean } else { 0.0 };
            data.push(m + feature_std * rng.normal());
        }
    }
    let per_node = (avg_degree / 2.0).round() as usize;
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for i in 0..n {
        let y = labels[i];
        for _ in 0..per_node {
            let j = if rng.bernoulli(h) {
                let same = &members[y];
                if same.len() < 2 {
                    continue;
                }
                let mut j = same[rng.below(same.len())];
                while j == i {
                    j = same[rng.below(same.len())];
                }
                j
            } else {
                let others = n - members[y].len();
                if others == 0 {
                    continue;
                }
                // k-th node outside class y
                let mut k = rng.below(others);
                let mut j = 0;
                loop {
                    if labels[j] != y {
                        if k == 0 {
                            break;
                        }
                        k -= 1;
                    }
                    j += 1;
                }
                j
            };
            let e = (i.min(j), i.max(j));
            if seen.insert(e) {
                edges.push(e);
            }
        }
    }
    GraphDataset::new(
        Matrix::from_vec(n, c, data)?,
        edges,
        labels.into_iter().map(Some).collect(),
        c,
        Splits::default(),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    #[serde(rename = "type")]
    kind: OodKind,
    seed: u64,
    id_nodes: Vec<usize>,
    ood_nodes: Vec<usize>,
    #[serde(default)]
    params: Value,
}

/// Dataset files plus `ood.json`.
pub fn save_bundle(b: &OodBundle, dir: &Path) -> Result<()> {
    save_dataset(&b.graph, dir)?;
    let side = Sidecar {
        kind: b.kind,
        seed: b.seed,
        id_nodes: b.id_nodes.clone(),
        ood_nodes: b.ood_nodes.clone(),
        params: b.params.clone(),
    };
    let p = dir.join("ood.json");
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

pub fn load_bundle(dir: &Path) -> Result<OodBundle> {
    let graph = load_dataset(dir)?;
    let p = dir.join("ood.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&p, e.line(), e.to_string()))?;
    let n = graph.num_nodes();
    if side.id_nodes.iter().chain(&side.ood_nodes).any(|&i| i >= n) {
        return Err(Error::contract(format!("ood.json names nodes outside [0, {n})")));
    }
    if side.ood_nodes != graph.splits.ood {
        return Err(Error::contract("ood.json disagrees with the OOD split"));
    }
    Ok(OodBundle {
        graph,
        id_nodes: side.id_nodes,
        ood_nodes: side.ood_nodes,
        kind: side.kind,
        seed: side.seed,
        params: side.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::path2;

    fn labeled(n: usize, c: usize, seed: u64) -> GraphDataset {
        let mut rng = RngStream::new(seed);
        let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.normal()).collect()).unwrap();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        GraphDataset::new(x, edges, (0..n).map(|i| Some(i % c)).collect(), c, Splits::default()).unwrap()
    }

    fn ood_edges(b: &OodBundle) -> usize {
        let n = b.id_nodes.len();
        b.graph.edges().iter().filter(|&&(u, _)| u >= n).count()
    }

    #[test]
    fn extreme_block_probabilities() {
        let g = labeled(9, 3, 1);
        let mut spec = SbmSpec::from_labels(&g);
        spec.p_in = 0.0;
        spec.p_out = 0.0;
        assert_eq!(ood_edges(&gen_structure_ood(&g, &spec, 0).unwrap()), 0);
        spec.p_in = 1.0;
        spec.p_out = 1.0;
        assert_eq!(ood_edges(&gen_structure_ood(&g, &spec, 0).unwrap()), 36);
        spec.p_out = 1.5;
        assert!(gen_structure_ood(&g, &spec, 0).is_err());
    }

    #[test]
    fn structure_bundle_keeps_the_id_graph() {
        let g = labeled(12, 3, 2);
        let b = gen_structure_ood(&g, &SbmSpec::from_labels(&g), 4).unwrap();
        let (id, _) = b.graph.induced_subgraph(&b.id_nodes).unwrap();
        assert_eq!(id.features(), g.features());
        assert_eq!(id.edges(), g.edges());
        assert_eq!(id.labels(), g.labels());
        assert!(b.graph.edges().iter().all(|&(u, v)| (u < 12) == (v < 12)));
        assert_eq!(b.id_nodes.len() + b.ood_nodes.len(), b.graph.num_nodes());
    }

    #[test]
    fn degree_matched_calibration() {
        let g = labeled(40, 4, 3);
        let s = SbmSpec::from_labels(&g);
        assert!((s.p_in / s.p_out - SBM_RATIO).abs() < 1e-12);
        let n = 40.0;
        let within: f64 = s.block_sizes.iter().map(|&b| (b * (b - 1)) as f64).sum();
        let across: f64 = s.block_sizes.iter().map(|&b| b as f64 * (n - b as f64)).sum();
        let expected_degree = (within * s.p_in + across * s.p_out) / n;
        assert!((expected_degree - g.average_degree()).abs() < 1e-12);
    }

    #[test]
    fn interpolation_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let g = GraphDataset::new(x.clone(), vec![(0, 1)], vec![Some(0); 3], 1, Splits::default()).unwrap();
        let b = gen_feature_ood(&g, 5).unwrap();
        assert_eq!(b.graph.features().slice_rows(3, 6), x);

        let g = labeled(10, 2, 6);
        let b = gen_feature_ood(&g, 7).unwrap();
        for i in 0..10 {
            let row = b.graph.features().row(10 + i);
            let inside = (0..10).filter(|&j| j != i).any(|j| {
                row.iter().enumerate().all(|(c, &v)| {
                    let (a, z) = (g.features().get(i, c), g.features().get(j, c));
                    v >= a.min(z) - 1e-12 && v <= a.max(z) + 1e-12
                })
            });
            assert!(inside);
        }
        let b = gen_feature_ood(&path2(), 1).unwrap();
        assert_eq!(b.ood_nodes.len(), 2);
        assert!(gen_feature_ood(&GraphDataset::new(Matrix::zeros(1, 1), vec![], vec![None], 1, Splits::default()).unwrap(), 0).is_err());
    }

    #[test]
    fn label_leaveout_examples() {
        let g = labeled(10, 2, 8);
        let b = split_label_leaveout(&g, &[0], 1).unwrap();
        assert_eq!(b.ood_nodes, vec![1, 3, 5, 7, 9]);
        assert_eq!(b.graph.num_classes(), 1);
        let mut all: Vec<usize> = b.id_nodes.iter().chain(&b.ood_nodes).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_label_leaveout(&g, &[0, 1], 1).is_err());
        assert!(split_label_leaveout(&g, &[], 1).is_err());
    }

    #[test]
    fn default_classes_are_the_most_frequent_half() {
        let labels = [0, 1, 1, 2, 2, 2, 3, 4, 4].map(Some).to_vec();
        let g = GraphDataset::new(Matrix::zeros(9, 1), vec![], labels, 5, Splits::default()).unwrap();
        assert_eq!(default_id_classes(&g), vec![1, 2, 4]);
    }

    #[test]
    fn eight_gaussians_examples() {
        let mut rng = RngStream::new(0);
        assert_eq!(gen_eight_gaussians(0, 4.0, 0.3, &mut rng).0.rows(), 0);
        let (x, m) = gen_eight_gaussians(50, 4.0, 0.0, &mut rng);
        for (r, &k) in m.iter().enumerate() {
            let a = 2.0 * PI * k as f64 / 8.0;
            assert_eq!((x.get(r, 0), x.get(r, 1)), (4.0 * a.cos(), 4.0 * a.sin()));
        }
    }

    #[test]
    fn homophily_extremes() {
        let mut rng = RngStream::new(1);
        let spec = HomophilySpec {
            nodes: 200,
            classes: 4,
            homophily: 1.0,
            avg_degree: 6.0,
            feature_std: 0.5,
        };
        let g = gen_synthetic_homophily(&spec, &mut rng).unwrap();
        assert_eq!(g.edge_homophily(), 1.0);
        let g = gen_synthetic_homophily(&HomophilySpec { homophily: 0.0, ..spec.clone() }, &mut rng).unwrap();
        assert_eq!(g.edge_homophily(), 0.0);
        assert!(gen_synthetic_homophily(&HomophilySpec { homophily: 1.5, ..spec }, &mut rng).is_err());
    }

    #[test]
    fn bundle_files_round_trip() {
        let g = labeled(8, 2, 9);
        let b = gen_structure_ood(&g, &SbmSpec::from_labels(&g), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }
}
