//! Multi-hop feature encoder.
//!
//! `X^(l) = P X^(l-1)` with `P = βI + D^{-1/2} A D^{-1/2}`, per-hop affine maps
//! `H^(l) = X^(l) W^(l) + b^(l)`, then `H = [H^(0) ‖ … ‖ H^(L)] W_enc + b_enc`.
//!
//! Two evaluation routes compute the same function. The literal route
//! materializes every hop. The fused route folds each `W^(l)` into its block of
//! `W_enc` and evaluates `Σ_l P^l (X M_l)` by Horner's rule with sparse
//! products, which avoids dense N×d0 hops entirely. The fused route is used
//! whenever no per-hop dropout mask is in play.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::diff::{CsrMatrix, Matrix, RngStream, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{spmm, SparseOperator};

/// Slope of the optional post-fusion activation.
pub const FUSE_ACTIVATION_SLOPE: f64 = 0.01;

/// Where dropout masks are applied during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutSite {
    /// On each propagated `X^(l)` before its linear map.
    #[default]
    Hops,
    /// On the raw features before propagation.
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `W^(l)`, each d0×d.
    pub hop_weights: Vec<Matrix>,
    /// `b^(l)`, each 1×d.
    pub hop_biases: Vec<Matrix>,
    /// (L+1)d × d.
    pub w_enc: Matrix,
    /// 1×d.
    pub b_enc: Matrix,
    pub beta: f64,
    pub dropout: f64,
    pub dropout_site: DropoutSite,
    /// Leaky-rectify the fused output.
    pub activation: bool,
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

impl EncoderParams {
    /// Glorot-initialized weights and zero biases for `hops` propagation steps.
    pub fn init(d0: usize, d: usize, hops: usize, rng: &mut RngStream) -> Self {
        let hop_weights = (0..=hops).map(|_| glorot(d0, d, rng)).collect();
        let hop_biases = (0..=hops).map(|_| Matrix::zeros(1, d)).collect();
        Self {
            hop_weights,
            hop_biases,
            w_enc: glorot((hops + 1) * d, d, rng),
            b_enc: Matrix::zeros(1, d),
            beta: 0.0,
            dropout: 0.0,
            dropout_site: DropoutSite::Hops,
            activation: false,
        }
    }

    /// Propagation depth L.
    pub fn hops(&self) -> usize {
        self.hop_weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.hop_weights[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d, l) = (self.input_dim(), self.dim(), self.hops());
        let ok = self.hop_biases.len() == l + 1
            && self.hop_weights.iter().all(|w| w.shape() == (d0, d))
            && self.hop_biases.iter().all(|b| b.shape() == (1, d))
            && self.w_enc.shape() == ((l + 1) * d, d)
            && self.b_enc.shape() == (1, d);
        if !ok {
            return Err(Error::contract("encoder parameter shapes are inconsistent"));
        }
        if self.beta < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("encoder needs beta >= 0 and dropout in [0, 1)"));
        }
        Ok(())
    }

    /// Matrices in a fixed order: all hop weights, all hop biases, W_enc, b_enc.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.hop_weights.iter().chain(&self.hop_biases).collect();
        v.push(&self.w_enc);
        v.push(&self.b_enc);
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.hop_weights.iter_mut().chain(self.hop_biases.iter_mut()).collect();
        v.push(&mut self.w_enc);
        v.push(&mut self.b_enc);
        v
    }

    /// Places every matrix on `tape`, as parameters or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        EncoderVars {
            hop_w: self.hop_weights.iter().map(&mut put).collect(),
            hop_b: self.hop_biases.iter().map(&mut put).collect(),
            w_enc: put(&self.w_enc),
            b_enc: put(&self.b_enc),
            fused: None,
        }
    }
}

/// Tape handles for one registration of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub hop_w: Vec<Var>,
    pub hop_b: Vec<Var>,
    pub w_enc: Var,
    pub b_enc: Var,
    fused: Option<(Vec<Var>, Var)>,
}

impl EncoderVars {
    /// Same order as [`EncoderParams::matrices`].
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.hop_w.iter().chain(&self.hop_b).copied().collect();
        v.push(self.w_enc);
        v.push(self.b_enc);
        v
    }

    /// `M_l = W^(l) W_enc[l]` and the folded bias, built once per tape.
    fn fused(&mut self, tape: &mut Tape) -> Result<(Vec<Var>, Var)> {
        if let Some(f) = &self.fused {
            return Ok(f.clone());
        }
        let d = tape.value(self.w_enc).cols();
        let mut ms = Vec::with_capacity(self.hop_w.len());
        let mut bias = self.b_enc;
        for (l, (&w, &b)) in self.hop_w.iter().zip(&self.hop_b).enumerate() {
            let block = tape.slice_rows(self.w_enc, l * d, (l + 1) * d)?;
            ms.push(tape.matmul(w, block)?);
            let bb = tape.matmul(b, block)?;
            bias = tape.add(bias, bb)?;
        }
        self.fused = Some((ms.clone(), bias));
        Ok((ms, bias))
    }
}

/// One graph's encoder input: sparse features, the propagation operator, and
/// a lazily filled cache of the dense hops.
#[derive(Debug)]
pub struct GraphInput {
    pub features: Arc<CsrMatrix>,
    pub prop: Arc<SparseOperator>,
    hops: OnceLock<Vec<Matrix>>,
}

impl GraphInput {
    pub fn new(features: CsrMatrix, prop: SparseOperator) -> Self {
        Self {
            features: Arc::new(features),
            prop: Arc::new(prop),
            hops: OnceLock::new(),
        }
    }

    /// Shares an existing operator, as the corrupted graph does.
    pub fn with_prop(features: CsrMatrix, prop: Arc<SparseOperator>) -> Self {
        Self {
            features: Arc::new(features),
            prop,
            hops: OnceLock::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    /// Dense hops `X^(0..L)`, computed on first use.
    pub fn hops(&self, l: usize) -> Result<&[Matrix]> {
        if let Some(h) = self.hops.get() {
            if h.len() == l + 1 {
                return Ok(h);
            }
            return Err(Error::contract("hop cache built for a different depth"));
        }
        let h = propagate(&self.features.to_dense(), &self.prop, l)?;
        Ok(self.hops.get_or_init(|| h))
    }
}

/// `[X, PX, P²X, …, P^L X]`.
pub fn propagate(x: &Matrix, p: &SparseOperator, l: usize) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(l + 1);
    out.push(x.clone());
    for k in 0..l {
        let next = spmm(p, &out[k])?;
        out.push(next);
    }
    Ok(out)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite mask")
}

fn finish(tape: &mut Tape, p: &EncoderParams, h: Var) -> Var {
    if p.activation {
        tape.leaky_relu(h, FUSE_ACTIVATION_SLOPE)
    } else {
        h
    }
}

/// Literal route over given hops, with a fresh dropout mask per hop when
/// `training` is set.
pub fn encode_hops_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    p: &EncoderParams,
    hops: &[Matrix],
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    if hops.len() != vars.hop_w.len() {
        return Err(Error::contract(format!("{} hops for an encoder of depth {}", hops.len(), p.hops())));
    }
    let mut parts = Vec::with_capacity(hops.len());
    for (l, x) in hops.iter().enumerate() {
        let xv = if training && p.dropout > 0.0 {
            tape.constant(x.hadamard(&dropout_mask(x.rows(), x.cols(), p.dropout, rng))?)
        } else {
            tape.constant(x.clone())
        };
        let xw = tape.matmul(xv, vars.hop_w[l])?;
        parts.push(tape.add_row(xw, vars.hop_b[l])?);
    }
    let cat = tape.concat_cols(&parts)?;
    let fused = tape.matmul(cat, vars.w_enc)?;
    let h = tape.add_row(fused, vars.b_enc)?;
    Ok(finish(tape, p, h))
}

/// Fused route: `Σ_l P^l (X M_l) + bias` by Horner's rule.
pub fn encode_fused_tape(
    tape: &mut Tape,
    vars: &mut EncoderVars,
    p: &EncoderParams,
    features: &Arc<CsrMatrix>,
    prop: &Arc<SparseOperator>,
) -> Result<Var> {
    let (ms, bias) = vars.fused(tape)?;
    let mut acc = tape.spmm(features, ms[ms.len() - 1])?;
    for m in ms[..ms.len() - 1].iter().rev() {
        let t = tape.spmm(features, *m)?;
        let pa = tape.spmm(prop, acc)?;
        acc = tape.add(pa, t)?;
    }
    let h = tape.add_row(acc, bias)?;
    Ok(finish(tape, p, h))
}

/// Masked hops sparser than one in this many entries go through CSR.
const SPARSE_HOP_RATIO: usize = 10;

/// Hop dropout on the fused route. Draws the same masks as the literal route,
/// and applies hop 0's mask to the stored entries only.
fn encode_dropped_hops_tape(
    tape: &mut Tape,
    vars: &mut EncoderVars,
    p: &EncoderParams,
    input: &GraphInput,
    rng: &mut RngStream,
) -> Result<Var> {
    let hops = input.hops(p.hops())?;
    let (ms, bias) = vars.fused(tape)?;
    let x = &input.features;
    let mask = dropout_mask(x.rows(), x.cols(), p.dropout, rng);
    let mut triplets = Vec::new();
    for r in 0..x.rows() {
        let (idx, vals) = x.row(r);
        triplets.extend(idx.iter().zip(vals).map(|(&c, &v)| (r, c, v * mask.get(r, c))));
    }
    let dropped = Arc::new(CsrMatrix::from_triplets(x.rows(), x.cols(), triplets)?.pruned());
    let mut acc = tape.spmm(&dropped, ms[0])?;
    for (l, hop) in hops.iter().enumerate().skip(1) {
        let masked = hop.hadamard(&dropout_mask(hop.rows(), hop.cols(), p.dropout, rng))?;
        let nnz = masked.as_slice().iter().filter(|v| **v != 0.0).count();
        let t = if nnz * SPARSE_HOP_RATIO < masked.rows() * masked.cols() {
            tape.spmm(&Arc::new(CsrMatrix::from_dense(&masked)), ms[l])?
        } else {
            let xv = tape.constant(masked);
            tape.matmul(xv, ms[l])?
        };
        acc = tape.add(acc, t)?;
    }
    let h = tape.add_row(acc, bias)?;
    Ok(finish(tape, p, h))
}

/// Encodes one graph on `tape`, picking the route from the dropout setting.
pub fn encode_tape(
    tape: &mut Tape,
    vars: &mut EncoderVars,
    p: &EncoderParams,
    input: &GraphInput,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    let dropping = training && p.dropout > 0.0;
    match (dropping, p.dropout_site) {
        (true, DropoutSite::Hops) => encode_dropped_hops_tape(tape, vars, p, input, rng),
        (true, DropoutSite::Input) => {
            let keep = 1.0 / (1.0 - p.dropout);
            let dropped = Arc::new(
                input
                    .features
                    .map_values(|v| if rng.bernoulli(p.dropout) { 0.0 } else { v * keep })
                    .pruned(),
            );
            encode_fused_tape(tape, vars, p, &dropped, &input.prop)
        }
        (false, _) => encode_fused_tape(tape, vars, p, &input.features, &input.prop),
    }
}

/// Value-level encoding of precomputed hops (literal route).
pub fn encode(hops: &[Matrix], p: &EncoderParams, training: bool, rng: &mut RngStream) -> Result<Matrix> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let h = encode_hops_tape(&mut tape, &vars, p, hops, training, rng)?;
    Ok(tape.value(h).clone())
}

/// Value-level encoding of a whole graph, dropout off.
pub fn encode_graph(p: &EncoderParams, input: &GraphInput) -> Result<Matrix> {
    p.validate()?;
    let mut tape = Tape::new();
    let mut vars = p.register(&mut tape, false);
    let h = encode_fused_tape(&mut tape, &mut vars, p, &input.features, &input.prop)?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::graph::{fixtures::path2, sym_norm_prop, GraphDataset, Splits};

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn random_graph(n: usize, d0: usize, rng: &mut RngStream) -> GraphDataset {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(0.3) {
                    edges.push((u, v));
                }
            }
        }
        GraphDataset::new(random(n, d0, rng), edges, vec![None; n], 1, Splits::default()).unwrap()
    }

    #[test]
    fn propagate_examples() {
        let x = Matrix::identity(2);
        let p = sym_norm_prop(&path2(), 0.0);
        assert_eq!(propagate(&x, &p, 0).unwrap(), vec![x.clone()]);
        let hops = propagate(&x, &p, 2).unwrap();
        assert_eq!(hops[1], Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        assert_eq!(hops[2], Matrix::identity(2));

        let g = GraphDataset::new(Matrix::zeros(3, 1), vec![], vec![None; 3], 1, Splits::default()).unwrap();
        let x3 = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        for h in propagate(&x3, &sym_norm_prop(&g, 1.0), 3).unwrap() {
            assert_eq!(h, x3);
        }
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut rng = RngStream::new(1);
        let mut p = EncoderParams::init(3, 2, 1, &mut rng);
        for m in p.matrices_mut() {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        p.b_enc = Matrix::row_vector(&[0.5, -1.0]);
        let x = random(4, 3, &mut rng);
        let hops = propagate(&x, &CsrMatrix::identity(4), 1).unwrap();
        let h = encode(&hops, &p, false, &mut rng).unwrap();
        for r in 0..4 {
            assert_eq!(h.row(r), &[0.5, -1.0]);
        }
    }

    #[test]
    fn identity_pipeline() {
        let mut rng = RngStream::new(2);
        let mut p = EncoderParams::init(3, 3, 0, &mut rng);
        p.hop_weights[0] = Matrix::identity(3);
        p.w_enc = Matrix::identity(3);
        let x = random(5, 3, &mut rng);
        assert_eq!(encode(&[x.clone()], &p, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn fused_route_matches_literal_route() {
        let mut rng = RngStream::new(3);
        let g = random_graph(12, 4, &mut rng);
        let mut p = EncoderParams::init(4, 3, 3, &mut rng);
        p.beta = 0.4;
        for b in &mut p.hop_biases {
            *b = random(1, 3, &mut rng);
        }
        p.b_enc = random(1, 3, &mut rng);
        let input = GraphInput::new(g.feature_csr(), sym_norm_prop(&g, p.beta));
        let literal = encode(input.hops(3).unwrap(), &p, false, &mut rng).unwrap();
        let fused = encode_graph(&p, &input).unwrap();
        assert!(literal.sub(&fused).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn dropped_fused_route_matches_literal_route() {
        let mut rng = RngStream::new(6);
        let path: Vec<_> = (0..29).map(|i| (i, i + 1)).collect();
        let one_hot = GraphDataset::new(Matrix::identity(30), path, vec![None; 30], 1, Splits::default()).unwrap();
        for g in [random_graph(12, 4, &mut rng), one_hot] {
            let mut p = EncoderParams::init(g.num_features(), 3, 2, &mut rng);
            p.dropout = 0.3;
            p.dropout_site = DropoutSite::Hops;
            p.b_enc = random(1, 3, &mut rng);
            let input = GraphInput::new(g.feature_csr(), sym_norm_prop(&g, p.beta));
            let literal = encode(input.hops(2).unwrap(), &p, true, &mut RngStream::new(8)).unwrap();
            let mut tape = Tape::new();
            let mut vars = p.register(&mut tape, false);
            let h = encode_tape(&mut tape, &mut vars, &p, &input, true, &mut RngStream::new(8)).unwrap();
            assert!(literal.sub(tape.value(h)).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_ignores_rng_and_cache_is_stable() {
        let mut rng = RngStream::new(4);
        let g = random_graph(10, 3, &mut rng);
        let mut p = EncoderParams::init(3, 4, 2, &mut rng);
        p.dropout = 0.5;
        let input = GraphInput::new(g.feature_csr(), sym_norm_prop(&g, 0.0));
        let a = encode(input.hops(2).unwrap(), &p, false, &mut RngStream::new(1)).unwrap();
        let b = encode(input.hops(2).unwrap(), &p, false, &mut RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        let fresh = propagate(g.features(), &sym_norm_prop(&g, 0.0), 2).unwrap();
        assert_eq!(encode(&fresh, &p, false, &mut rng).unwrap(), a);
        let dropped = encode(input.hops(2).unwrap(), &p, true, &mut RngStream::new(1)).unwrap();
        assert_ne!(dropped, a);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = RngStream::new(5);
        let g = random_graph(9, 3, &mut rng);
        let mut p = EncoderParams::init(3, 4, 2, &mut rng);
        p.beta = 0.7;
        let perm = rng.permutation(9);
        let mut inv = vec![0; 9];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let edges = g.edges().iter().map(|&(u, v)| (inv[u], inv[v])).collect();
        let gp = GraphDataset::new(g.features().select_rows(&perm), edges, vec![None; 9], 1, Splits::default()).unwrap();
        let h = encode_graph(&p, &GraphInput::new(g.feature_csr(), sym_norm_prop(&g, 0.7))).unwrap();
        let hp = encode_graph(&p, &GraphInput::new(gp.feature_csr(), sym_norm_prop(&gp, 0.7))).unwrap();
        assert!(hp.sub(&h.select_rows(&perm)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn w_enc_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(6);
        let g = random_graph(8, 3, &mut rng);
        let p = EncoderParams::init(3, 2, 2, &mut rng);
        let input = GraphInput::new(g.feature_csr(), sym_norm_prop(&g, 0.5));
        let fixed = p.clone();
        let report = grad_check(
            |t, v| {
                let mut vars = fixed.register(t, false);
                vars.w_enc = v[0];
                let h = encode_fused_tape(t, &mut vars, &fixed, &input.features, &input.prop)?;
                let sq = t.square(h);
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &[p.w_enc.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
