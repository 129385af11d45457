//! Feature backbones and the classification head.

use std::sync::Arc;

use super::config::{Backbone, TrainConfig};
use crate::diff::{logsumexp, CsrMatrix, Matrix, RngStream, Tape, Var};
use crate::encoder::{encode_tape, glorot, EncoderParams, EncoderVars, GraphInput};
use crate::error::{Error, Result};
use crate::graph::{gcn_norm, sym_norm_prop, GraphDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// d×C.
    pub w: Matrix,
    /// 1×C.
    pub b: Matrix,
}

impl ClassifierParams {
    pub fn init(d: usize, c: usize, rng: &mut RngStream) -> Self {
        Self {
            w: glorot(d, c, rng),
            b: Matrix::zeros(1, c),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }

    /// Handles `[w, b]`.
    pub fn register(&self, tape: &mut Tape) -> [Var; 2] {
        [tape.param(self.w.clone()), tape.param(self.b.clone())]
    }
}

/// `H W + b`.
pub fn classify(h: &Matrix, p: &ClassifierParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let [w, b] = p.register(&mut tape);
    let out = classify_tape(&mut tape, hv, w, b)?;
    Ok(tape.value(out).clone())
}

pub fn classify_tape(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    tape.add_row(z, b)
}

/// Mean of `-log softmax(logits)[label]` over `mask`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("cross-entropy over an empty mask"));
    }
    let mut total = 0.0;
    for &i in mask {
        let y = labels[i];
        if y >= logits.cols() {
            return Err(Error::contract(format!("label {y} outside {} classes", logits.cols())));
        }
        let row = logits.row(i);
        total += logsumexp(row) - row[y];
    }
    Ok(total / mask.len() as f64)
}

/// Two renormalized propagation layers: `Â relu(Â X W_a + b_a) W_b + b_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub dropout: f64,
}

impl GcnParams {
    pub fn init(d0: usize, d: usize, dropout: f64, rng: &mut RngStream) -> Self {
        Self {
            w1: glorot(d0, d, rng),
            b1: Matrix::zeros(1, d),
            w2: glorot(d, d, rng),
            b2: Matrix::zeros(1, d),
            dropout,
        }
    }
}

/// Propagation operator of a backbone kind.
pub fn operator(kind: Backbone, beta: f64, g: &GraphDataset) -> CsrMatrix {
    match kind {
        Backbone::Multihop => sym_norm_prop(g, beta),
        Backbone::Gcn => gcn_norm(g),
        Backbone::Identity => CsrMatrix::identity(g.num_nodes()),
    }
}

/// The representation network in front of the heads.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureEncoder {
    Multihop(EncoderParams),
    Gcn(GcnParams),
    /// Latent equals the raw features; no parameters.
    Identity { dim: usize },
}

/// Tape handles of one backbone registration.
#[derive(Clone, Debug)]
pub enum BackboneVars {
    Multihop(EncoderVars),
    Gcn([Var; 4]),
    Identity,
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        match self {
            BackboneVars::Multihop(v) => v.all(),
            BackboneVars::Gcn(v) => v.to_vec(),
            BackboneVars::Identity => Vec::new(),
        }
    }
}

impl FeatureEncoder {
    pub fn init(cfg: &TrainConfig, d0: usize, rng: &mut RngStream) -> Self {
        match cfg.backbone {
            Backbone::Multihop => {
                let mut p = EncoderParams::init(d0, cfg.dim, cfg.effective_hops(), rng);
                p.beta = cfg.beta;
                p.dropout = cfg.dropout;
                p.dropout_site = cfg.dropout_site;
                p.activation = cfg.fuse_activation;
                FeatureEncoder::Multihop(p)
            }
            Backbone::Gcn => FeatureEncoder::Gcn(GcnParams::init(d0, cfg.dim, cfg.dropout, rng)),
            Backbone::Identity => FeatureEncoder::Identity { dim: d0 },
        }
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        match self {
            FeatureEncoder::Multihop(p) => p.dim(),
            FeatureEncoder::Gcn(p) => p.w2.cols(),
            FeatureEncoder::Identity { dim } => *dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureEncoder::Multihop(p) => p.input_dim(),
            FeatureEncoder::Gcn(p) => p.w1.rows(),
            FeatureEncoder::Identity { dim } => *dim,
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        match self {
            FeatureEncoder::Multihop(p) => p.matrices(),
            FeatureEncoder::Gcn(p) => vec![&p.w1, &p.b1, &p.w2, &p.b2],
            FeatureEncoder::Identity { .. } => Vec::new(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            FeatureEncoder::Multihop(p) => p.matrices_mut(),
            FeatureEncoder::Gcn(p) => vec![&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2],
            FeatureEncoder::Identity { .. } => Vec::new(),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        match self {
            FeatureEncoder::Multihop(p) => BackboneVars::Multihop(p.register(tape, true)),
            FeatureEncoder::Gcn(p) => BackboneVars::Gcn([
                tape.param(p.w1.clone()),
                tape.param(p.b1.clone()),
                tape.param(p.w2.clone()),
                tape.param(p.b2.clone()),
            ]),
            FeatureEncoder::Identity { .. } => BackboneVars::Identity,
        }
    }

    /// Propagation operator this backbone expects.
    pub fn operator(&self, g: &GraphDataset) -> CsrMatrix {
        match self {
            FeatureEncoder::Multihop(p) => operator(Backbone::Multihop, p.beta, g),
            FeatureEncoder::Gcn(_) => operator(Backbone::Gcn, 0.0, g),
            FeatureEncoder::Identity { .. } => operator(Backbone::Identity, 0.0, g),
        }
    }

    pub fn input(&self, g: &GraphDataset) -> GraphInput {
        GraphInput::new(g.feature_csr(), self.operator(g))
    }

    /// Encodes `input` on `tape`.
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        vars: &mut BackboneVars,
        input: &GraphInput,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        match (self, vars) {
            (FeatureEncoder::Multihop(p), BackboneVars::Multihop(v)) => encode_tape(tape, v, p, input, training, rng),
            (FeatureEncoder::Gcn(p), BackboneVars::Gcn([w1, b1, w2, b2])) => {
                let x = if training && p.dropout > 0.0 {
                    let keep = 1.0 / (1.0 - p.dropout);
                    Arc::new(
                        input
                            .features
                            .map_values(|v| if rng.bernoulli(p.dropout) { 0.0 } else { v * keep })
                            .pruned(),
                    )
                } else {
                    Arc::clone(&input.features)
                };
                let xw = tape.spmm(&x, *w1)?;
                let ax = tape.spmm(&input.prop, xw)?;
                let h1 = tape.add_row(ax, *b1)?;
                let r = tape.leaky_relu(h1, 0.0);
                let hw = tape.matmul(r, *w2)?;
                let ah = tape.spmm(&input.prop, hw)?;
                tape.add_row(ah, *b2)
            }
            (FeatureEncoder::Identity { .. }, BackboneVars::Identity) => Ok(tape.constant(input.features.to_dense())),
            _ => Err(Error::contract("backbone variables registered for a different backbone")),
        }
    }

    /// Dropout-free encoding of a whole graph.
    pub fn encode(&self, input: &GraphInput) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut vars = self.register(&mut tape);
        let mut rng = RngStream::new(0);
        let h = self.encode_tape(&mut tape, &mut vars, input, false, &mut rng)?;
        Ok(tape.value(h).clone())
    }
}
