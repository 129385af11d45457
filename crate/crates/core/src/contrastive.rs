//! Bilinear discriminator, contrastive loss, mean readout and energy readout.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::diff::{sigmoid, softmax, Matrix, RngStream, Tape, Var, PROB_CLAMP};
use crate::encoder::glorot;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    /// d×d.
    pub w: Matrix,
}

impl DiscriminatorParams {
    pub fn init(d: usize, rng: &mut RngStream) -> Self {
        Self { w: glorot(d, d, rng) }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sigmoid(hᵀ W s)`.
pub fn discriminate(h: &[f64], s: &[f64], p: &DiscriminatorParams) -> Result<f64> {
    let d = p.w.rows();
    if p.w.cols() != d || h.len() != d || s.len() != d {
        return Err(Error::Dimension {
            op: "discriminate",
            left: (h.len(), s.len()),
            right: p.w.shape(),
        });
    }
    let ws: Vec<f64> = (0..d).map(|i| dot(p.w.row(i), s)).collect();
    Ok(sigmoid(dot(h, &ws)))
}

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

fn clamp_prob(p: f64) -> f64 {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if c != p && !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
        log::warn!("discriminator output {p} clamped to {c}");
    }
    c
}

/// `-(Σ ln pos + Σ ln(1 - neg)) / (|pos| + |neg|)`, probabilities clamped
/// `PROB_CLAMP` away from 0 and 1.
pub fn dgi_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("contrastive loss needs positive and negative scores"));
    }
    let lp: f64 = pos.iter().map(|&p| clamp_prob(p).ln()).sum();
    let ln: f64 = neg.iter().map(|&q| (1.0 - clamp_prob(q)).ln()).sum();
    Ok(-(lp + ln) / (pos.len() + neg.len()) as f64)
}

/// Column means of `h`.
pub fn mean_readout(h: &Matrix) -> Result<Vec<f64>> {
    if h.rows() == 0 {
        return Err(Error::contract("readout of an empty node set"));
    }
    Ok(h.col_means()?.into_vec())
}

/// Effective readout weights `γ p̄_i + (1-γ)/N`.
pub fn readout_weights(p_bar: &[f64], gamma: f64) -> Vec<f64> {
    let u = (1.0 - gamma) / p_bar.len() as f64;
    p_bar.iter().map(|&p| gamma * p + u).collect()
}

/// `Σ_i w_i h_i` for the given weights.
pub fn weighted_readout(h: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; h.cols()];
    for (i, &w) in weights.iter().enumerate() {
        for (acc, x) in s.iter_mut().zip(h.row(i)) {
            *acc += w * x;
        }
    }
    s
}

/// Energy-weighted readout: `p̄ = softmax(-energies)` and
/// `s_p = Σ (γ p̄_i + (1-γ)/N) h_i`.
pub fn energy_readout(h: &Matrix, energies: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if energies.len() != h.rows() {
        return Err(Error::Dimension {
            op: "energy_readout",
            left: h.shape(),
            right: (energies.len(), 1),
        });
    }
    if h.rows() == 0 {
        return Err(Error::contract("readout of an empty node set"));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::contract("non-finite energy in readout"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("gamma {gamma} outside [0, 1]")));
    }
    let neg: Vec<f64> = energies.iter().map(|e| -e).collect();
    let p_bar = softmax(&neg);
    let s = weighted_readout(h, &readout_weights(&p_bar, gamma));
    Ok((s, p_bar))
}

/// Differentiable `Σ_i w_i h_i` with constant weights, as a 1×d node.
pub fn readout_tape(tape: &mut Tape, h: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Matrix::row_vector(weights));
    tape.matmul(w, h)
}

/// Per-node discriminator logits `h_i ᵀ W s` as an N×1 node; `s` is 1×d.
pub fn discriminator_logits(tape: &mut Tape, h: Var, s: Var, w: Var) -> Result<Var> {
    let st = tape.transpose(s);
    let ws = tape.matmul(w, st)?;
    tape.matmul(h, ws)
}

/// Contrastive loss on the tape from clean and corrupted representations.
pub fn dgi_loss_tape(tape: &mut Tape, h_pos: Var, h_neg: Var, s: Var, w: Var) -> Result<Var> {
    let lp = discriminator_logits(tape, h_pos, s, w)?;
    let ln = discriminator_logits(tape, h_neg, s, w)?;
    let (np, nn) = (tape.value(lp).rows(), tape.value(ln).rows());
    let pos = tape.log_sigmoid(lp);
    let neg_logits = tape.scale(ln, -1.0);
    let neg = tape.log_sigmoid(neg_logits);
    let sp = tape.sum(pos);
    let sn = tape.sum(neg);
    let total = tape.add(sp, sn)?;
    Ok(tape.scale(total, -1.0 / (np + nn) as f64))
}

/// Values of the probabilities the tape loss works with, for reporting.
pub fn scores(h: &Matrix, s: &[f64], p: &DiscriminatorParams) -> Result<Vec<f64>> {
    (0..h.rows()).map(|i| discriminate(h.row(i), s, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    #[test]
    fn discriminate_examples() {
        let zero = DiscriminatorParams { w: Matrix::zeros(2, 2) };
        assert_eq!(discriminate(&[3.0, -1.0], &[2.0, 5.0], &zero).unwrap(), 0.5);
        let id = DiscriminatorParams { w: Matrix::identity(2) };
        assert!((discriminate(&[1.0, 0.0], &[1.0, 0.0], &id).unwrap() - 0.731058578630).abs() < 1e-9);
        assert_eq!(discriminate(&[0.0, 1.0], &[1.0, 0.0], &id).unwrap(), 0.5);
        assert!(discriminate(&[1.0], &[1.0, 0.0], &id).is_err());
    }

    #[test]
    fn dgi_loss_examples() {
        assert!((dgi_loss(&[0.5; 3], &[0.5; 3]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let want = -0.5 * (0.8f64.ln() + 0.7f64.ln());
        assert!((dgi_loss(&[0.8], &[0.3]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.289907).abs() < 5e-6);
        assert!(dgi_loss(&[1.0 - 1e-15], &[1e-15]).unwrap() < 1e-11);
        assert!(dgi_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn readout_examples() {
        let one = Matrix::from_rows(&[[2.0, -3.0]]).unwrap();
        assert_eq!(mean_readout(&one).unwrap(), vec![2.0, -3.0]);
        let two = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(mean_readout(&two).unwrap(), vec![0.5, 0.5]);
        assert!(mean_readout(&Matrix::zeros(0, 2)).is_err());

        let (s, p) = energy_readout(&two, &[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert!((s[0] - 0.75).abs() < 1e-15 && (s[1] - 0.25).abs() < 1e-15);
        let (s0, _) = energy_readout(&two, &[0.0, 3f64.ln()], 0.0).unwrap();
        assert_eq!(s0, mean_readout(&two).unwrap());
        assert!(energy_readout(&two, &[0.0, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss_and_gradients() {
        let mut rng = RngStream::new(3);
        let mut rand = |r, c| glorot(r, c, &mut rng);
        let (hp, hn, s, w) = (rand(5, 3), rand(5, 3), rand(1, 3), rand(3, 3));
        let mut t = Tape::new();
        let vars: Vec<_> = [&hp, &hn, &s, &w].iter().map(|m| t.param((*m).clone())).collect();
        let l = dgi_loss_tape(&mut t, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let disc = DiscriminatorParams { w: w.clone() };
        let pos = scores(&hp, s.as_slice(), &disc).unwrap();
        let neg = scores(&hn, s.as_slice(), &disc).unwrap();
        assert!((t.scalar(l) - dgi_loss(&pos, &neg).unwrap()).abs() < 1e-12);

        let r = grad_check(|t, v| dgi_loss_tape(t, v[0], v[1], v[2], v[3]), &[hp, hn, s, w], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
