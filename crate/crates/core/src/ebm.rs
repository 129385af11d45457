//! Latent energy head, Langevin sampler, replay buffer and the regularized
//! maximum-likelihood loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diff::{gemm, Matrix, RngStream, Tape, Var};
use crate::encoder::glorot;
use crate::error::{Error, Result};

/// Leaky-rectifier slope inside the energy head.
pub const ENERGY_SLOPE: f64 = 0.01;

/// How the graph summary enters the energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeMode {
    /// `f(h)`, summary ignored.
    Unconditional,
    /// `f([h ‖ ρs])`.
    #[default]
    Concat,
    /// `f(h) + hᵀ W_ce s`.
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyHeadParams {
    pub mode: CeMode,
    pub rho: f64,
    /// in_dim × d2 with in_dim = 2d for concat, d otherwise.
    pub w1: Matrix,
    /// 1×d2.
    pub b1: Matrix,
    /// d2×1.
    pub w2: Matrix,
    /// 1×1.
    pub b2: Matrix,
    /// d×d, bilinear mode only.
    pub w_ce: Option<Matrix>,
}

impl EnergyHeadParams {
    pub fn init(d: usize, d2: usize, mode: CeMode, rho: f64, rng: &mut RngStream) -> Self {
        let in_dim = if mode == CeMode::Concat { 2 * d } else { d };
        let w1 = glorot(in_dim, d2, rng);
        let w2 = glorot(d2, 1, rng);
        let w_ce = (mode == CeMode::Bilinear).then(|| glorot(d, d, rng));
        Self {
            mode,
            rho,
            w1,
            b1: Matrix::zeros(1, d2),
            w2,
            b2: Matrix::zeros(1, 1),
            w_ce,
        }
    }

    /// Latent dimension d.
    pub fn dim(&self) -> usize {
        if self.mode == CeMode::Concat {
            self.w1.rows() / 2
        } else {
            self.w1.rows()
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.w1, &self.b1, &self.w2, &self.b2];
        v.extend(self.w_ce.as_ref());
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        v.extend(self.w_ce.as_mut());
        v
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EnergyVars {
        let mut put = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        EnergyVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w_ce: self.w_ce.as_ref().map(put),
        }
    }

    fn check(&self, d: usize, s_len: usize) -> Result<()> {
        if d != self.dim() || s_len != self.dim() {
            return Err(Error::Dimension {
                op: "energy",
                left: (d, s_len),
                right: self.w1.shape(),
            });
        }
        Ok(())
    }

    /// Row-constant part of the first layer, `ρ s W1[d..] + b1`.
    fn hidden_offset(&self, s: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut off = self.b1.as_slice().to_vec();
        if self.mode == CeMode::Concat {
            for (k, &sk) in s.iter().enumerate() {
                let c = self.rho * sk;
                if c != 0.0 {
                    for (o, w) in off.iter_mut().zip(self.w1.row(d + k)) {
                        *o += c * w;
                    }
                }
            }
        }
        off
    }

    /// `W_ce s` for bilinear mode.
    fn bilinear_vec(&self, s: &[f64]) -> Option<Vec<f64>> {
        self.w_ce
            .as_ref()
            .map(|w| (0..w.rows()).map(|i| w.row(i).iter().zip(s).map(|(a, b)| a * b).sum()).collect())
    }

    /// Pre-activations `h W1[..d] + offset` for every row of `h`.
    fn pre_activations(&self, h: &Matrix, off: &[f64]) -> Matrix {
        let d = self.dim();
        let w1h = if self.mode == CeMode::Concat {
            self.w1.slice_rows(0, d)
        } else {
            self.w1.clone()
        };
        let mut z = Matrix::zeros(h.rows(), self.hidden());
        gemm(1.0, h, false, &w1h, false, 0.0, &mut z);
        for r in 0..z.rows() {
            for (x, o) in z.row_mut(r).iter_mut().zip(off) {
                *x += o;
            }
        }
        z
    }

    /// Energies of every row of `h` conditioned on `s`.
    pub fn energies(&self, h: &Matrix, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energies_and_grads(h, s, false)?.0)
    }

    /// Energies and, when asked, their gradients with respect to each row of `h`.
    pub fn energies_and_grads(&self, h: &Matrix, s: &[f64], want_grad: bool) -> Result<(Vec<f64>, Option<Matrix>)> {
        self.check(h.cols(), s.len())?;
        let off = self.hidden_offset(s);
        let mut z = self.pre_activations(h, &off);
        let w2 = self.w2.as_slice();
        let b2 = self.b2.as_slice()[0];
        let bil = self.bilinear_vec(s);
        let mut e = Vec::with_capacity(h.rows());
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let mut acc = b2;
            for (x, w) in row.iter_mut().zip(w2) {
                let a = if *x > 0.0 { *x } else { ENERGY_SLOPE * *x };
                acc += a * w;
                // Reuse the buffer for d energy / d pre-activation.
                *x = if *x > 0.0 { *w } else { ENERGY_SLOPE * w };
            }
            if let Some(b) = &bil {
                acc += h.row(r).iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            e.push(acc);
        }
        if !want_grad {
            return Ok((e, None));
        }
        let d = self.dim();
        let w1h = if self.mode == CeMode::Concat {
            self.w1.slice_rows(0, d)
        } else {
            self.w1.clone()
        };
        let mut g = Matrix::zeros(h.rows(), d);
        gemm(1.0, &z, false, &w1h, true, 0.0, &mut g);
        if let Some(b) = &bil {
            for r in 0..g.rows() {
                for (x, y) in g.row_mut(r).iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        Ok((e, Some(g)))
    }
}

/// Energy of a single latent vector.
pub fn energy(h: &[f64], s: &[f64], p: &EnergyHeadParams) -> Result<f64> {
    Ok(p.energies(&Matrix::row_vector(h), s)?[0])
}

/// Tape handles for [`EnergyHeadParams`].
#[derive(Clone, Debug)]
pub struct EnergyVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_ce: Option<Var>,
}

impl EnergyVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w1, self.b1, self.w2, self.b2];
        v.extend(self.w_ce);
        v
    }
}

/// Energies of the rows of `h` (N×d) given a 1×d summary `s`, as an N×1 node.
pub fn energy_tape(tape: &mut Tape, vars: &EnergyVars, p: &EnergyHeadParams, h: Var, s: Var) -> Result<Var> {
    let d = p.dim();
    let z = match p.mode {
        CeMode::Concat => {
            let w1h = tape.slice_rows(vars.w1, 0, d)?;
            let w1s = tape.slice_rows(vars.w1, d, 2 * d)?;
            let hz = tape.matmul(h, w1h)?;
            let rs = tape.scale(s, p.rho);
            let sz = tape.matmul(rs, w1s)?;
            let row = tape.add(sz, vars.b1)?;
            tape.add_row(hz, row)?
        }
        CeMode::Unconditional | CeMode::Bilinear => {
            let hz = tape.matmul(h, vars.w1)?;
            tape.add_row(hz, vars.b1)?
        }
    };
    let a = tape.leaky_relu(z, ENERGY_SLOPE);
    let out = tape.matmul(a, vars.w2)?;
    let mut e = tape.add_row(out, vars.b2)?;
    if let (CeMode::Bilinear, Some(wce)) = (p.mode, vars.w_ce) {
        let st = tape.transpose(s);
        let ws = tape.matmul(wce, st)?;
        let hws = tape.matmul(h, ws)?;
        e = tape.add(e, hws)?;
    }
    Ok(e)
}

/// `mean(E⁺) - mean(E⁻) + c (mean(E⁺²) + mean(E⁻²))`.
pub fn ebm_loss(e_pos: &[f64], e_neg: &[f64], c: f64) -> Result<f64> {
    if e_pos.is_empty() || e_neg.is_empty() {
        return Err(Error::contract("energy loss needs positive and negative energies"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let msq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    Ok(mean(e_pos) - mean(e_neg) + c * (msq(e_pos) + msq(e_neg)))
}

pub fn ebm_loss_tape(tape: &mut Tape, e_pos: Var, e_neg: Var, c: f64) -> Result<Var> {
    if tape.value(e_pos).is_empty() || tape.value(e_neg).is_empty() {
        return Err(Error::contract("energy loss needs positive and negative energies"));
    }
    let mp = tape.mean(e_pos)?;
    let mn = tape.mean(e_neg)?;
    let diff = tape.sub(mp, mn)?;
    let sp = tape.square(e_pos);
    let sn = tape.square(e_neg);
    let msp = tape.mean(sp)?;
    let msn = tape.mean(sn)?;
    let reg = tape.add(msp, msn)?;
    let reg = tape.scale(reg, c);
    tape.add(diff, reg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    /// K.
    pub steps: usize,
    /// λ.
    pub step_size: f64,
    /// σ².
    pub noise_var: f64,
    /// M.
    pub chains: usize,
    pub init_range: f64,
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || self.noise_var < 0.0 || self.chains == 0 || self.init_range < 0.0 {
            return Err(Error::contract(format!("invalid sampler settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SgldOutput {
    pub samples: Matrix,
    /// Chains restarted after a non-finite energy or gradient.
    pub resets: usize,
}

fn uniform_row(d: usize, range: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..d).map(|_| rng.uniform_range(-range, range)).collect()
}

/// K steps of `h ← h - λ ∇f(h) + ε`, `ε ~ N(0, σ² I)`, for every row of
/// `inits`. `grad` maps an M×d batch to per-row energies and gradients.
/// Samples are plain values, detached from any tape.
pub fn sgld_sample<F>(grad: F, inits: &Matrix, cfg: &SgldConfig, rng: &mut RngStream) -> Result<SgldOutput>
where
    F: Fn(&Matrix) -> Result<(Vec<f64>, Matrix)>,
{
    if !inits.is_finite() {
        return Err(Error::contract("non-finite sampler init"));
    }
    let mut h = inits.clone();
    let sd = cfg.noise_var.sqrt();
    let mut resets = 0;
    for _ in 0..cfg.steps {
        let (e, g) = grad(&h)?;
        for r in 0..h.rows() {
            let ok = e[r].is_finite() && g.row(r).iter().all(|x| x.is_finite());
            let row = h.row_mut(r);
            if ok {
                for (x, gi) in row.iter_mut().zip(g.row(r)) {
                    *x -= cfg.step_size * gi;
                }
            } else {
                resets += 1;
                row.copy_from_slice(&uniform_row(row.len(), cfg.init_range, rng));
            }
            if sd > 0.0 {
                for x in row.iter_mut() {
                    *x += sd * rng.normal();
                }
            }
            if row.iter().any(|x| !x.is_finite()) {
                resets += 1;
                row.copy_from_slice(&uniform_row(row.len(), cfg.init_range, rng));
            }
        }
    }
    if resets > 0 {
        log::warn!("{resets} sampler chain resets after non-finite values");
    }
    Ok(SgldOutput { samples: h, resets })
}

/// FIFO store of past samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    reuse_prob: f64,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reuse_prob: f64, dim: usize) -> Self {
        Self {
            capacity,
            reuse_prob,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reuse_prob(&self) -> f64 {
        self.reuse_prob
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends every row of `samples`, evicting the oldest beyond capacity.
    pub fn push(&mut self, samples: &Matrix) -> Result<()> {
        if samples.cols() != self.dim {
            return Err(Error::Dimension {
                op: "buffer_push",
                left: (self.capacity, self.dim),
                right: samples.shape(),
            });
        }
        for r in 0..samples.rows() {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(samples.row(r).to_vec());
        }
        Ok(())
    }

    /// `m` inits, each a random stored entry with the reuse probability when
    /// the buffer is non-empty, otherwise uniform in the init box. Returns the
    /// inits and how many came from the buffer.
    pub fn draw(&self, m: usize, init_range: f64, rng: &mut RngStream) -> (Matrix, usize) {
        let mut data = Vec::with_capacity(m * self.dim);
        let mut reused = 0;
        for _ in 0..m {
            if !self.entries.is_empty() && rng.bernoulli(self.reuse_prob) {
                data.extend_from_slice(&self.entries[rng.below(self.entries.len())]);
                reused += 1;
            } else {
                data.extend(uniform_row(self.dim, init_range, rng));
            }
        }
        (Matrix::from_vec(m, self.dim, data).expect("finite inits"), reused)
    }
}

/// Draws `m` sampler inits from `buf`.
pub fn buffer_draw(buf: &ReplayBuffer, m: usize, init_range: f64, rng: &mut RngStream) -> Matrix {
    buf.draw(m, init_range, rng).0
}
