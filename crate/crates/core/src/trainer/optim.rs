//! Gradient steps with additive weight decay.

use super::config::OptimizerKind;
use crate::diff::Matrix;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments, one per parameter, adam only.
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        let zeros = || -> Vec<Matrix> {
            if kind == OptimizerKind::Adam {
                shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect()
            } else {
                Vec::new()
            }
        };
        Self {
            kind,
            lr,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One update of every parameter in the group. With `g' = g + wd·p`:
/// sgd does `p -= lr g'`; adam runs the bias-corrected moment update on `g'`.
pub fn optimizer_step(state: &mut OptimState, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if state.kind == OptimizerKind::Adam && state.m.len() != params.len() {
        return Err(Error::contract("optimizer moments do not match the parameter group"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let (lr, wd) = (state.lr, state.weight_decay);
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.into_iter().zip(grads) {
                for (x, gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x -= lr * (gi + wd * *x);
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                let m = state.m[k].as_mut_slice();
                let v = state.v[k].as_mut_slice();
                for (i, (x, gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    let gd = gi + wd * *x;
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gd;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gd * gd;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
            let before = p.clone();
            let mut st = OptimState::new(kind, 0.1, 0.0, &[(1, 2)]);
            optimizer_step(&mut st, vec![&mut p], &[Matrix::zeros(1, 2)]).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_unit_rate_on_own_gradient_zeroes() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0, 3.0]]).unwrap();
        let g = p.clone();
        let mut st = OptimState::new(OptimizerKind::Sgd, 1.0, 0.0, &[(1, 3)]);
        optimizer_step(&mut st, vec![&mut p], &[g]).unwrap();
        assert_eq!(p, Matrix::zeros(1, 3));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::filled(1, 1, 0.0);
        let mut st = OptimState::new(OptimizerKind::Adam, 0.01, 0.0, &[(1, 1)]);
        optimizer_step(&mut st, vec![&mut p], &[Matrix::filled(1, 1, 1.0)]).unwrap();
        assert!((p.get(0, 0) + 0.01).abs() < 1e-9);
    }
}
