//! Classifier-energy scoring, neighborhood smoothing of scores, and maximum
//! softmax probability.

use crate::diff::{logsumexp, softmax, Matrix};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::trainer::{train, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpropConfig {
    /// Self-retention.
    pub alpha: f64,
    pub rounds: usize,
}

impl Default for EpropConfig {
    fn default() -> Self {
        Self { alpha: 0.5, rounds: 2 }
    }
}

/// `-logsumexp` of every logit row.
pub fn classify_energy(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows()).map(|r| -logsumexp(logits.row(r))).collect()
}

/// `rounds` passes of `E ← αE + (1-α) D⁻¹ A E`. Isolated nodes keep their value.
pub fn energy_propagation(e: &[f64], g: &GraphDataset, cfg: &EpropConfig) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::contract(format!("propagation alpha {} outside [0, 1]", cfg.alpha)));
    }
    if e.len() != g.num_nodes() {
        return Err(Error::Dimension {
            op: "energy_propagation",
            left: (g.num_nodes(), 1),
            right: (e.len(), 1),
        });
    }
    let nb = g.neighbors();
    let mut cur = e.to_vec();
    for _ in 0..cfg.rounds {
        cur = (0..cur.len())
            .map(|i| {
                if nb[i].is_empty() {
                    return cur[i];
                }
                let m = nb[i].iter().map(|&j| cur[j]).sum::<f64>() / nb[i].len() as f64;
                cfg.alpha * cur[i] + (1.0 - cfg.alpha) * m
            })
            .collect();
    }
    Ok(cur)
}

/// Negated maximum softmax probability per row.
pub fn msp_score(logits: &Matrix) -> Result<Vec<f64>> {
    if logits.cols() < 2 {
        return Err(Error::contract("maximum softmax probability needs two or more classes"));
    }
    Ok((0..logits.rows())
        .map(|r| -softmax(logits.row(r)).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Trains the backbone and classifier on the classification loss alone, at
/// unit weight, and scores with the classifier energy.
pub fn train_classify_energy(g: &GraphDataset, cfg: &TrainConfig) -> Result<TrainState> {
    let mut cfg = cfg.clone();
    cfg.classify_energy = true;
    cfg.mle = false;
    cfg.gcl = false;
    cfg.xi = 1.0;
    Ok(train(g, &cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{path2, triangle};

    #[test]
    fn classify_energy_values() {
        let e = classify_energy(&Matrix::zeros(1, 2));
        assert!((e[0] + 2f64.ln()).abs() < 1e-15);
        assert!((e[0] + 0.693147).abs() < 1e-6);
        let e = classify_energy(&Matrix::filled(1, 1, 2.5));
        assert_eq!(e[0], -2.5);
        let z = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let shifted = z.map(|x| x + 4.0);
        assert!((classify_energy(&shifted)[0] - classify_energy(&z)[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn propagation_examples() {
        let g = path2();
        let one = EpropConfig { alpha: 0.5, rounds: 1 };
        assert_eq!(energy_propagation(&[0.0, 1.0], &g, &one).unwrap(), vec![0.5, 0.5]);
        let keep = EpropConfig { alpha: 1.0, rounds: 3 };
        assert_eq!(energy_propagation(&[0.0, 1.0], &g, &keep).unwrap(), vec![0.0, 1.0]);
        let none = EpropConfig { alpha: 0.2, rounds: 0 };
        assert_eq!(energy_propagation(&[0.0, 1.0], &g, &none).unwrap(), vec![0.0, 1.0]);
        let flat = EpropConfig { alpha: 0.3, rounds: 5 };
        let out = energy_propagation(&[2.0; 3], &triangle(), &flat).unwrap();
        assert!(out.iter().all(|&x| (x - 2.0).abs() < 1e-15));
    }

    #[test]
    fn isolated_nodes_keep_scores() {
        let g = GraphDataset::new(Matrix::identity(3), vec![(0, 1)], vec![None; 3], 1, Default::default()).unwrap();
        let out = energy_propagation(&[0.0, 2.0, 7.0], &g, &EpropConfig::default()).unwrap();
        assert_eq!(out[2], 7.0);
    }

    #[test]
    fn msp_values() {
        let s = msp_score(&Matrix::zeros(1, 4)).unwrap();
        assert!((s[0] + 0.25).abs() < 1e-15);
        let s = msp_score(&Matrix::from_rows(&[[3f64.ln(), 0.0]]).unwrap()).unwrap();
        assert!((s[0] + 0.75).abs() < 1e-15);
        let s = msp_score(&Matrix::from_rows(&[[50.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-12);
        assert!(msp_score(&Matrix::zeros(2, 1)).is_err());
    }
}
