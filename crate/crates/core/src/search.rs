//! Random hyperparameter search over fixed grids, and the evaluation of one
//! trained model on an OOD bundle.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diff::RngStream;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, DetectionReport, ScoredLabels};
use crate::oodbench::OodBundle;
use crate::trainer::{argmax_rows, score_graph, train, TrainConfig, TrainState};

pub const LR_GRID: &[f64] = &[0.05, 0.01, 0.001, 0.0005, 0.0001];
pub const WEIGHT_DECAY_GRID: &[f64] = &[0.0, 0.01, 0.001, 0.0005, 0.0001];
pub const DROPOUT_GRID: &[f64] = &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
/// Shared by β, ρ and γ.
pub const UNIT_GRID: &[f64] = &[0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const LAMBDA_GRID: &[f64] = &[1.0, 5.0, 10.0];
pub const NOISE_VAR_GRID: &[f64] = &[0.01, 0.005];
pub const XI_GRID: &[f64] = &[0.01, 0.05, 0.1, 0.3, 0.5, 1.0];

/// Keys a trial resamples; everything else comes from the base config.
pub const SEARCHED_KEYS: &[&str] = &["lr", "weight_decay", "dropout", "beta", "rho", "gamma", "lambda", "noise_var", "xi"];

fn pick(grid: &[f64], rng: &mut RngStream) -> f64 {
    grid[rng.below(grid.len())]
}

/// `base` with every searched key drawn uniformly from its grid.
pub fn sample_trial(base: &TrainConfig, rng: &mut RngStream) -> TrainConfig {
    TrainConfig {
        lr: pick(LR_GRID, rng),
        weight_decay: pick(WEIGHT_DECAY_GRID, rng),
        dropout: pick(DROPOUT_GRID, rng),
        beta: pick(UNIT_GRID, rng),
        rho: pick(UNIT_GRID, rng),
        gamma: pick(UNIT_GRID, rng),
        lambda: pick(LAMBDA_GRID, rng),
        noise_var: pick(NOISE_VAR_GRID, rng),
        xi: pick(XI_GRID, rng),
        ..base.clone()
    }
}

/// The `budget` trial configs of a search, in order.
pub fn sample_trials(base: &TrainConfig, budget: usize, seed: u64) -> Vec<TrainConfig> {
    let mut rng = RngStream::new(seed);
    (0..budget).map(|_| sample_trial(base, &mut rng)).collect()
}

/// How trials are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Classification accuracy on the validation split.
    #[default]
    ValidAccuracy,
    /// Detection AUROC of validation ID nodes against the OOD nodes.
    ValidAuroc,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid-accuracy" => Ok(Objective::ValidAccuracy),
            "valid-auroc" => Ok(Objective::ValidAuroc),
            other => Err(Error::Config(vec![format!(
                "objective {other}: expected valid-accuracy or valid-auroc"
            )])),
        }
    }
}

/// A trained model measured on a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub test_accuracy: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub valid_auroc: Option<f64>,
    /// ID test nodes then OOD nodes.
    pub nodes: Vec<usize>,
    pub scores: Vec<f64>,
    pub num_id: usize,
}

impl Evaluation {
    pub fn scored(&self) -> Result<ScoredLabels> {
        let flags = (0..self.nodes.len()).map(|k| k >= self.num_id).collect();
        ScoredLabels::new(self.scores.clone(), flags)
    }

    pub fn report(&self, meta: serde_json::Value) -> Result<DetectionReport> {
        DetectionReport::compute(&self.scored()?, self.test_accuracy, meta)
    }

    pub fn objective(&self, o: Objective) -> f64 {
        match o {
            Objective::ValidAccuracy => self.valid_accuracy,
            Objective::ValidAuroc => self.valid_auroc,
        }
        .unwrap_or(f64::NEG_INFINITY)
    }
}

fn labeled_accuracy(b: &OodBundle, pred_of: &dyn Fn(&[usize]) -> Vec<usize>, nodes: &[usize]) -> Result<Option<f64>> {
    let nodes: Vec<usize> = nodes.iter().copied().filter(|&i| b.graph.label(i).is_some()).collect();
    if nodes.is_empty() {
        return Ok(None);
    }
    let pred = pred_of(&nodes);
    let truth: Vec<usize> = nodes.iter().map(|&i| b.graph.label(i).expect("filtered")).collect();
    let idx: Vec<usize> = (0..nodes.len()).collect();
    Ok(Some(accuracy(&pred, &truth, &idx)?))
}

/// Scores the whole bundle graph once and derives every metric.
pub fn evaluate(b: &OodBundle, st: &TrainState) -> Result<Evaluation> {
    let all = score_graph(&b.graph, st)?;
    let (id, ood) = b.eval_nodes();
    if id.is_empty() || ood.is_empty() {
        return Err(Error::contract("bundle needs ID test nodes and OOD nodes"));
    }
    let nodes: Vec<usize> = id.iter().chain(&ood).copied().collect();
    let scores: Vec<f64> = nodes.iter().map(|&i| all.scores[i]).collect();
    let s = ScoredLabels::from_groups(&scores[..id.len()], &scores[id.len()..])?;
    let pred = |ns: &[usize]| argmax_rows(&all.logits, ns);
    let valid = &b.graph.splits.valid;
    let valid_auroc = if valid.is_empty() {
        None
    } else {
        let v: Vec<f64> = valid.iter().map(|&i| all.scores[i]).collect();
        let o: Vec<f64> = ood.iter().map(|&i| all.scores[i]).collect();
        Some(crate::metrics::auroc(&ScoredLabels::from_groups(&v, &o)?)?)
    };
    Ok(Evaluation {
        auroc: crate::metrics::auroc(&s)?,
        aupr: crate::metrics::aupr(&s)?,
        fpr95: crate::metrics::fpr_at_tpr(&s, crate::metrics::FPR_TARGET_TPR)?,
        test_accuracy: labeled_accuracy(b, &pred, &id)?,
        valid_accuracy: labeled_accuracy(b, &pred, valid)?,
        valid_auroc,
        num_id: id.len(),
        nodes,
        scores,
    })
}

/// One finished trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub config: TrainConfig,
    pub objective: f64,
    pub evaluation: Evaluation,
    pub seconds: f64,
}

/// Trains `cfg` on the bundle and evaluates it.
pub fn run_trial(b: &OodBundle, index: usize, cfg: &TrainConfig, objective: Objective) -> Result<TrialResult> {
    let start = Instant::now();
    let (st, _) = train(&b.graph, cfg)?;
    let evaluation = evaluate(b, &st)?;
    Ok(TrialResult {
        index,
        config: cfg.clone(),
        objective: evaluation.objective(objective),
        evaluation,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Index of the best trial; the earliest wins ties.
pub fn best_trial(trials: &[TrialResult]) -> Option<&TrialResult> {
    trials.iter().fold(None, |best: Option<&TrialResult>, t| match best {
        Some(b) if b.objective >= t.objective => Some(b),
        _ => Some(t),
    })
}

/// Runs every trial in order. A trial that fails numerically is logged and
/// ranked last; other errors abort the search.
pub fn search(b: &OodBundle, trials: &[TrainConfig], objective: Objective) -> Result<Vec<TrialResult>> {
    let mut out = Vec::with_capacity(trials.len());
    for (i, cfg) in trials.iter().enumerate() {
        match run_trial(b, i, cfg, objective) {
            Ok(t) => {
                log::info!("trial {i}: objective {:.4} auroc {:.4}", t.objective, t.evaluation.auroc);
                out.push(t);
            }
            Err(Error::Numerical(m)) => log::warn!("trial {i} diverged: {m}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One row per trial: index, objective, detection metrics, accuracies, the
/// searched keys, wall time.
pub fn write_trials(path: &Path, comments: &[String], trials: &[TrialResult]) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    let mut head = vec!["trial", "objective", "auroc", "aupr", "fpr95", "test_accuracy", "valid_accuracy"];
    head.extend(SEARCHED_KEYS);
    head.push("seconds");
    out.push_str(&head.join("\t"));
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    for t in trials {
        let cfg = t.config.to_json();
        let mut row = vec![
            t.index.to_string(),
            t.objective.to_string(),
            t.evaluation.auroc.to_string(),
            t.evaluation.aupr.to_string(),
            t.evaluation.fpr95.to_string(),
            opt(t.evaluation.test_accuracy),
            opt(t.evaluation.valid_accuracy),
        ];
        row.extend(SEARCHED_KEYS.iter().map(|k| cfg[*k].to_string()));
        row.push(format!("{:.3}", t.seconds));
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
