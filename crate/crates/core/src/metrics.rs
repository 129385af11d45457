//! Detection and classification metrics. OOD is the positive class and a
//! higher score means more likely OOD.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const FPR_TARGET_TPR: f64 = 0.95;

/// Scores with their OOD flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    /// `true` marks an OOD node.
    pub ood: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, ood: Vec<bool>) -> Result<Self> {
        if scores.len() != ood.len() {
            return Err(Error::contract(format!("{} scores but {} flags", scores.len(), ood.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::contract("NaN score"));
        }
        Ok(Self { scores, ood })
    }

    /// ID scores then OOD scores.
    pub fn from_groups(id: &[f64], ood: &[f64]) -> Result<Self> {
        let scores = id.iter().chain(ood).copied().collect();
        let flags = std::iter::repeat_n(false, id.len()).chain(std::iter::repeat_n(true, ood.len())).collect();
        Self::new(scores, flags)
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let pos = self.ood.iter().filter(|&&f| f).count();
        let neg = self.ood.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::contract("detection metrics need both ID and OOD nodes"));
        }
        Ok((pos, neg))
    }

    /// Tie groups in decreasing score order, as (OOD count, ID count).
    fn groups_desc(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in idx {
            let s = self.scores[i];
            if last != Some(s) {
                out.push((0, 0));
                last = Some(s);
            }
            let g = out.last_mut().expect("pushed");
            if self.ood[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        out
    }
}

/// Probability that an OOD score beats an ID score, ties counting half.
pub fn auroc(s: &ScoredLabels) -> Result<f64> {
    let (pos, neg) = s.counts()?;
    let mut wins = 0.0;
    let mut id_below = neg as f64;
    for (p, n) in s.groups_desc() {
        id_below -= n as f64;
        wins += p as f64 * (id_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision; a tie group is one threshold.
pub fn aupr(s: &ScoredLabels) -> Result<f64> {
    let (pos, _) = s.counts()?;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in s.groups_desc() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// FPR at the largest threshold `t` (predict OOD when score ≥ t) whose TPR
/// reaches `target`.
pub fn fpr_at_tpr(s: &ScoredLabels, target: f64) -> Result<f64> {
    let (pos, neg) = s.counts()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in s.groups_desc() {
        tp += p;
        fp += n;
        if tp as f64 / pos as f64 >= target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(1.0)
}

/// Fraction of `mask` where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("accuracy over an empty mask"));
    }
    let hits = mask.iter().filter(|&&i| pred[i] == truth[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    /// ID test accuracy, when labels allow it.
    pub accuracy: Option<f64>,
    pub num_id: usize,
    pub num_ood: usize,
    /// Resolved configuration, seed and inputs.
    pub meta: Value,
}

impl DetectionReport {
    pub fn compute(s: &ScoredLabels, accuracy: Option<f64>, meta: Value) -> Result<Self> {
        let num_ood = s.ood.iter().filter(|&&f| f).count();
        Ok(Self {
            auroc: auroc(s)?,
            aupr: aupr(s)?,
            fpr95: fpr_at_tpr(s, FPR_TARGET_TPR)?,
            accuracy,
            num_id: s.ood.len() - num_ood,
            num_ood,
            meta,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `node_id<TAB>score<TAB>flag` rows, `#` lines first.
pub fn write_scores(path: &Path, comments: &[String], nodes: &[usize], s: &ScoredLabels) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("node_id\tscore\tflag\n");
    for (k, &node) in nodes.iter().enumerate() {
        let flag = if s.ood[k] { "OOD" } else { "ID" };
        out.push_str(&format!("{node}\t{}\t{flag}\n", s.scores[k]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl(scores: &[f64], ood: &[bool]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&sl(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true])).unwrap(), 1.0);
        assert_eq!(auroc(&sl(&[5.0; 6], &[false, true, false, true, true, false])).unwrap(), 0.5);
        assert_eq!(auroc(&sl(&[3.0, 1.0, 2.0, 4.0], &[false, true, false, true])).unwrap(), 0.5);
        assert!(auroc(&sl(&[1.0, 2.0], &[true, true])).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&sl(&[1.0, 2.0, 3.0], &[false, true, true])).unwrap(), 1.0);
        assert_eq!(aupr(&sl(&[2.0, 1.0], &[true, false])).unwrap(), 1.0);
        assert_eq!(aupr(&sl(&[1.0, 2.0], &[true, false])).unwrap(), 0.5);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&sl(&[0.0, 1.0, 5.0, 6.0], &[false, false, true, true]), 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&sl(&[2.0; 4], &[false, false, true, true]), 0.95).unwrap(), 1.0);
        let mut scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut ood = vec![false; 10];
        scores.extend((0..19).map(|i| 100.0 + i as f64));
        ood.extend(vec![true; 19]);
        scores.push(-1.0);
        ood.push(true);
        assert_eq!(fpr_at_tpr(&sl(&scores, &ood), 0.95).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 0], &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0], &[]).is_err());
    }
}
