//! Training configuration with flat keys, defaults and validation.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ebm::CeMode;
use crate::encoder::DropoutSite;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Feature extractor in front of the heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Multihop,
    /// Two renormalized propagation layers with a rectifier between them.
    Gcn,
    /// Latent equals the input features.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub dropout_site: DropoutSite,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
    /// SGLD step size λ.
    pub lambda: f64,
    /// SGLD noise variance σ².
    pub noise_var: f64,
    /// Classification loss weight ξ.
    pub xi: f64,
    /// Energy magnitude regularizer c.
    pub c: f64,
    /// Propagation depth L.
    pub hops: usize,
    /// Latent dimension d.
    pub dim: usize,
    /// SGLD steps K.
    pub steps: usize,
    /// SGLD chains M; 0 means one per training node.
    pub chains: usize,
    pub buffer_capacity: usize,
    pub reuse_prob: f64,
    pub init_range: f64,
    /// Energy head hidden width; 0 means `dim`.
    pub energy_hidden: usize,
    pub ce_mode: CeMode,
    pub fuse_activation: bool,
    pub optimizer: OptimizerKind,
    pub backbone: Backbone,
    /// Fraction of train-split labels used by the classification loss.
    pub label_rate: f64,
    pub seed: u64,

    /// Train the energy head by maximum likelihood and score with it.
    pub mle: bool,
    /// Contrastive loss on the encoder.
    pub gcl: bool,
    /// Condition the energy on the summary (otherwise unconditional).
    pub ce: bool,
    /// Energy-weighted readout (otherwise the mean readout).
    pub ero: bool,
    /// Multi-hop propagation (otherwise L = 0).
    pub mh: bool,
    /// Score with the classifier's energy instead of the energy head.
    pub classify_energy: bool,
    /// Smooth scores over the graph before reporting.
    pub eprop: bool,
    pub eprop_alpha: f64,
    pub eprop_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.001,
            weight_decay: 0.0005,
            dropout: 0.0,
            dropout_site: DropoutSite::Hops,
            beta: 0.5,
            rho: 0.5,
            gamma: 0.5,
            lambda: 1.0,
            noise_var: 0.01,
            xi: 0.1,
            c: 1.0,
            hops: 5,
            dim: 512,
            steps: 20,
            chains: 0,
            buffer_capacity: 10_000,
            reuse_prob: 0.95,
            init_range: 1.0,
            energy_hidden: 0,
            ce_mode: CeMode::Concat,
            fuse_activation: false,
            optimizer: OptimizerKind::Adam,
            backbone: Backbone::Multihop,
            label_rate: 1.0,
            seed: 0,
            mle: true,
            gcl: true,
            ce: true,
            ero: true,
            mh: true,
            classify_energy: false,
            eprop: false,
            eprop_alpha: 0.5,
            eprop_rounds: 2,
        }
    }
}

/// Ablation tokens accepted on the command line.
pub const ABLATIONS: &[&str] = &["no-ce", "no-ero", "no-mh", "no-gcl", "no-mle", "eprop", "classify-energy", "gcn"];

impl TrainConfig {
    /// Every key accepted in a config file.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Builds a config from a JSON object on top of the defaults. Every
    /// unknown key and every ill-typed or out-of-range value is reported.
    pub fn from_json(v: &Value) -> Result<Self> {
        let Value::Object(given) = v else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let Value::Object(mut base) = serde_json::to_value(TrainConfig::default()).expect("serializes") else {
            unreachable!()
        };
        let mut problems = Vec::new();
        for (k, val) in given {
            if !base.contains_key(k) {
                problems.push(format!("{k}: unknown key"));
                continue;
            }
            let mut probe: Map<String, Value> = Map::new();
            probe.insert(k.clone(), val.clone());
            if let Err(e) = serde_json::from_value::<TrainConfig>(Value::Object(probe)) {
                problems.push(format!("{k}: {e}"));
                continue;
            }
            base.insert(k.clone(), val.clone());
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        match cfg.validate() {
            Err(Error::Config(more)) => problems.extend(more),
            Err(e) => return Err(e),
            Ok(()) => {}
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies one ablation token.
    pub fn ablate(&mut self, token: &str) -> Result<()> {
        match token {
            "no-ce" => self.ce = false,
            "no-ero" => self.ero = false,
            "no-mh" => self.mh = false,
            "no-gcl" => self.gcl = false,
            "no-mle" => self.mle = false,
            "eprop" => self.eprop = true,
            "classify-energy" => {
                self.classify_energy = true;
                self.mle = false;
            }
            "gcn" => self.backbone = Backbone::Gcn,
            other => {
                return Err(Error::Config(vec![format!(
                    "--ablate {other}: unknown token (expected one of {})",
                    ABLATIONS.join(", ")
                )]))
            }
        }
        Ok(())
    }

    /// Range checks, all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
            ("rho", self.rho),
            ("noise_var", self.noise_var),
            ("xi", self.xi),
            ("c", self.c),
            ("init_range", self.init_range),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                p.push(format!("{k}: must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            p.push(format!("gamma: must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout: must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lambda > 0.0) {
            p.push(format!("lambda: must be > 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.reuse_prob) {
            p.push(format!("reuse_prob: must lie in [0, 1], got {}", self.reuse_prob));
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            p.push(format!("label_rate: must lie in (0, 1], got {}", self.label_rate));
        }
        if !(0.0..=1.0).contains(&self.eprop_alpha) {
            p.push(format!("eprop_alpha: must lie in [0, 1], got {}", self.eprop_alpha));
        }
        if self.dim == 0 {
            p.push("dim: must be >= 1".into());
        }
        if !self.mle && !self.classify_energy {
            p.push("mle: scoring needs the energy head (mle) or classify_energy".into());
        }
        if self.mle && self.classify_energy {
            p.push("classify_energy: cannot be combined with mle scoring".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// γ actually used by the readout.
    pub fn effective_gamma(&self) -> f64 {
        if self.ero && self.mle {
            self.gamma
        } else {
            0.0
        }
    }

    pub fn effective_ce_mode(&self) -> CeMode {
        if self.ce {
            self.ce_mode
        } else {
            CeMode::Unconditional
        }
    }

    pub fn effective_hops(&self) -> usize {
        if self.mh {
            self.hops
        } else {
            0
        }
    }

    pub fn effective_hidden(&self) -> usize {
        if self.energy_hidden == 0 {
            self.dim
        } else {
            self.energy_hidden
        }
    }

    pub fn effective_chains(&self, n: usize) -> usize {
        if self.chains == 0 {
            n
        } else {
            self.chains
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.hops, c.dim, c.steps), (200, 5, 512, 20));
        assert_eq!(c.c, 1.0);
        assert_eq!(c.reuse_prob, 0.95);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let v = serde_json::json!({"epochs": 3, "bogus": 1, "gamma": 2.0, "lr": "fast", "other": true});
        match TrainConfig::from_json(&v) {
            Err(Error::Config(p)) => {
                let all = p.join("\n");
                for k in ["bogus", "lr", "other"] {
                    assert!(all.contains(k), "{all}");
                }
            }
            other => panic!("{other:?}"),
        }
        match TrainConfig::from_json(&serde_json::json!({"gamma": 2.0, "dropout": 1.0})) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = TrainConfig::from_json(&serde_json::json!({"epochs": 7, "ce_mode": "bilinear"})).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.ce_mode, CeMode::Bilinear);
        assert_eq!(c.dim, 512);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn ablation_tokens() {
        let mut c = TrainConfig::default();
        c.ablate("no-ce").unwrap();
        c.ablate("no-ero").unwrap();
        assert_eq!(c.effective_ce_mode(), CeMode::Unconditional);
        assert_eq!(c.effective_gamma(), 0.0);
        c.ablate("no-mh").unwrap();
        assert_eq!(c.effective_hops(), 0);
        assert!(c.ablate("sideways").is_err());
    }
}
