//! Recurrent training of the encoder, discriminator, energy head and
//! classifier, inference-time scoring, and checkpoints.
//!
//! Each epoch first fits the energy head against Langevin negatives given the
//! summary carried from the previous epoch, then trains the encoder side with
//! the contrastive and classification losses under a readout weighted by the
//! freshly updated energies.

mod checkpoint;
pub mod config;
mod model;
pub mod optim;

use std::collections::HashSet;
use std::time::Instant;

use crate::baselines::{classify_energy, energy_propagation, EpropConfig};
use crate::contrastive::{dgi_loss_tape, readout_tape, readout_weights, weighted_readout, DiscriminatorParams};
use crate::diff::{softmax, Gradients, Matrix, RngStream, Tape, Var};
use crate::ebm::{ebm_loss_tape, energy_tape, sgld_sample, EnergyHeadParams, ReplayBuffer, SgldConfig};
use crate::encoder::GraphInput;
use crate::error::{Error, Result};
use crate::graph::{make_splits, GraphDataset};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Backbone, OptimizerKind, TrainConfig, ABLATIONS};
pub use model::{classify, classify_tape, cross_entropy, BackboneVars, ClassifierParams, FeatureEncoder, GcnParams};
pub use optim::{optimizer_step, OptimState};

/// Train/valid/test fractions of the ID nodes when a dataset has no splits.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.1, 0.1, 0.8);

const STREAM_INIT: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_SPLITS: u64 = 4;

/// Everything a run carries between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: FeatureEncoder,
    pub disc: DiscriminatorParams,
    pub energy: EnergyHeadParams,
    pub classifier: ClassifierParams,
    pub opt_encoder: OptimState,
    pub opt_disc: OptimState,
    pub opt_energy: OptimState,
    pub opt_classifier: OptimState,
    pub buffer: ReplayBuffer,
    /// Energy softmax over training nodes from the last epoch.
    pub p_bar: Vec<f64>,
    /// Summary that conditioned the last sampler run.
    pub s_bar: Option<Vec<f64>>,
    /// Live readout of the last epoch, used at inference.
    pub s_final: Option<Vec<f64>>,
    pub epoch: usize,
    pub rng: RngStream,
}

/// Losses and stop-gradient audit of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_ebm: f64,
    pub l_cl: f64,
    pub l_cls: f64,
    /// Readout that entered the contrastive loss.
    pub readout: Vec<f64>,
    /// Largest gradient entry reaching anything but the energy head from the
    /// energy loss.
    pub leak_into_encoder: f64,
    /// Largest gradient entry reaching the energy head from the encoder-side
    /// losses.
    pub leak_into_energy: f64,
    pub resets: usize,
    pub seconds: f64,
}

fn shapes(ms: &[&Matrix]) -> Vec<(usize, usize)> {
    ms.iter().map(|m| m.shape()).collect()
}

fn max_abs_grad(grads: &Gradients, vars: &[Var]) -> f64 {
    vars.iter().map(|&v| grads.get(v).max_abs()).fold(0.0, f64::max)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{name} became {v}")))
    }
}

/// Adds the default split when `g` has no train nodes.
pub fn prepare_splits(g: &GraphDataset, seed: u64) -> Result<GraphDataset> {
    if !g.splits.train.is_empty() {
        return Ok(g.clone());
    }
    let mut rng = RngStream::new(seed).derive(STREAM_SPLITS);
    let splits = make_splits(g, SPLIT_FRACTIONS, &mut rng)?;
    g.clone().with_splits(splits)
}

/// Fixed context of a run: the training graph and the supervised nodes.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    graph: GraphDataset,
    input: GraphInput,
    train_nodes: Vec<usize>,
    labels: Vec<usize>,
}

impl Trainer {
    /// Training happens on the subgraph induced by the nodes outside the OOD
    /// split. Supervision uses a `label_rate` share of the train split.
    pub fn new(g: &GraphDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = prepare_splits(g, cfg.seed)?;
        let graph = if g.splits.ood.is_empty() {
            g
        } else {
            let ood: HashSet<usize> = g.splits.ood.iter().copied().collect();
            let keep: Vec<usize> = (0..g.num_nodes()).filter(|i| !ood.contains(i)).collect();
            g.induced_subgraph(&keep)?.0
        };
        if graph.num_nodes() == 0 {
            return Err(Error::contract("no in-distribution nodes to train on"));
        }
        let mut train = graph.splits.train.clone();
        let keep = ((cfg.label_rate * train.len() as f64).ceil() as usize).clamp(1, train.len().max(1));
        if keep < train.len() {
            let mut rng = RngStream::new(cfg.seed).derive(STREAM_LABELS);
            rng.shuffle(&mut train);
            train.truncate(keep);
            train.sort_unstable();
        }
        let labels = graph.labels().iter().map(|y| y.unwrap_or(0)).collect();
        let input = GraphInput::new(graph.feature_csr(), model::operator(cfg.backbone, cfg.beta, &graph));
        Ok(Self {
            config: cfg.clone(),
            graph,
            input,
            train_nodes: train,
            labels,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn graph(&self) -> &GraphDataset {
        &self.graph
    }

    /// Supervised nodes, indices into [`Trainer::graph`].
    pub fn train_nodes(&self) -> &[usize] {
        &self.train_nodes
    }

    pub fn init_state(&self) -> TrainState {
        let cfg = &self.config;
        let n = self.graph.num_nodes();
        let base = RngStream::new(cfg.seed);
        let mut rng = base.derive(STREAM_INIT);
        let encoder = FeatureEncoder::init(cfg, self.graph.num_features(), &mut rng);
        let d = encoder.dim();
        let disc = DiscriminatorParams::init(d, &mut rng);
        let energy = EnergyHeadParams::init(d, cfg.effective_hidden(), cfg.effective_ce_mode(), cfg.rho, &mut rng);
        let classifier = ClassifierParams::init(d, self.graph.num_classes().max(1), &mut rng);
        let opt = |ms: Vec<&Matrix>| OptimState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &shapes(&ms));
        TrainState {
            opt_encoder: opt(encoder.matrices()),
            opt_disc: opt(vec![&disc.w]),
            opt_energy: opt(energy.matrices()),
            opt_classifier: opt(classifier.matrices()),
            config: cfg.clone(),
            encoder,
            disc,
            energy,
            classifier,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.reuse_prob, d),
            p_bar: vec![1.0 / n as f64; n],
            s_bar: None,
            s_final: None,
            epoch: 0,
            rng: base.derive(STREAM_TRAIN),
        }
    }

    /// One recurrent update.
    pub fn epoch(&self, st: &mut TrainState) -> Result<EpochReport> {
        let start = Instant::now();
        let cfg = &self.config;
        let n = self.graph.num_nodes();
        let gamma = cfg.effective_gamma();

        let mut tape = Tape::new();
        let mut enc = st.encoder.register(&mut tape);
        let wd = tape.param(st.disc.w.clone());
        let ev = st.energy.register(&mut tape, true);
        let [wc, bc] = st.classifier.register(&mut tape);

        // (a) clean and row-shuffled encodings
        let h = st.encoder.encode_tape(&mut tape, &mut enc, &self.input, true, &mut st.rng)?;
        let h_neg = if cfg.gcl {
            let perm = st.rng.permutation(n);
            let shuffled = GraphInput::with_prop(self.input.features.permute_rows(&perm), self.input.prop.clone());
            Some(st.encoder.encode_tape(&mut tape, &mut enc, &shuffled, true, &mut st.rng)?)
        } else {
            None
        };
        let h_sg = tape.stop_grad(h);

        let mut l_ebm = 0.0;
        let mut leak_into_encoder = 0.0;
        let mut samples = None;
        let mut resets = 0;
        if cfg.mle {
            // (b) negatives conditioned on the carried summary
            let s_bar = weighted_readout(tape.value(h), &readout_weights(&st.p_bar, gamma));
            let sampler = SgldConfig {
                steps: cfg.steps,
                step_size: cfg.lambda,
                noise_var: cfg.noise_var,
                chains: cfg.effective_chains(n),
                init_range: cfg.init_range,
            };
            sampler.validate()?;
            let inits = st.buffer.draw(sampler.chains, cfg.init_range, &mut st.rng).0;
            let head = &st.energy;
            let out = sgld_sample(
                |x| {
                    let (e, g) = head.energies_and_grads(x, &s_bar, true)?;
                    Ok((e, g.expect("gradient requested")))
                },
                &inits,
                &sampler,
                &mut st.rng,
            )?;
            resets = out.resets;

            // (c) energy head only
            let s = tape.constant(Matrix::row_vector(&s_bar));
            let e_pos = energy_tape(&mut tape, &ev, &st.energy, h_sg, s)?;
            let neg = tape.constant(out.samples.clone());
            let e_neg = energy_tape(&mut tape, &ev, &st.energy, neg, s)?;
            let loss = ebm_loss_tape(&mut tape, e_pos, e_neg, cfg.c)?;
            l_ebm = finite("L_ebm", tape.scalar(loss))?;
            let mut grads = tape.backward(loss)?;
            let mut others = enc.all();
            others.extend([wd, wc, bc]);
            leak_into_encoder = max_abs_grad(&grads, &others);
            let g: Vec<Matrix> = ev.all().into_iter().map(|v| grads.take(v)).collect();
            optimizer_step(&mut st.opt_energy, st.energy.matrices_mut(), &g)?;
            samples = Some(out.samples);
            st.s_bar = Some(s_bar);
        }

        // (d) encoder side, readout weighted by the updated head
        let mut omega = Vec::new();
        if cfg.mle {
            let ev2 = st.energy.register(&mut tape, true);
            let s = tape.constant(Matrix::row_vector(st.s_bar.as_deref().expect("set above")));
            let e = energy_tape(&mut tape, &ev2, &st.energy, h_sg, s)?;
            let e = tape.stop_grad(e);
            let neg: Vec<f64> = tape.value(e).as_slice().iter().map(|x| -x).collect();
            if neg.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("node energies became non-finite".into()));
            }
            st.p_bar = softmax(&neg);
            omega = ev2.all();
        }
        let weights = readout_weights(&st.p_bar, gamma);
        let s_p = readout_tape(&mut tape, h, &weights)?;
        let logits = classify_tape(&mut tape, h, wc, bc)?;
        let train_labels: Vec<usize> = self.train_nodes.iter().map(|&i| self.labels[i]).collect();
        let cls = tape.cross_entropy(logits, &self.train_nodes, &train_labels)?;
        let l_cls = finite("L_cls", tape.scalar(cls))?;
        let weighted_cls = tape.scale(cls, cfg.xi);
        let (total, l_cl) = match h_neg {
            Some(hn) => {
                let cl = dgi_loss_tape(&mut tape, h, hn, s_p, wd)?;
                let l_cl = finite("L_cl", tape.scalar(cl))?;
                (tape.add(cl, weighted_cls)?, l_cl)
            }
            None => (weighted_cls, 0.0),
        };
        let mut grads = tape.backward(total)?;
        let leak_into_energy = max_abs_grad(&grads, &omega);
        if leak_into_energy != 0.0 {
            return Err(Error::Numerical(format!(
                "energy head received gradient {leak_into_energy} from the encoder-side losses"
            )));
        }
        let g: Vec<Matrix> = enc.all().into_iter().map(|v| grads.take(v)).collect();
        optimizer_step(&mut st.opt_encoder, st.encoder.matrices_mut(), &g)?;
        if cfg.gcl {
            optimizer_step(&mut st.opt_disc, vec![&mut st.disc.w], &[grads.take(wd)])?;
        }
        if cfg.xi > 0.0 {
            let g = [grads.take(wc), grads.take(bc)];
            optimizer_step(&mut st.opt_classifier, st.classifier.matrices_mut(), &g)?;
        }

        // (e) and (f)
        if let Some(s) = &samples {
            st.buffer.push(s)?;
        }
        let readout = tape.value(s_p).as_slice().to_vec();
        st.s_final = Some(readout.clone());
        st.epoch += 1;
        Ok(EpochReport {
            epoch: st.epoch,
            l_ebm,
            l_cl,
            l_cls,
            readout,
            leak_into_encoder,
            leak_into_energy,
            resets,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until the configured count, calling `on_epoch` after each.
    pub fn run(&self, st: &mut TrainState, mut on_epoch: impl FnMut(&TrainState, &EpochReport) -> Result<()>) -> Result<()> {
        if st.config != self.config {
            return Err(Error::contract("state was created under a different configuration"));
        }
        while st.epoch < self.config.epochs {
            let r = self.epoch(st)?;
            on_epoch(st, &r)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final state with every epoch report.
pub fn train(g: &GraphDataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochReport>)> {
    let t = Trainer::new(g, cfg)?;
    let mut st = t.init_state();
    let mut log = Vec::with_capacity(cfg.epochs);
    t.run(&mut st, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((st, log))
}

/// Scores and logits for every node of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphScores {
    pub scores: Vec<f64>,
    pub logits: Matrix,
}

/// Encodes all of `g` without dropout and scores every node.
pub fn score_graph(g: &GraphDataset, st: &TrainState) -> Result<GraphScores> {
    if g.num_features() != st.encoder.input_dim() {
        return Err(Error::contract(format!(
            "graph has {} features but the model expects {}",
            g.num_features(),
            st.encoder.input_dim()
        )));
    }
    if g.num_classes().max(1) != st.classifier.num_classes() {
        return Err(Error::contract(format!(
            "graph has {} classes but the model expects {}",
            g.num_classes(),
            st.classifier.num_classes()
        )));
    }
    let cfg = &st.config;
    let h = st.encoder.encode(&st.encoder.input(g))?;
    let logits = classify(&h, &st.classifier)?;
    let mut scores = if cfg.classify_energy {
        classify_energy(&logits)
    } else {
        let s = st
            .s_final
            .as_ref()
            .ok_or_else(|| Error::contract("no stored summary; the model has not been trained"))?;
        st.energy.energies(&h, s)?
    };
    if cfg.eprop {
        let ep = EpropConfig {
            alpha: cfg.eprop_alpha,
            rounds: cfg.eprop_rounds,
        };
        scores = energy_propagation(&scores, g, &ep)?;
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite OOD score".into()));
    }
    Ok(GraphScores { scores, logits })
}

/// OOD scores of `nodes`; higher means more likely out of distribution.
pub fn ood_score(g: &GraphDataset, nodes: &[usize], st: &TrainState) -> Result<Vec<f64>> {
    let all = score_graph(g, st)?;
    select(&all.scores, nodes)
}

fn select(v: &[f64], nodes: &[usize]) -> Result<Vec<f64>> {
    nodes
        .iter()
        .map(|&i| v.get(i).copied().ok_or_else(|| Error::contract(format!("node {i} outside the graph"))))
        .collect()
}

/// Row argmax, lowest index on ties.
pub fn argmax_rows(logits: &Matrix, nodes: &[usize]) -> Vec<usize> {
    nodes
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(g: &GraphDataset, nodes: &[usize], st: &TrainState) -> Result<Vec<usize>> {
    let all = score_graph(g, st)?;
    if let Some(&bad) = nodes.iter().find(|&&i| i >= g.num_nodes()) {
        return Err(Error::contract(format!("node {bad} outside the graph")));
    }
    Ok(argmax_rows(&all.logits, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::mean_readout;
    use crate::ebm::CeMode;
    use crate::graph::{fixtures::path2, Splits};

    fn small_graph(seed: u64) -> GraphDataset {
        let mut rng = RngStream::new(seed);
        let n = 12;
        let x = Matrix::from_vec(n, 4, (0..n * 4).map(|_| rng.normal()).collect()).unwrap();
        let edges = (0..n).map(|i| (i, (i + 1) % n)).chain((0..n / 2).map(|i| (i, i + n / 2))).collect();
        let labels = (0..n).map(|i| Some(i % 2)).collect();
        let splits = Splits {
            train: vec![0, 1, 2, 3, 4, 5],
            valid: vec![6, 7],
            test: vec![8, 9, 10, 11],
            ood: vec![],
        };
        GraphDataset::new(x, edges, labels, 2, splits).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            dim: 6,
            hops: 2,
            steps: 3,
            energy_hidden: 5,
            dropout: 0.2,
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_xi_leaves_classifier() {
        let g = small_graph(1);
        let cfg = TrainConfig { xi: 0.0, ..small_config() };
        let t = Trainer::new(&g, &cfg).unwrap();
        let mut st = t.init_state();
        let before = st.classifier.clone();
        t.epoch(&mut st).unwrap();
        assert_eq!(st.classifier, before);
    }

    #[test]
    fn stop_gradient_discipline_holds() {
        let g = small_graph(2);
        let t = Trainer::new(&g, &small_config()).unwrap();
        let mut st = t.init_state();
        for _ in 0..3 {
            let r = t.epoch(&mut st).unwrap();
            assert_eq!(r.leak_into_encoder, 0.0);
            assert_eq!(r.leak_into_energy, 0.0);
            assert!(r.l_ebm.is_finite() && r.l_cl.is_finite() && r.l_cls.is_finite());
        }
        let s: f64 = st.p_bar.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unconditional_zero_gamma_matches_ablated_run() {
        let g = small_graph(3);
        let a = TrainConfig {
            gamma: 0.0,
            ce_mode: CeMode::Unconditional,
            ..small_config()
        };
        let mut b = small_config();
        b.ablate("no-ce").unwrap();
        b.ablate("no-ero").unwrap();
        let la = train(&g, &a).unwrap().1;
        let lb = train(&g, &b).unwrap().1;
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!((x.l_ebm, x.l_cl, x.l_cls), (y.l_ebm, y.l_cl, y.l_cls));
        }
    }

    #[test]
    fn zero_gamma_readout_is_the_mean() {
        let g = small_graph(4);
        let cfg = TrainConfig {
            gamma: 0.0,
            dropout: 0.0,
            ..small_config()
        };
        let t = Trainer::new(&g, &cfg).unwrap();
        let mut st = t.init_state();
        for _ in 0..2 {
            let enc = st.encoder.clone();
            let r = t.epoch(&mut st).unwrap();
            let mean = mean_readout(&enc.encode(&enc.input(t.graph())).unwrap()).unwrap();
            for (a, b) in r.readout.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let g = small_graph(5);
        let (a, _) = train(&g, &small_config()).unwrap();
        let (b, _) = train(&g, &small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scoring_needs_a_summary() {
        let g = small_graph(6);
        let t = Trainer::new(&g, &small_config()).unwrap();
        let st = t.init_state();
        assert!(matches!(ood_score(&g, &[0], &st), Err(Error::Contract(_))));
    }

    #[test]
    fn flat_head_scores_its_bias() {
        let g = small_graph(7);
        let cfg = TrainConfig {
            gamma: 0.0,
            ..small_config()
        };
        let t = Trainer::new(&g, &cfg).unwrap();
        let mut st = t.init_state();
        st.energy.w2 = Matrix::zeros(st.energy.hidden(), 1);
        st.energy.b2 = Matrix::filled(1, 1, 0.75);
        st.s_final = Some(vec![0.0; st.encoder.dim()]);
        let s = ood_score(&g, &[0, 3, 3, 11], &st).unwrap();
        assert!(s.iter().all(|&x| x == 0.75));
    }

    #[test]
    fn repeated_queries_agree() {
        let g = small_graph(8);
        let (st, _) = train(&g, &small_config()).unwrap();
        let s = ood_score(&g, &[4, 4], &st).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn argmax_ties_take_the_lowest_class() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&z, &[0, 1, 2]), vec![0, 1, 0]);
    }

    #[test]
    fn one_epoch_on_two_nodes() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (st, log) = train(&path2(), &cfg).unwrap();
        assert_eq!(st.epoch, 1);
        assert!(log[0].l_ebm.is_finite() && log[0].l_cl.is_finite() && log[0].l_cls.is_finite());
    }

    #[test]
    fn ood_split_is_held_out_of_training() {
        let mut g = small_graph(9);
        g = g
            .with_splits(Splits {
                train: vec![0, 1, 2, 3],
                valid: vec![4],
                test: vec![5, 6, 7],
                ood: vec![8, 9, 10, 11],
            })
            .unwrap();
        let t = Trainer::new(&g, &small_config()).unwrap();
        assert_eq!(t.graph().num_nodes(), 8);
        assert_eq!(t.init_state().p_bar.len(), 8);
    }

    #[test]
    fn label_rate_thins_supervision() {
        let g = small_graph(10);
        let cfg = TrainConfig {
            label_rate: 0.5,
            ..small_config()
        };
        let t = Trainer::new(&g, &cfg).unwrap();
        assert_eq!(t.train_nodes().len(), 3);
    }
}
