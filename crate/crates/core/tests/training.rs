//! Statistical smoke properties of short training runs.

use degem::contrastive::discriminate;
use degem::diff::{Matrix, RngStream};
use degem::graph::{GraphDataset, Splits};
use degem::oodbench::{gen_synthetic_homophily, gen_toy_bundle, HomophilySpec, TOY_RADIUS, TOY_STD};
use degem::trainer::{argmax_rows, score_graph, train, Backbone, TrainConfig, Trainer};

fn toy_train_graph(seed: u64) -> GraphDataset {
    let b = gen_toy_bundle(2000, 0, 0, TOY_RADIUS, TOY_STD, seed).unwrap();
    b.graph
}

#[test]
fn far_field_scores_above_mode_centers() {
    let g = toy_train_graph(0);
    let cfg = TrainConfig {
        backbone: Backbone::Identity,
        gcl: false,
        ce: false,
        ero: false,
        epochs: 600,
        lr: 0.003,
        energy_hidden: 64,
        lambda: 0.05,
        noise_var: 0.005,
        chains: 200,
        init_range: 5.0,
        ..TrainConfig::default()
    };
    let (st, _) = train(&g, &cfg).unwrap();
    let mut pts = Vec::new();
    for k in 0..8 {
        let a = k as f64 * std::f64::consts::FRAC_PI_4;
        pts.extend([TOY_RADIUS * a.cos(), TOY_RADIUS * a.sin()]);
    }
    for k in 0..8 {
        let a = (k as f64 + 0.5) * std::f64::consts::FRAC_PI_4;
        pts.extend([1.8 * TOY_RADIUS * a.cos(), 1.8 * TOY_RADIUS * a.sin()]);
    }
    let probe = GraphDataset::new(Matrix::from_vec(16, 2, pts).unwrap(), vec![], vec![None; 16], 8, Splits::default()).unwrap();
    let e = score_graph(&probe, &st).unwrap().scores;
    let centers = e[..8].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let far = e[8..].iter().copied().fold(f64::INFINITY, f64::min);
    assert!(far > centers, "far-field min {far} vs mode-center max {centers}");
}

fn small_graph(seed: u64) -> GraphDataset {
    let spec = HomophilySpec {
        nodes: 150,
        classes: 3,
        homophily: 0.8,
        avg_degree: 4.0,
        feature_std: 0.5,
    };
    gen_synthetic_homophily(&spec, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn discriminator_prefers_true_nodes() {
    let mut wins = 0;
    for seed in 0..5 {
        let g = small_graph(seed);
        let cfg = TrainConfig {
            dim: 32,
            hops: 2,
            epochs: 100,
            lr: 0.005,
            lambda: 0.05,
            chains: 64,
            seed,
            ..TrainConfig::default()
        };
        let (st, _) = train(&g, &cfg).unwrap();
        let s = st.s_final.clone().unwrap();
        let h = st.encoder.encode(&st.encoder.input(&g)).unwrap();
        let perm = RngStream::new(seed).permutation(g.num_nodes());
        let shuffled = g.features().select_rows(&perm);
        let gs = GraphDataset::new(shuffled, g.edges().to_vec(), g.labels().to_vec(), g.num_classes(), Splits::default()).unwrap();
        let hn = st.encoder.encode(&st.encoder.input(&gs)).unwrap();
        let mean = |m: &Matrix| (0..m.rows()).map(|i| discriminate(m.row(i), &s, &st.disc).unwrap()).sum::<f64>() / m.rows() as f64;
        if mean(&h) > mean(&hn) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5 seeds");
}

/// Two well separated blobs, every node in the train split.
fn blobs(seed: u64) -> GraphDataset {
    let mut rng = RngStream::new(seed);
    let n = 200;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = labels
        .iter()
        .flat_map(|&y| {
            let c = if y == 0 { -2.0 } else { 2.0 };
            [c + 0.5 * rng.normal(), 0.5 * rng.normal()]
        })
        .collect();
    let x = Matrix::from_vec(n, 2, data).unwrap();
    let splits = Splits {
        train: (0..n).collect(),
        ..Splits::default()
    };
    GraphDataset::new(x, vec![], labels.into_iter().map(Some).collect(), 2, splits).unwrap()
}

#[test]
fn separable_train_accuracy_settles() {
    let mut good = 0;
    for seed in 0..5 {
        let g = blobs(seed);
        let cfg = TrainConfig {
            dim: 8,
            hops: 1,
            epochs: 150,
            lr: 0.01,
            xi: 1.0,
            lambda: 0.05,
            chains: 64,
            seed,
            ..TrainConfig::default()
        };
        let t = Trainer::new(&g, &cfg).unwrap();
        let mut st = t.init_state();
        let mut acc = Vec::new();
        let truth: Vec<usize> = g.labels().iter().map(|y| y.unwrap()).collect();
        let nodes: Vec<usize> = (0..g.num_nodes()).collect();
        t.run(&mut st, |st, _| {
            let logits = score_graph(&g, st)?.logits;
            let pred = argmax_rows(&logits, &nodes);
            acc.push(pred.iter().zip(&truth).filter(|(p, y)| p == y).count());
            Ok(())
        })
        .unwrap();
        if acc[acc.len() - 50..].windows(2).all(|w| w[1] >= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 3, "{good}/5 seeds non-decreasing");
}
