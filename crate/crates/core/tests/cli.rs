//! Runs the `degem` binary end to end on tiny inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use degem::diff::Matrix;
use degem::graph::{load_dataset, save_dataset, GraphDataset, Splits};
use degem::oodbench::load_bundle;
use tempfile::TempDir;

fn degem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degem")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = degem(args);
    assert!(
        out.status.success(),
        "degem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two labeled nodes joined by one edge.
fn two_nodes(root: &Path) -> PathBuf {
    let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let g = GraphDataset::new(x, vec![(0, 1)], vec![Some(0), Some(1)], 2, Splits::default()).unwrap();
    let dir = root.join("pair");
    save_dataset(&g, &dir).unwrap();
    dir
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_feature_on_two_nodes() {
    let tmp = TempDir::new().unwrap();
    let data = two_nodes(tmp.path());
    let out = tmp.path().join("b");
    ok(&["gen", "feature", "--input", s(&data), "--seed", "3", "--out", s(&out)]);
    let b = load_bundle(&out).unwrap();
    assert_eq!(b.ood_nodes.len(), 2);
    assert_eq!(b.graph.num_nodes(), 4);
}

#[test]
fn gen_is_byte_identical_under_a_seed() {
    let tmp = TempDir::new().unwrap();
    let data = two_nodes(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen", "structure", "--input", s(&data), "--seed", "9", "--out", s(out)]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn synthetic_homophily_is_measured() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("syn");
    ok(&["gen", "synth-homophily", "--homophily", "0.5", "--nodes", "2000", "--seed", "1", "--out", s(&out)]);
    let h = load_dataset(&out).unwrap().edge_homophily();
    assert!((0.45..=0.55).contains(&h), "{h}");
}

#[test]
fn train_and_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = two_nodes(tmp.path());
    let bundle = tmp.path().join("bundle");
    ok(&["gen", "feature", "--input", s(&data), "--seed", "0", "--out", s(&bundle)]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&bundle), "--epochs", "1", "--set", "dim=8", "--set", "hops=1", "--out", s(&run)]);

    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch\tL_ebm\tL_cl\tL_cls\tseconds");
    assert_eq!(rows.len(), 2);
    for v in rows[1].split('\t').skip(1) {
        assert!(v.parse::<f64>().unwrap().is_finite(), "{}", rows[1]);
    }
    assert!(log.contains("seed"));

    let ckpt = run.join("checkpoint.bin");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--bundle", s(&bundle), "--out", s(&e1)]);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("AUROC"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--bundle", s(&bundle), "--out", s(&e2)]);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("report.json")).unwrap()).unwrap();
    assert!(report["auroc"].is_f64());
    assert!(report["meta"]["config"].is_object());
    let b = load_bundle(&bundle).unwrap();
    let (id, ood) = b.eval_nodes();
    let scores = fs::read_to_string(e1.join("scores.tsv")).unwrap();
    let body = scores.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(body, id.len() + ood.len());
    assert_eq!(fs::read(e1.join("report.json")).unwrap(), fs::read(e2.join("report.json")).unwrap());
    assert_eq!(fs::read(e1.join("scores.tsv")).unwrap(), fs::read(e2.join("scores.tsv")).unwrap());
}

#[test]
fn search_with_budget_one() {
    let tmp = TempDir::new().unwrap();
    let data = two_nodes(tmp.path());
    let bundle = tmp.path().join("bundle");
    ok(&["gen", "feature", "--input", s(&data), "--out", s(&bundle)]);
    let out = tmp.path().join("search");
    ok(&[
        "search", "--bundle", s(&bundle), "--budget", "1", "--epochs", "1", "--set", "dim=4", "--set", "hops=1",
        "--out", s(&out),
    ]);
    let trials = fs::read_to_string(out.join("trials.tsv")).unwrap();
    assert_eq!(trials.lines().filter(|l| !l.starts_with('#')).count(), 2);
    let best: serde_json::Value = serde_json::from_slice(&fs::read(out.join("best_config.json")).unwrap()).unwrap();
    assert!([1.0, 5.0, 10.0].contains(&best["lambda"].as_f64().unwrap()));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let data = two_nodes(tmp.path());
    let out = tmp.path().join("o");
    assert_eq!(degem(&["gen", "nonsense", "--out", s(&out)]).status.code(), Some(2));
    let bad = degem(&["train", "--data", s(&data), "--set", "no_such_key=1", "--set", "lr=-1", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("no_such_key") && msg.contains("lr"), "{msg}");
    let missing = tmp.path().join("missing");
    assert_eq!(degem(&["train", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(3));
    let blowup = degem(&[
        "train", "--data", s(&data), "--epochs", "3", "--set", "dim=4", "--set", "hops=1", "--set", "lambda=1e200",
        "--set", "init_range=1e200", "--out", s(&out),
    ]);
    assert_eq!(blowup.status.code(), Some(4), "{}", String::from_utf8_lossy(&blowup.stderr));
}
