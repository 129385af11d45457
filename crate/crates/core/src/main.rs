//! `degem` command line: dataset generation and import, training,
//! evaluation and random search.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use degem::diff::RngStream;
use degem::graph::{import_linqs, load_dataset, save_dataset, GraphDataset};
use degem::metrics::write_scores;
use degem::oodbench::{
    default_id_classes, gen_feature_ood, gen_structure_ood, gen_synthetic_homophily, gen_toy_bundle, load_bundle,
    save_bundle, split_label_leaveout, HomophilySpec, SbmSpec, TOY_RADIUS, TOY_STD,
};
use degem::search::{best_trial, evaluate, run_trial, sample_trials, search, write_trials, Objective, TrialResult};
use degem::trainer::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "degem", version, about = "Graph OOD detection with a latent energy model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an OOD bundle, the 2D toy, or a synthetic graph.
    Gen(GenArgs),
    /// Convert LINQS citation files into a dataset directory.
    Import(ImportArgs),
    /// Train a model and write a checkpoint with its training log.
    Train(TrainArgs),
    /// Score a bundle with a checkpoint.
    Eval(EvalArgs),
    /// Random search over the hyperparameter grids.
    Search(SearchArgs),
    /// One search trial; used by `search --parallel`.
    #[command(hide = true)]
    Trial(TrialArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Structure,
    Feature,
    Label,
    Toy8g,
    SynthHomophily,
}

#[derive(Args)]
struct GenArgs {
    kind: GenKind,
    /// Source dataset directory (structure, feature, label).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated ID classes for label leave-out.
    #[arg(long, value_delimiter = ',')]
    id_classes: Option<Vec<usize>>,
    /// Intra/inter block probabilities; degree-matched from labels when absent.
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_id: usize,
    #[arg(long, default_value_t = 1000)]
    n_ood: usize,
    #[arg(long, default_value_t = TOY_RADIUS)]
    radius: f64,
    #[arg(long, default_value_t = TOY_STD)]
    std: f64,
    #[arg(long, default_value_t = 2000)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long)]
    homophily: Option<f64>,
    #[arg(long, default_value_t = 6.0)]
    avg_degree: f64,
    #[arg(long, default_value_t = 0.5)]
    feature_std: f64,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    cites: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Ablation tokens, space- or comma-separated.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset or bundle directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    /// Seed of the trial sampler.
    #[arg(long, default_value_t = 0)]
    search_seed: u64,
    #[arg(long, default_value = "valid-accuracy")]
    objective: String,
    /// Trials run at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    objective: String,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut v = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| degem::Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| degem::Error::Parse { file: p.clone(), line: e.line(), msg: e.to_string() })?
        }
        None => json!({}),
    };
    let obj = v.as_object_mut().ok_or_else(|| degem::Error::Config(vec!["config must be a JSON object".into()]))?;
    for s in &a.sets {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| degem::Error::Config(vec![format!("--set {s}: expected KEY=VALUE")]))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        obj.insert(k.to_string(), val);
    }
    if let Some(seed) = a.seed {
        obj.insert("seed".into(), json!(seed));
    }
    if let Some(e) = a.epochs {
        obj.insert("epochs".into(), json!(e));
    }
    let mut cfg = TrainConfig::from_json(&v)?;
    for t in &a.ablate {
        cfg.ablate(t)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_graph(dir: &Path) -> Result<GraphDataset> {
    if dir.join("ood.json").exists() {
        Ok(load_bundle(dir)?.graph)
    } else {
        Ok(load_dataset(dir)?)
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn provenance(cfg: &TrainConfig) -> Vec<String> {
    vec![
        format!("degem {}", env!("CARGO_PKG_VERSION")),
        format!("seed {}", cfg.seed),
        format!("config {}", cfg.to_json()),
    ]
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let input = || -> Result<GraphDataset> {
        let p = a.input.as_ref().ok_or_else(|| anyhow!("--input is required for this kind"))?;
        Ok(load_dataset(p)?)
    };
    match a.kind {
        GenKind::Structure => {
            let g = input()?;
            let mut spec = SbmSpec::from_labels(&g);
            match (a.p_in, a.p_out) {
                (Some(pi), Some(po)) => (spec.p_in, spec.p_out) = (pi, po),
                (None, None) => {}
                _ => bail!("--p-in and --p-out go together"),
            }
            save_bundle(&gen_structure_ood(&g, &spec, a.seed)?, &a.out)?;
        }
        GenKind::Feature => save_bundle(&gen_feature_ood(&input()?, a.seed)?, &a.out)?,
        GenKind::Label => {
            let g = input()?;
            let ids = a.id_classes.clone().unwrap_or_else(|| default_id_classes(&g));
            save_bundle(&split_label_leaveout(&g, &ids, a.seed)?, &a.out)?;
        }
        GenKind::Toy8g => {
            let b = gen_toy_bundle(a.n_train, a.n_id, a.n_ood, a.radius, a.std, a.seed)?;
            save_bundle(&b, &a.out)?;
        }
        GenKind::SynthHomophily => {
            let h = a.homophily.ok_or_else(|| anyhow!("--homophily is required for synth-homophily"))?;
            let spec = HomophilySpec {
                nodes: a.nodes,
                classes: a.classes,
                homophily: h,
                avg_degree: a.avg_degree,
                feature_std: a.feature_std,
            };
            let g = gen_synthetic_homophily(&spec, &mut RngStream::new(a.seed))?;
            save_dataset(&g, &a.out)?;
            println!("edge homophily {:.4}", g.edge_homophily());
        }
    }
    Ok(())
}

fn cmd_import(a: ImportArgs) -> Result<()> {
    let g = import_linqs(&a.content, &a.cites)?;
    save_dataset(&g, &a.out)?;
    println!("{} nodes, {} edges, {} classes", g.num_nodes(), g.edges().len(), g.num_classes());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let g = load_graph(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let t = Trainer::new(&g, &cfg)?;
    let mut st = t.init_state();
    let mut log = String::new();
    for c in provenance(&cfg) {
        log.push_str(&format!("# {c}\n"));
    }
    log.push_str(&format!("# data {}\n", a.data.display()));
    log.push_str("epoch\tL_ebm\tL_cl\tL_cls\tseconds\n");
    let start = Instant::now();
    t.run(&mut st, |_, r| {
        log.push_str(&format!("{}\t{}\t{}\t{}\t{:.4}\n", r.epoch, r.l_ebm, r.l_cl, r.l_cls, r.seconds));
        log::info!("epoch {} L_ebm {:.4} L_cl {:.4} L_cls {:.4}", r.epoch, r.l_ebm, r.l_cl, r.l_cls);
        Ok(())
    })?;
    fs::write(a.out.join("train_log.tsv"), log)?;
    save_checkpoint(&st, &a.out.join("checkpoint.bin"))?;
    write_json(&a.out.join("config.json"), &cfg.to_json())?;
    println!("trained {} epochs in {:.1}s -> {}", cfg.epochs, start.elapsed().as_secs_f64(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let st = load_checkpoint(&a.checkpoint)?;
    let b = load_bundle(&a.bundle)?;
    let ev = evaluate(&b, &st)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let meta = json!({
        "config": st.config.to_json(),
        "seed": st.config.seed,
        "epoch": st.epoch,
        "checkpoint": a.checkpoint.display().to_string(),
        "bundle": a.bundle.display().to_string(),
        "bundle_type": b.kind,
        "bundle_seed": b.seed,
    });
    let report = ev.report(meta)?;
    report.write_json(&a.out.join("report.json"))?;
    let mut comments = provenance(&st.config);
    comments.push(format!("bundle {}", a.bundle.display()));
    write_scores(&a.out.join("scores.tsv"), &comments, &ev.nodes, &ev.scored()?)?;
    println!("{:<10}{:>10}", "metric", "value");
    println!("{:<10}{:>10.4}", "AUROC", report.auroc);
    println!("{:<10}{:>10.4}", "AUPR", report.aupr);
    println!("{:<10}{:>10.4}", "FPR95", report.fpr95);
    match report.accuracy {
        Some(acc) => println!("{:<10}{:>10.4}", "accuracy", acc),
        None => println!("{:<10}{:>10}", "accuracy", "n/a"),
    }
    println!("{:<10}{:>10}", "ID", report.num_id);
    println!("{:<10}{:>10}", "OOD", report.num_ood);
    Ok(())
}

fn trial_in_child(bundle: &Path, cfg_path: &Path, index: usize, objective: &str, out: &Path) -> Result<std::process::Child> {
    let exe = std::env::current_exe()?;
    let child = Command::new(exe)
        .arg("trial")
        .arg("--bundle")
        .arg(bundle)
        .arg("--config")
        .arg(cfg_path)
        .arg("--index")
        .arg(index.to_string())
        .arg("--objective")
        .arg(objective)
        .arg("--out")
        .arg(out)
        .spawn()?;
    Ok(child)
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    if a.budget == 0 {
        return Err(degem::Error::Config(vec!["--budget must be >= 1".into()]).into());
    }
    if a.parallel == 0 {
        return Err(degem::Error::Config(vec!["--parallel must be >= 1".into()]).into());
    }
    let objective: Objective = a.objective.parse()?;
    let base = resolve_config(&a.cfg)?;
    let b = load_bundle(&a.bundle)?;
    fs::create_dir_all(&a.out)?;
    let trials = sample_trials(&base, a.budget, a.search_seed);
    let results: Vec<TrialResult> = if a.parallel == 1 {
        search(&b, &trials, objective)?
    } else {
        let dir = a.out.join("trials");
        fs::create_dir_all(&dir)?;
        let mut done = Vec::new();
        for chunk in trials.iter().enumerate().collect::<Vec<_>>().chunks(a.parallel) {
            let mut running = Vec::new();
            for &(i, cfg) in chunk {
                let cp = dir.join(format!("trial_{i}.config.json"));
                write_json(&cp, &cfg.to_json())?;
                let rp = dir.join(format!("trial_{i}.result.json"));
                running.push((i, rp.clone(), trial_in_child(&a.bundle, &cp, i, &a.objective, &rp)?));
            }
            for (i, rp, mut child) in running {
                let status = child.wait()?;
                match status.code() {
                    Some(0) => done.push(serde_json::from_slice::<TrialResult>(&fs::read(&rp)?)?),
                    Some(4) => log::warn!("trial {i} diverged"),
                    _ => bail!("trial {i} failed with {status}"),
                }
            }
        }
        done
    };
    let mut comments = provenance(&base);
    comments.push(format!("bundle {}", a.bundle.display()));
    comments.push(format!("budget {} search_seed {} objective {}", a.budget, a.search_seed, a.objective));
    write_trials(&a.out.join("trials.tsv"), &comments, &results)?;
    let best = best_trial(&results).ok_or_else(|| degem::Error::Numerical("every trial diverged".into()))?;
    write_json(&a.out.join("best_config.json"), &best.config.to_json())?;
    println!(
        "best trial {} objective {:.4} auroc {:.4} ({} of {} finished)",
        best.index,
        best.objective,
        best.evaluation.auroc,
        results.len(),
        a.budget
    );
    Ok(())
}

fn cmd_trial(a: TrialArgs) -> Result<()> {
    let objective: Objective = a.objective.parse()?;
    let cfg = resolve_config(&ConfigArgs {
        config: Some(a.config.clone()),
        sets: Vec::new(),
        seed: None,
        epochs: None,
        ablate: Vec::new(),
    })?;
    let b = load_bundle(&a.bundle)?;
    let t = run_trial(&b, a.index, &cfg, objective)?;
    fs::write(&a.out, serde_json::to_vec(&t)?)?;
    Ok(())
}

fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEGEM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => return Err(degem::Error::Config(vec![format!("DEGEM_THREADS={v}: expected a positive integer")]).into()),
        }
    }
    Ok(())
}

/// 2 for usage and configuration, 3 for data, 4 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(de) = cause.downcast_ref::<degem::Error>() {
            return match de {
                degem::Error::Config(_) => 2,
                degem::Error::Numerical(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    2
}

/// The cause chain, skipping causes their parent already prints.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = check_threads().and_then(|_| match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Import(a) => cmd_import(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Trial(a) => cmd_trial(a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
