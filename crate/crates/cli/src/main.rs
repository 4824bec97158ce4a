//! `jetrec` command-line front-end.
//!
//! Every subcommand writes the fully resolved configuration next to its
//! primary output as `<stem>.config.json`. Exit codes: 0 ok, 2 config,
//! 3 data, 4 training, 5 evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jetrec::clustering::{cluster, cluster_oracle, tree_stats, ClusterTree, Topology};
use jetrec::datagen::{generate, read_jsonl, write_jsonl, DataError, GenConfig, JetRecord};
use jetrec::eval::{export_roc_csv, rejection_at, roc, EvalError};
use jetrec::kinematics::FeatureSet;
use jetrec::model::{export_history_csv, train_with, Checkpoint, Level, ModelError, TrainConfig};
use jetrec::treenn::{embed, embed_batched, init_params, levelize, GateInput, JetInput};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::Evaluation(_) => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::NonFiniteLoss { .. } | ModelError::Autodiff(_) => CliError::Training(e.to_string()),
            ModelError::Eval(_) => CliError::Evaluation(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Run configuration

/// Settings of the `cluster` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ClusterConfig {
    topology: Topology,
    r: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { topology: Topology::KT, r: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum SplitChoice {
    #[default]
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    target_eff: f64,
    split: SplitChoice,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { target_eff: 0.5, split: SplitChoice::All }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum BenchMode {
    #[default]
    Clustering,
    BatchedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchConfig {
    mode: BenchMode,
    /// Constituents per jet (clustering) or jets per batch (batched-forward).
    n: Vec<usize>,
    repeat: usize,
    seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { mode: BenchMode::Clustering, n: vec![10, 20, 40, 80], repeat: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Paths {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

/// Everything one invocation depends on, apart from the thread count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    generate: GenConfig,
    cluster: ClusterConfig,
    train: TrainConfig,
    evaluate: EvalConfig,
    bench: BenchConfig,
    paths: Paths,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes the resolved config as `<stem>.config.json` beside `output`.
    fn write_beside(&self, output: &Path) -> Result<PathBuf, CliError> {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let path = output.with_file_name(format!("{stem}.config.json"));
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_error(&path))?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "jetrec", version, about = "Recursive neural networks over jet clustering trees")]
struct Cli {
    /// Worker threads for clustering and per-sample work (default: all cores).
    #[arg(long, global = true, env = "JETREC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy dataset of signal and background jets as JSONL.
    Generate(GenerateArgs),
    /// Cluster every jet of a dataset and export trees and tree statistics.
    Cluster(ClusterArgs),
    /// Train a classifier and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and export its ROC curve.
    Evaluate(EvaluateArgs),
    /// Time clustering or the batched forward pass.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TopologyArg {
    Kt,
    Ca,
    AntiKt,
    Random,
    PtDesc,
    PtAsc,
}

impl TopologyArg {
    fn resolve(self, seed: u64) -> Topology {
        match self {
            TopologyArg::Kt => Topology::KT,
            TopologyArg::Ca => Topology::CAMBRIDGE_AACHEN,
            TopologyArg::AntiKt => Topology::ANTI_KT,
            TopologyArg::Random => Topology::RandomTree { seed },
            TopologyArg::PtDesc => Topology::PtDescChain,
            TopologyArg::PtAsc => Topology::PtAscChain,
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// JSON run config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_jets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_constituents: Option<usize>,
    #[arg(long)]
    max_constituents: Option<usize>,
    #[arg(long)]
    min_prong_dr: Option<f64>,
    #[arg(long)]
    max_prong_dr: Option<f64>,
    #[arg(long)]
    pt_mean: Option<f64>,
    /// Group consecutive jets into events of this size.
    #[arg(long)]
    jets_per_event: Option<usize>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Tree JSONL output; stats go to `<stem>.stats.csv` beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    /// Generalized-kt exponent; implies a sequential-recombination topology.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "topology")]
    alpha: Option<f64>,
    #[arg(long = "R", alias = "r")]
    r: Option<f64>,
    /// Seed of the random topology.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint JSON; history goes to `<stem>.history.csv` beside it.
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    /// Gated recursion (`--gated false` for the simple variant).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    gated: Option<bool>,
    #[arg(long, value_enum)]
    gate_input: Option<GateInputArg>,
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    #[arg(long, allow_negative_numbers = true, conflicts_with = "topology")]
    alpha: Option<f64>,
    #[arg(long = "R", alias = "r")]
    r: Option<f64>,
    #[arg(long, value_enum)]
    level: Option<LevelArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GateInputArg {
    Candidate,
    Children,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Jet,
    Event,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    roc_out: Option<PathBuf>,
    /// Signal efficiency at which background rejection is reported.
    #[arg(long)]
    target_eff: Option<f64>,
    /// Which samples of the checkpoint's train/validation split to score.
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<BenchMode>,
    /// Problem sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Timing CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| CliError::Config(format!("missing {flag} (or the matching key under \"paths\")")))
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_error(path))?))
}

// ---------------------------------------------------------------------------
// Subcommands

fn run_generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    let g = &mut run.generate;
    set(&mut g.n_jets, args.n_jets);
    set(&mut g.seed, args.seed);
    set(&mut g.min_constituents, args.min_constituents);
    set(&mut g.max_constituents, args.max_constituents);
    set(&mut g.min_prong_dr, args.min_prong_dr);
    set(&mut g.max_prong_dr, args.max_prong_dr);
    set(&mut g.pt_mean, args.pt_mean);
    set(&mut g.jets_per_event, args.jets_per_event);
    if args.out.is_some() {
        run.paths.out = args.out;
    }
    let out = required(&run.paths.out, "--out")?;
    run.generate.validate()?;

    let records = generate(&run.generate)?;
    write_jsonl(&records, &out)?;
    run.write_beside(&out)?;
    println!("wrote {} jets to {}", records.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TreeRecord<'a> {
    jet: usize,
    tree: &'a ClusterTree,
}

fn run_cluster(args: ClusterArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    let c = &mut run.cluster;
    let seed = args.seed.unwrap_or(match c.topology {
        Topology::RandomTree { seed } => seed,
        _ => 0,
    });
    if let Some(t) = args.topology {
        c.topology = t.resolve(seed);
    } else if let Some(alpha) = args.alpha {
        c.topology = Topology::GenKt { alpha };
    } else if let (Topology::RandomTree { .. }, Some(s)) = (c.topology, args.seed) {
        c.topology = Topology::RandomTree { seed: s };
    }
    set(&mut c.r, args.r);
    if args.input.is_some() {
        run.paths.data = args.input;
    }
    if args.out.is_some() {
        run.paths.out = args.out;
    }
    let input = required(&run.paths.data, "--in")?;
    let out = required(&run.paths.out, "--out")?;
    match run.cluster.topology {
        Topology::GenKt { alpha } if !alpha.is_finite() => return Err(CliError::Config("cluster.topology alpha must be finite".into())),
        Topology::External => return Err(CliError::Config("cluster.topology cannot be external".into())),
        _ => {}
    }
    if !(run.cluster.r > 0.0) {
        return Err(CliError::Config(format!("cluster.r must be positive, got {}", run.cluster.r)));
    }

    let records = read_jsonl(&input)?;
    let (topology, r) = (run.cluster.topology, run.cluster.r);
    let trees: Vec<ClusterTree> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            topology
                .build(&rec.particles, r, i as u64)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", input.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;

    let mut w = create(&out)?;
    let stats_path = sidecar(&out, "stats.csv");
    let mut s = create(&stats_path)?;
    writeln!(s, "jet,n_leaves,depth,imbalance").map_err(io_error(&stats_path))?;
    for (jet, tree) in trees.iter().enumerate() {
        let line = serde_json::to_string(&TreeRecord { jet, tree }).expect("tree serializes");
        writeln!(w, "{line}").map_err(io_error(&out))?;
        let st = tree_stats(tree);
        writeln!(s, "{jet},{},{},{}", st.n_leaves, st.depth, st.imbalance).map_err(io_error(&stats_path))?;
    }
    w.flush().map_err(io_error(&out))?;
    s.flush().map_err(io_error(&stats_path))?;
    run.write_beside(&out)?;
    println!("clustered {} jets into {}", trees.len(), out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    let t = &mut run.train;
    set(&mut t.q, args.q);
    set(&mut t.gated, args.gated);
    set(&mut t.epochs, args.epochs);
    set(&mut t.lr, args.lr);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.seed, args.seed);
    set(&mut t.r, args.r);
    set(&mut t.val_fraction, args.val_fraction);
    if let Some(g) = args.gate_input {
        t.gate_input = match g {
            GateInputArg::Candidate => GateInput::Candidate,
            GateInputArg::Children => GateInput::Children,
        };
    }
    if let Some(l) = args.level {
        t.level = match l {
            LevelArg::Jet => Level::Jet,
            LevelArg::Event => Level::Event,
        };
    }
    if let Some(topo) = args.topology {
        t.topology = topo.resolve(t.seed);
    } else if let Some(alpha) = args.alpha {
        t.topology = Topology::GenKt { alpha };
    }
    if args.data.is_some() {
        run.paths.data = args.data;
    }
    if args.out_checkpoint.is_some() {
        run.paths.checkpoint = args.out_checkpoint;
    }
    let data = required(&run.paths.data, "--data")?;
    let ckpt_path = required(&run.paths.checkpoint, "--out-checkpoint")?;
    run.train.validate()?;

    let records = read_jsonl(&data)?;
    let out = train_with(&records, &run.train, |rec| {
        match rec.val_auc {
            Some(auc) => println!("epoch {} loss {:.6} val_auc {auc:.6}", rec.epoch, rec.loss),
            None => println!("epoch {} loss {:.6}", rec.epoch, rec.loss),
        }
    })?;
    out.checkpoint.save(&ckpt_path)?;
    export_history_csv(&out.checkpoint.history, &sidecar(&ckpt_path, "history.csv"))?;
    run.write_beside(&ckpt_path)?;
    match out.checkpoint.history.last().and_then(|r| r.val_auc) {
        Some(auc) => println!("final val AUC {auc}"),
        None => println!("final val AUC n/a"),
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    set(&mut run.evaluate.target_eff, args.target_eff);
    set(&mut run.evaluate.split, args.split);
    if args.data.is_some() {
        run.paths.data = args.data;
    }
    if args.checkpoint.is_some() {
        run.paths.checkpoint = args.checkpoint;
    }
    if args.roc_out.is_some() {
        run.paths.out = args.roc_out;
    }
    let data_path = required(&run.paths.data, "--data")?;
    let ckpt_path = required(&run.paths.checkpoint, "--checkpoint")?;
    let roc_path = required(&run.paths.out, "--roc-out")?;
    let eff = run.evaluate.target_eff;
    if !(eff > 0.0 && eff <= 1.0) {
        return Err(CliError::Config(format!("evaluate.target_eff must lie in (0, 1], got {eff}")));
    }

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.model()?;
    let records: Vec<JetRecord> = read_jsonl(&data_path)?;
    let data = ckpt.dataset(&records)?;
    let n = data.samples.len();
    let ids: Vec<usize> = match run.evaluate.split {
        SplitChoice::All => (0..n).collect(),
        SplitChoice::Train => ckpt.split(n).train,
        SplitChoice::Val => ckpt.split(n).val,
    };
    let scores = model.score(&data, &ids).map_err(|e| match e {
        ModelError::Config(m) => CliError::Config(m),
        other => CliError::Evaluation(other.to_string()),
    })?;
    let curve = roc(&scores, &data.labels(&ids))?;
    let rejection = rejection_at(&curve, eff)?;
    export_roc_csv(&curve, &roc_path)?;
    run.write_beside(&roc_path)?;
    println!("samples {}", ids.len());
    println!("auc {}", curve.auc);
    println!("rejection at efficiency {eff}: {rejection}");
    Ok(())
}

struct Timing {
    mean_ns: f64,
    p50: u128,
    p95: u128,
}

fn summarize(mut ns: Vec<u128>) -> Timing {
    ns.sort_unstable();
    let mean_ns = ns.iter().sum::<u128>() as f64 / ns.len() as f64;
    let pick = |q: f64| ns[((q * (ns.len() - 1) as f64).round() as usize).min(ns.len() - 1)];
    Timing { mean_ns, p50: pick(0.5), p95: pick(0.95) }
}

fn time<T>(f: impl FnOnce() -> T) -> (T, u128) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_nanos())
}

fn run_bench(args: BenchArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    let b = &mut run.bench;
    set(&mut b.mode, args.mode);
    set(&mut b.n, args.n);
    set(&mut b.repeat, args.repeat);
    set(&mut b.seed, args.seed);
    if args.out.is_some() {
        run.paths.out = args.out;
    }
    let b = run.bench.clone();
    if b.repeat == 0 || b.n.is_empty() {
        return Err(CliError::Config("bench.repeat must be >= 1 and bench.n non-empty".into()));
    }

    let mut rows = Vec::new();
    for &n in &b.n {
        match b.mode {
            BenchMode::Clustering => {
                if n < 2 {
                    return Err(CliError::Config(format!("bench.n entries must be >= 2 for clustering, got {n}")));
                }
                let gen = GenConfig { n_jets: b.repeat, min_constituents: n, max_constituents: n, seed: b.seed, ..GenConfig::default() };
                let jets = generate(&gen)?;
                for (i, jet) in jets.iter().enumerate() {
                    let fast = cluster(&jet.particles, 1.0, 1.0).map_err(|e| CliError::Data(e.to_string()))?;
                    let oracle = cluster_oracle(&jet.particles, 1.0, 1.0).map_err(|e| CliError::Data(e.to_string()))?;
                    if fast != oracle {
                        return Err(CliError::Evaluation(format!("clustering of jet {i} differs from the oracle")));
                    }
                }
                let ns = jets.iter().map(|j| time(|| cluster(&j.particles, 1.0, 1.0)).1).collect();
                rows.push(("clustering", n, summarize(ns)));
            }
            BenchMode::BatchedForward => {
                let gen = GenConfig { n_jets: n, seed: b.seed, ..GenConfig::default() };
                let inputs: Vec<JetInput> = generate(&gen)?
                    .iter()
                    .map(|r| {
                        let tree = cluster(&r.particles, 1.0, 1.0).map_err(|e| CliError::Data(e.to_string()))?;
                        JetInput::new(tree, FeatureSet::Standard).map_err(|e| CliError::Data(e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
                let params = init_params(16, FeatureSet::Standard.len(), b.seed, true);
                let variant = params.variant();
                let forward = || {
                    let schedule = levelize(inputs.iter().map(|i| &i.tree));
                    embed_batched(&schedule, &inputs, &params, variant)
                };
                let per_tree = || inputs.iter().map(|i| embed(i, &params)).collect::<Result<Vec<_>, _>>();
                let batched = forward().map_err(|e| CliError::Evaluation(e.to_string()))?;
                let single = per_tree().map_err(|e| CliError::Evaluation(e.to_string()))?;
                for (i, row) in single.iter().enumerate() {
                    let diff = batched.row(i).iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    if diff > 1e-12 {
                        return Err(CliError::Evaluation(format!("batched forward of jet {i} differs by {diff:e}")));
                    }
                }
                let ns = (0..b.repeat).map(|_| time(forward).1).collect();
                rows.push(("batched-forward", n, summarize(ns)));
                let ns = (0..b.repeat).map(|_| time(per_tree).1).collect();
                rows.push(("per-tree-forward", n, summarize(ns)));
            }
        }
    }

    let mut csv = String::from("mode,n,mean_ns,p50,p95\n");
    for (mode, n, t) in &rows {
        csv.push_str(&format!("{mode},{n},{:.0},{},{}\n", t.mean_ns, t.p50, t.p95));
    }
    match &run.paths.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(io_error(path))?;
            run.write_beside(path)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("config error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
