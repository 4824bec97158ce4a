use std::path::Path;
use std::process::{Command, Output};

use jetrec::autodiff::Parameters;
use jetrec::clustering::{ceil_log2, ClusterTree};
use jetrec::datagen::{read_jsonl, write_jsonl, JetRecord};
use jetrec::eval::{read_roc_csv, rejection_at};
use jetrec::model::{Checkpoint, Model};

fn jetrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jetrec"))
        .current_dir(dir)
        .args(args)
        .env_remove("JETREC_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = jetrec(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn printed(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} in {stdout}"))
        .trim()
        .parse()
        .unwrap()
}

const SMALL: &[&str] = &["--n-jets", "300", "--max-constituents", "14"];

fn small_dataset(dir: &Path, seed: &str) {
    let mut args = vec!["generate", "--out", "jets.jsonl", "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

#[test]
fn generate_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let other = tempfile::tempdir().unwrap();
    let e = other.path();
    for dir in [d, e] {
        ok(dir, &["generate", "--out", "a.jsonl", "--n-jets", "100", "--seed", "7"]);
    }
    assert_eq!(read(d, "a.jsonl"), read(e, "a.jsonl"));
    assert_eq!(read(d, "a.config.json"), read(e, "a.config.json"));
    assert_eq!(read_jsonl(&d.join("a.jsonl")).unwrap().len(), 100);

    ok(d, &["generate", "--out", "empty.jsonl", "--n-jets", "0"]);
    assert!(read(d, "empty.jsonl").is_empty());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "a.jsonl", "--n-jets", "50", "--seed", "3", "--jets-per-event", "2"]);
    std::fs::rename(d.join("a.jsonl"), d.join("first.jsonl")).unwrap();
    // the snapshot names a.jsonl as output, so rerunning from it rewrites that file
    ok(d, &["generate", "--config", "a.config.json"]);
    assert_eq!(read(d, "first.jsonl"), read(d, "a.jsonl"));
    let recs = read_jsonl(&d.join("a.jsonl")).unwrap();
    assert_eq!(recs[3].event_id, Some(1));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = jetrec(d, &["train", "--config", "bad.json", "--data", "x.jsonl", "--out-checkpoint", "c.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = jetrec(d, &["generate", "--out", "g.jsonl", "--min-constituents", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_constituents"));

    small_dataset(d, "1");
    let out = jetrec(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--lr", "-1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn cluster_writes_valid_trees_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "2");
    let recs = read_jsonl(&d.join("jets.jsonl")).unwrap();
    for alpha in ["-1", "0", "1"] {
        ok(d, &["cluster", "--in", "jets.jsonl", "--out", "trees.jsonl", "--alpha", alpha]);
        let text = String::from_utf8(read(d, "trees.jsonl")).unwrap();
        let mut n = 0;
        for (line, rec) in text.lines().zip(&recs) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let tree: ClusterTree = serde_json::from_value(v["tree"].clone()).unwrap();
            tree.validate(1e-9).unwrap();
            assert_eq!(tree.n_leaves, rec.particles.len());
            n += 1;
        }
        assert_eq!(n, recs.len());
        let stats = String::from_utf8(read(d, "trees.stats.csv")).unwrap();
        let mut rows = stats.lines();
        assert_eq!(rows.next(), Some("jet,n_leaves,depth,imbalance"));
        for row in rows {
            let f: Vec<&str> = row.split(',').collect();
            let (leaves, depth): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            assert!(depth >= ceil_log2(leaves), "{row}");
        }
    }

    ok(d, &["cluster", "--in", "jets.jsonl", "--out", "r1.jsonl", "--topology", "random", "--seed", "5"]);
    ok(d, &["cluster", "--in", "jets.jsonl", "--out", "r2.jsonl", "--topology", "random", "--seed", "5"]);
    assert_eq!(read(d, "r1.jsonl"), read(d, "r2.jsonl"));
    assert_eq!(read(d, "r1.stats.csv"), read(d, "r2.stats.csv"));
}

#[test]
fn unreadable_record_exits_3_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "3");
    let mut text = String::from_utf8(read(d, "jets.jsonl")).unwrap();
    text.push_str("{\"label\": 1, \"particles\": []}\n");
    std::fs::write(d.join("broken.jsonl"), text).unwrap();
    let out = jetrec(d, &["cluster", "--in", "broken.jsonl", "--out", "t.jsonl"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 301"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "4");
    let train = ["train", "--data", "jets.jsonl", "--q", "6", "--epochs", "2", "--seed", "9"];
    let a: Vec<&str> = train.iter().copied().chain(["--out-checkpoint", "a.json", "--threads", "1"]).collect();
    let b: Vec<&str> = train.iter().copied().chain(["--out-checkpoint", "b.json", "--threads", "4"]).collect();
    let out_a = ok(d, &a);
    let out_b = ok(d, &b);
    assert_eq!(out_a, out_b);
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
    assert_eq!(read(d, "a.history.csv"), read(d, "b.history.csv"));
    let history = String::from_utf8(read(d, "a.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(out_a.contains("final val AUC"));
}

#[test]
fn zero_learning_rate_leaves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "5");
    ok(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--lr", "0", "--epochs", "2", "--q", "5"]);
    let ckpt = Checkpoint::load(&d.join("c.json")).unwrap();
    assert_eq!(ckpt.model().unwrap(), Model::init(&ckpt.config));
}

#[test]
fn divergent_training_exits_4_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "6");
    let out = jetrec(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--lr", "1e300", "--epochs", "3"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn evaluate_reproduces_history_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "7");
    ok(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--q", "8", "--epochs", "3", "--lr", "5e-3"]);
    let out = ok(d, &["evaluate", "--data", "jets.jsonl", "--checkpoint", "c.json", "--roc-out", "roc.csv", "--split", "val"]);

    let ckpt = Checkpoint::load(&d.join("c.json")).unwrap();
    let recorded = ckpt.history.last().unwrap().val_auc.unwrap();
    assert!((printed(&out, "auc ") - recorded).abs() <= 1e-12);

    let curve = read_roc_csv(&d.join("roc.csv")).unwrap();
    let expected = rejection_at(&curve, 0.5).unwrap().to_string();
    assert_eq!(printed(&out, "rejection at efficiency 0.5:").to_string(), expected);
    assert!(d.join("roc.config.json").exists());
}

#[test]
fn zeroed_head_scores_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "jets.jsonl", "--n-jets", "2000", "--max-constituents", "12", "--seed", "8"]);
    ok(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--q", "4", "--epochs", "0"]);
    let mut ckpt = Checkpoint::load(&d.join("c.json")).unwrap();
    let mut model = ckpt.model().unwrap();
    model.head.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    ckpt = Checkpoint::new(&model, &ckpt.config, ckpt.standardization.clone(), ckpt.history.clone());
    ckpt.save(&d.join("zero.json")).unwrap();
    let out = ok(d, &["evaluate", "--data", "jets.jsonl", "--checkpoint", "zero.json", "--roc-out", "roc.csv"]);
    let auc = printed(&out, "auc ");
    assert!((auc - 0.5).abs() <= 0.03, "{auc}");
}

#[test]
fn single_class_evaluation_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d, "9");
    ok(d, &["train", "--data", "jets.jsonl", "--out-checkpoint", "c.json", "--q", "4", "--epochs", "1"]);
    let signal: Vec<JetRecord> = read_jsonl(&d.join("jets.jsonl")).unwrap().into_iter().filter(|r| r.label == 1).collect();
    write_jsonl(&signal, &d.join("signal.jsonl")).unwrap();
    let out = jetrec(d, &["evaluate", "--data", "signal.jsonl", "--checkpoint", "c.json", "--roc-out", "roc.csv"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

fn bench_rows(csv: &str) -> Vec<(String, usize, f64)> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,n,mean_ns,p50,p95"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5);
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn bench_reports_timings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = ok(d, &["bench", "--mode", "clustering", "--n", "16,128", "--repeat", "10"]);
    let rows = bench_rows(&csv);
    assert_eq!(rows.len(), 2);
    // quadratic in practice; 8x the particles must cost more than 8x the time
    assert!(rows[1].2 > 8.0 * rows[0].2, "{csv}");

    ok(d, &["bench", "--mode", "batched-forward", "--n", "20", "--repeat", "3", "--out", "b.csv"]);
    let rows = bench_rows(&String::from_utf8(read(d, "b.csv")).unwrap());
    let modes: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(modes, ["batched-forward", "per-tree-forward"]);
    assert!(d.join("b.config.json").exists());
}
