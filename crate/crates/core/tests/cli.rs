//! Runs the `gaitgraph` binary end to end on small configs.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::parse_dot_edges;
use gaitgraph::data::{generate_synthetic, load_keypoints, write_keypoints, Dataset, SynthConfig};
use gaitgraph::graph::{JointLayout, COCO17_BONES};
use gaitgraph::models::{Checkpoint, Model, ModelConfig};
use gaitgraph::training::{train_step, TrainConfig, TrainState};

const TINY: &str = r#"
seed = 3
[synth]
n_per_class = 6
frames = 12
[model]
frames = 12
hidden = [4, 8]
temporal_kernel = 3
[train]
epochs = 1
batch_size = 4
"#;

fn gaitgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_a_loadable_deterministic_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 11\n[synth]\nn_per_class = 5\nframes = 8\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&gaitgraph(&["synth", "--config", s(&cfg), "--out", s(&a)]));
    assert!(stdout.contains("10 sequences"), "{stdout}");
    ok(&gaitgraph(&["synth", "--config", s(&cfg), "--out", s(&b)]));
    let text = std::fs::read(a.join("synthetic.jsonl")).unwrap();
    assert_eq!(text, std::fs::read(b.join("synthetic.jsonl")).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 10);

    let loaded = load_keypoints(&a.join("synthetic.jsonl")).unwrap();
    let synth = SynthConfig { n_per_class: 5, frames: 8, ..SynthConfig::default() };
    assert_eq!(loaded, generate_synthetic(&synth, 11).unwrap());
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 11\n[synth]\nn_per_class = 2\nframes = 4\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&gaitgraph(&["synth", "--config", s(&cfg), "--out", s(&a)]));
    ok(&gaitgraph(&["synth", "--config", s(&cfg), "--out", s(&b), "--seed", "12"]));
    assert_ne!(
        std::fs::read(a.join("synthetic.jsonl")).unwrap(),
        std::fs::read(b.join("synthetic.jsonl")).unwrap()
    );
}

fn value_after<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no `{key}` in {stdout}"))
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&gaitgraph(&["train", "--config", s(&cfg), "--out", s(&a)]));
    ok(&gaitgraph(&["train", "--config", s(&cfg), "--out", s(&b)]));
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert_eq!(metrics.lines().next().unwrap(), "epoch,train_loss,train_acc,test_acc,mean_edges,tau");
    for file in ["metrics.csv", "checkpoint.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }

    // eval: printed accuracy equals a recount of the prediction dump
    let stdout = ok(&gaitgraph(&["eval", "--config", s(&cfg), "--out", s(&a)]));
    let accuracy: f64 = value_after(&stdout, "accuracy ").parse().unwrap();
    let dump = std::fs::read_to_string(a.join("predictions.csv")).unwrap();
    let rows: Vec<Vec<&str>> = dump.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let correct = rows.iter().filter(|r| r[2] == r[3]).count();
    assert_eq!(accuracy, correct as f64 / rows.len() as f64);
    assert_eq!(value_after(&stdout, "instances ").parse::<usize>().unwrap(), rows.len());

    // export at threshold 0 emits the complete graph, deterministically
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let ck = a.join("checkpoint.json");
    for e in [&e1, &e2] {
        ok(&gaitgraph(&[
            "export", "--config", s(&cfg), "--out", s(e), "--checkpoint", s(&ck), "--threshold", "0",
        ]));
    }
    let dot = std::fs::read_to_string(e1.join("graph_pooled.dot")).unwrap();
    assert_eq!(parse_dot_edges(&dot).len(), 17 * 16 / 2);
    for file in ["graph_pooled.dot", "freq_pooled.csv", "diff_anatomy.csv", "freq_class0.csv", "graph_class1.dot"] {
        assert_eq!(std::fs::read(e1.join(file)).unwrap(), std::fs::read(e2.join(file)).unwrap(), "{file}");
    }

    // diff at 0.5 against the anatomy graph, recomputed from the frequency CSV
    let e3 = dir.path().join("e3");
    ok(&gaitgraph(&["export", "--config", s(&cfg), "--out", s(&e3), "--checkpoint", s(&ck)]));
    let freq = std::fs::read_to_string(e3.join("freq_pooled.csv")).unwrap();
    let names: Vec<String> = freq.lines().next().unwrap().split(',').map(String::from).collect();
    let matrix: Vec<Vec<f64>> = freq
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let learned: BTreeSet<(usize, usize)> = (0..17)
        .flat_map(|i| (i + 1..17).map(move |j| (i, j)))
        .filter(|&(i, j)| matrix[i][j] >= 0.5)
        .collect();
    let bones: BTreeSet<(usize, usize)> = COCO17_BONES.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    let mut expected = BTreeSet::new();
    for e in learned.difference(&bones) {
        expected.insert(("added", *e));
    }
    for e in bones.difference(&learned) {
        expected.insert(("removed", *e));
    }
    for e in learned.intersection(&bones) {
        expected.insert(("kept", *e));
    }
    let diff = std::fs::read_to_string(e3.join("diff_anatomy.csv")).unwrap();
    let index = |n: &str| names.iter().position(|x| x == n).unwrap();
    let got: BTreeSet<(&str, (usize, usize))> = diff
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let status = match f[0] {
                "added" => "added",
                "removed" => "removed",
                _ => "kept",
            };
            (status, (index(f[1]), index(f[2])))
        })
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn eval_of_a_memorised_instance() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { n_per_class: 1, frames: 12, ..SynthConfig::default() };
    let data = generate_synthetic(&synth, 4).unwrap();
    let one = Dataset::new(vec![data.sequences[1].clone()]);
    let config = ModelConfig { frames: 12, hidden: vec![4, 8], temporal_kernel: 3, ..ModelConfig::default() };
    let mut model = Model::new(config, JointLayout::coco17(), 8).unwrap();
    let tc = TrainConfig::default();
    let mut state = TrainState::new(&model, &tc);
    for _ in 0..200 {
        train_step(&mut model, &[&one.sequences[0]], &mut state, 1.0, &tc).unwrap();
    }
    let ck = dir.path().join("memorised.json");
    Checkpoint::from_model(&model, "test", 8).save(&ck).unwrap();
    write_keypoints(&one, &dir.path().join("one.jsonl")).unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 1\ndata = \"one.jsonl\"\nnormalize = false\n[model]\nframes = 12\nhidden = [4, 8]\ntemporal_kernel = 3\n",
    );
    let stdout = ok(&gaitgraph(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--split", "all", "--out", s(dir.path()),
    ]));
    assert_eq!(value_after(&stdout, "accuracy "), "1");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = gaitgraph(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn config_and_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = write_config(dir.path(), "[synth]\nn_per_class = 2\n");
    let out = gaitgraph(&["synth", "--config", s(&no_seed)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let both = write_config(dir.path(), "seed = 1\ndata = \"x.jsonl\"\n[synth]\nn_per_class = 2\n");
    assert_eq!(gaitgraph(&["train", "--config", s(&both)]).status.code(), Some(1));

    let bad_field = write_config(dir.path(), "seed = 1\n[synth]\nn_per_class = 0\n");
    let out = gaitgraph(&["synth", "--config", s(&bad_field)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.n_per_class"));

    let cfg = write_config(dir.path(), TINY);
    let out = gaitgraph(&["export", "--config", s(&cfg), "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(gaitgraph(&["train"]).status.code(), Some(1));
    assert_eq!(gaitgraph(&["--help"]).status.code(), Some(0));
    assert_eq!(gaitgraph(&["eval", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}
