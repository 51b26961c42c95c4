//! `gaitgraph` command line: `synth`, `train`, `eval`, `export`.
//!
//! Every command reads one TOML run config. Exit codes: 0 success,
//! 1 usage or config error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, load_keypoints, normalize_sequence, split_by_subject, write_keypoints, Dataset,
    SynthConfig,
};
use crate::error::Error;
use crate::export::{diff_graphs, edge_frequency, write_text};
use crate::graph::{build_anatomy_graph, JointLayout};
use crate::models::{Checkpoint, Model, ModelConfig};
use crate::training::{evaluate, history_csv, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SYNTH_FILE: &str = "synthetic.jsonl";

#[derive(Debug, Parser)]
#[command(name = "gaitgraph", version, about = "Learned skeleton graphs for gait classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by the `[synth]` section.
    Synth(CommonArgs),
    /// Train a model and write the checkpoint and per-epoch metrics.
    Train(CommonArgs),
    /// Evaluate a checkpoint and dump per-instance predictions.
    Eval(EvalArgs),
    /// Write edge-frequency matrices, DOT graphs and a diff against the anatomy graph.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's `out` directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Minimum edge frequency for an edge to appear in the DOT graphs and diff.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_layout() -> String {
    "coco17".into()
}

fn default_test_fraction() -> f64 {
    1.0 / 3.0
}

/// Contents of the run config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory, either here or via `--seed`.
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Keypoint JSON-lines file; exclusive with `[synth]`.
    pub data: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// `coco17`, `generic`, or a path to a layout JSON file.
    #[serde(default = "default_layout")]
    pub layout: String,
    /// Root/scale normalization; defaults to on for file data and off for
    /// synthetic data.
    pub normalize: Option<bool>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A config with overrides applied and relative paths resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub hash: String,
}

impl Resolved {
    pub fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// Errors that map to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn parse_run_config(text: &str) -> anyhow::Result<RunConfig> {
    let raw: toml::Value = toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
    if raw.get("train").and_then(|t| t.get("seed")).is_some() {
        return Err(config_err("train.seed: set the top-level `seed` instead"));
    }
    let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
    match (&cfg.data, &cfg.synth) {
        (Some(_), Some(_)) => Err(config_err("data: give either `data` or `[synth]`, not both")),
        (None, None) => Err(config_err("data: one of `data` or `[synth]` is required")),
        _ => Ok(cfg),
    }
}

pub fn resolve(args: &CommonArgs) -> anyhow::Result<Resolved> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut config = parse_run_config(&text)?;
    let base = args.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let seed = args
        .seed
        .or(config.seed)
        .ok_or_else(|| config_err("seed: required (set `seed` in the config or pass --seed)"))?;
    config.seed = Some(seed);
    if let Some(d) = &config.data {
        config.data = Some(base.join(d));
    }
    if !matches!(config.layout.as_str(), "coco17" | "generic") {
        config.layout = base.join(&config.layout).to_string_lossy().into_owned();
    }
    let out = args.out.clone().unwrap_or_else(|| base.join(&config.out));
    config.out = out.clone();
    config.train.seed = seed.wrapping_add(2);
    config.train.validate().map_err(|e| config_err(e.to_string()))?;
    config.model.validate().map_err(|e| config_err(e.to_string()))?;
    if let Some(s) = &config.synth {
        s.validate().map_err(|e| config_err(e.to_string()))?;
    }
    // where results are written does not change what they are
    let mut hashed = config.clone();
    hashed.out = PathBuf::new();
    let canonical = serde_json::to_string(&hashed).expect("config serializes");
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    Ok(Resolved { config, seed, out, hash })
}

fn load_layout(cfg: &RunConfig) -> anyhow::Result<JointLayout> {
    let layout = match cfg.layout.as_str() {
        "coco17" => JointLayout::coco17(),
        "generic" => JointLayout::unnamed(cfg.model.joints),
        path => JointLayout::load(Path::new(path)).map_err(|e| config_err(format!("layout: {e}")))?,
    };
    if layout.num_joints() != cfg.model.joints {
        return Err(config_err(format!(
            "layout: {} joints, but model.joints = {}",
            layout.num_joints(),
            cfg.model.joints
        )));
    }
    Ok(layout)
}

fn load_data(run: &Resolved, layout: &JointLayout) -> anyhow::Result<Dataset> {
    let cfg = &run.config;
    let (mut data, from_file) = match (&cfg.data, &cfg.synth) {
        (Some(path), None) => (load_keypoints(path)?, true),
        (None, Some(synth)) => (generate_synthetic(synth, run.seed)?, false),
        _ => unreachable!("checked when parsing"),
    };
    let m = &cfg.model;
    if let Some(s) = data.sequences.first() {
        let (t, v, c) = s.shape();
        if (t, v, c) != (m.frames, m.joints, m.channels) {
            return Err(config_err(format!(
                "model: data has (frames, joints, channels) = ({t}, {v}, {c}), model expects ({}, {}, {})",
                m.frames, m.joints, m.channels
            )));
        }
    }
    if cfg.normalize.unwrap_or(from_file) {
        for s in &mut data.sequences {
            *s = normalize_sequence(s, layout)?;
        }
    }
    Ok(data)
}

fn select(run: &Resolved, data: &Dataset, choice: SplitChoice) -> anyhow::Result<Dataset> {
    if choice == SplitChoice::All {
        return Ok(data.clone());
    }
    let split = split_by_subject(data, run.config.test_fraction, run.seed)?;
    Ok(match choice {
        SplitChoice::Train => data.subset(&split.train),
        _ => data.subset(&split.test),
    })
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

pub fn cmd_synth(args: &CommonArgs) -> anyhow::Result<()> {
    let run = resolve(args)?;
    let Some(synth) = &run.config.synth else {
        return Err(config_err("synth: the synth command needs a `[synth]` section"));
    };
    let data = generate_synthetic(synth, run.seed)?;
    create_out(&run.out)?;
    let path = run.out.join(SYNTH_FILE);
    write_keypoints(&data, &path)?;
    let [n0, n1] = data.label_counts();
    println!("wrote {} sequences ({n0} class 0, {n1} class 1) to {}", data.len(), path.display());
    Ok(())
}

/// The layout and the train/test datasets a run config describes.
pub fn load_split(run: &Resolved) -> anyhow::Result<(JointLayout, Dataset, Dataset)> {
    let layout = load_layout(&run.config)?;
    let data = load_data(run, &layout)?;
    let split = split_by_subject(&data, run.config.test_fraction, run.seed)?;
    Ok((layout, data.subset(&split.train), data.subset(&split.test)))
}

pub fn cmd_train(args: &CommonArgs) -> anyhow::Result<()> {
    let run = resolve(args)?;
    let (layout, train_set, test_set) = load_split(&run)?;
    let model = Model::new(run.config.model.clone(), layout, run.model_seed())?;
    let outcome = train(model, &train_set, &test_set, &run.config.train)?;
    create_out(&run.out)?;
    Checkpoint::from_model(&outcome.best, &run.hash, run.seed).save(&run.out.join(CHECKPOINT_FILE))?;
    write_text(&run.out.join(METRICS_FILE), &history_csv(&outcome.history))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "trained {} epochs on {} sequences; best epoch {} test_acc {} mean_edges {}",
        outcome.history.len(),
        train_set.len(),
        outcome.best_epoch,
        best.test_acc,
        best.mean_edges
    );
    Ok(())
}

fn load_checkpoint(run: &Resolved, path: Option<&PathBuf>) -> anyhow::Result<Model> {
    let path = path.cloned().unwrap_or_else(|| run.out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    if ck.config_hash != run.hash {
        eprintln!("warning: checkpoint was trained with a different config (hash {})", ck.config_hash);
    }
    Ok(ck.into_model()?)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let run = resolve(&args.common)?;
    let model = load_checkpoint(&run, args.checkpoint.as_ref())?;
    let data = load_data(&run, &model.layout)?;
    let data = select(&run, &data, args.split)?;
    let metrics = evaluate(&model, &data)?;
    create_out(&run.out)?;
    write_text(&run.out.join(PREDICTIONS_FILE), &metrics.predictions_csv())?;
    let class = |c: Option<f64>| c.map_or("n/a".to_string(), |a| a.to_string());
    println!("instances {}", data.len());
    println!("accuracy {}", metrics.accuracy);
    println!("class0_accuracy {}", class(metrics.per_class_accuracy[0]));
    println!("class1_accuracy {}", class(metrics.per_class_accuracy[1]));
    println!("mean_edges {}", metrics.mean_edges);
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(config_err(format!("threshold: {} is outside [0, 1]", args.threshold)));
    }
    let run = resolve(&args.eval.common)?;
    let model = load_checkpoint(&run, args.eval.checkpoint.as_ref())?;
    let data = load_data(&run, &model.layout)?;
    let data = select(&run, &data, args.eval.split)?;
    let freq = edge_frequency(&data, &model)?;
    create_out(&run.out)?;
    let layout = &model.layout;
    let named = [("pooled", &freq.pooled), ("class0", &freq.per_class[0]), ("class1", &freq.per_class[1])];
    for (name, m) in named {
        if m.instances() == 0 {
            continue;
        }
        write_text(&run.out.join(format!("graph_{name}.dot")), &m.to_dot(layout, args.threshold)?)?;
        write_text(&run.out.join(format!("freq_{name}.csv")), &m.to_csv(layout)?)?;
    }
    let baseline = build_anatomy_graph(layout)?;
    let diff = diff_graphs(&freq.pooled, &baseline, args.threshold)?;
    write_text(&run.out.join("diff_anatomy.csv"), &diff.to_csv(layout))?;
    println!(
        "{} instances; edges >= {}: {} ({} added, {} removed, {} kept vs anatomy)",
        freq.pooled.instances(),
        args.threshold,
        diff.added.len() + diff.kept.len(),
        diff.added.len(),
        diff.removed.len(),
        diff.kept.len()
    );
    Ok(())
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
