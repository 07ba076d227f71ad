//! Command-line front end: `synth`, `train`, `eval`, `report`, `gradcheck`.
//!
//! Settings come from built-in defaults, then an optional `--config` file
//! (TOML or JSON), then command-line flags, each layer overriding the last.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{class_counts, generate_synthetic, parse_keypoint_file, write_keypoint_file, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{friedman_test, BootstrapConfig, BootstrapReport, FriedmanReport, MetricsReport};
use crate::experiment::{evaluate_variants, prepare_training_data, train_runs, ExperimentConfig, RunKey, Variant};
use crate::gradsuite::run_suite;
use crate::graph::{build_hand_graph, graph_dump, partition_adjacency, Handedness};
use crate::numeric::OpKind;
use crate::risk::RiskMode;
use crate::streams::StreamKind;
use crate::training::{load_checkpoint, save_checkpoint, write_log, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "pulsar", version, about = "Finger-tapping screening with adaptive graph convolution and PU risk")]
pub struct Cli {
    /// TOML or JSON file with `synth` and `experiment` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic keypoint dataset (JSON lines).
    Synth(SynthArgs),
    /// Train the stream models of one variant.
    Train(TrainArgs),
    /// Score trained variants on a test set, with participant bootstrap.
    Eval(EvalArgs),
    /// Friedman and Holm tests across evaluated variants, or a graph dump.
    Report(ReportArgs),
    /// Finite-difference check of every primitive and both block modes.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
    /// Shape the set like a held-out test cohort (182 participants, 83 PD-like).
    #[arg(long)]
    pub test_pool: bool,
    /// Hidden-positive fraction of the PD-like sequences.
    #[arg(long)]
    pub contamination: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training pool; 20% of its participants are held out for validation.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "PULSAR")]
    pub variant: Variant,
    /// Output directory; the variant's files land in `<out>/<VARIANT>/`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Positive class prior.
    #[arg(long)]
    pub prior: Option<f64>,
    /// Objective of PU variants: pu (unbiased) or pu-nn (non-negative).
    #[arg(long)]
    pub risk_mode: Option<RiskMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Concurrent stream trainings (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test set with ground-truth labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Variant directories written by `train`.
    #[arg(long = "models", required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// Participants per replicate and replicate count, as `NxR`.
    #[arg(long)]
    pub bootstrap: Option<BootstrapSpec>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `eval.json` files; their variants are pooled into one comparison.
    #[arg(num_args = 0..)]
    pub inputs: Vec<PathBuf>,
    /// Dump the hand graph and its partition instead.
    #[arg(long)]
    pub graph: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupt one primitive's adjoint to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `--bootstrap NxR`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootstrapSpec {
    pub participants: usize,
    pub reps: usize,
}

impl std::str::FromStr for BootstrapSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bootstrap spec `{s}` is not NxR with positive integers"));
        let (n, r) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let (participants, reps) = (n.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?);
        if participants == 0 || reps == 0 {
            return Err(bad());
        }
        Ok(BootstrapSpec { participants, reps })
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub experiment: ExperimentConfig,
}

/// Reads a config file and lays it over [`FileConfig::default`] key by key,
/// so a partial table keeps the remaining defaults of its parent.
pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let file: serde_json::Value =
        if is_json { serde_json::from_str(&text).map_err(|e| bad(&e))? } else { toml::from_str(&text).map_err(|e| bad(&e))? };
    let mut merged = serde_json::to_value(FileConfig::default())?;
    overlay(&mut merged, file);
    serde_json::from_value(merged).map_err(|e| bad(&e))
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// What `train` leaves next to the checkpoints so `eval` can find them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub variant: Variant,
    pub runs: Vec<PlanEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub run: RunKey,
    pub checkpoint: String,
    pub log: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Per-variant block of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEval {
    pub variant: Variant,
    pub fused: MetricsReport,
    pub streams: Vec<(StreamKind, MetricsReport)>,
    pub bootstrap: BootstrapReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub clips: usize,
    pub participants: usize,
    pub bootstrap: BootstrapConfig,
    pub variants: Vec<VariantEval>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

/// Runs a parsed command line, writing the human-readable summary to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(file, cli.seed, a, out),
        Command::Train(a) => cmd_train(file, cli.seed, a, out),
        Command::Eval(a) => cmd_eval(file, cli.seed, a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(cli.seed.unwrap_or(0), a, out),
    }
}

pub fn cmd_synth(file: FileConfig, seed: Option<u64>, a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = file.synth;
    if a.test_pool {
        let base = SynthConfig::test_pool(cfg.seed);
        cfg = SynthConfig { n_healthy: base.n_healthy, n_pd: base.n_pd, id_prefix: base.id_prefix, ..cfg };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = a.contamination {
        cfg.contamination = c;
    }
    let seqs = generate_synthetic(&cfg)?;
    write_keypoint_file(&a.out, &seqs)?;
    let c = class_counts(&seqs);
    writeln!(out, "wrote {} sequences to {}", seqs.len(), a.out.display())?;
    writeln!(out, "labeled positive {:>4}", c.labeled_positive)?;
    writeln!(out, "hidden positive  {:>4}", c.hidden_positive)?;
    writeln!(out, "negative         {:>4}", c.negative)?;
    Ok(())
}

fn experiment_config(file: &FileConfig, seed: Option<u64>) -> ExperimentConfig {
    let mut cfg = file.experiment.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.bootstrap.seed = s;
    }
    cfg
}

pub fn cmd_train(file: FileConfig, seed: Option<u64>, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = experiment_config(&file, seed);
    if let Some(p) = a.prior {
        cfg.prior = p;
    }
    if let Some(m) = a.risk_mode {
        cfg.pu_mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    if a.variant.pu() && cfg.pu_mode == RiskMode::Pn {
        return Err(Error::Config(format!("{} trains a PU objective; risk mode pn is not allowed", a.variant)));
    }
    let seqs = parse_keypoint_file(&a.data)?;
    let data = prepare_training_data(&seqs, &cfg)?;
    let runs = a.variant.runs();
    let models = train_runs(&runs, &cfg, &data)?;

    let dir = a.out.join(a.variant.name());
    create_dir(&dir)?;
    let mut plan = TrainPlan { variant: a.variant, runs: Vec::new() };
    writeln!(out, "{:<26} {:>5} {:>8}", "run", "best", "val acc")?;
    for key in runs {
        let ck = &models[&key];
        let stem = key.stream.name();
        save_checkpoint(ck, dir.join(format!("{stem}.ckpt")))?;
        let mut log = Vec::new();
        write_log(&ck.history, &mut log)?;
        fs::write(dir.join(format!("{stem}.log.jsonl")), log)?;
        writeln!(out, "{:<26} {:>5} {:>8.3}", key.to_string(), ck.best_epoch, ck.best_val_accuracy)?;
        plan.runs.push(PlanEntry {
            run: key,
            checkpoint: format!("{stem}.ckpt"),
            log: format!("{stem}.log.jsonl"),
            best_epoch: ck.best_epoch,
            best_val_accuracy: ck.best_val_accuracy,
        });
    }
    write_json(&dir.join("plan.json"), &plan)?;
    writeln!(out, "wrote {} checkpoint(s) to {}", plan.runs.len(), dir.display())?;
    Ok(())
}

fn load_plan(dir: &Path) -> Result<(TrainPlan, Vec<(RunKey, Checkpoint)>)> {
    let path = dir.join("plan.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("missing {}: {e}", path.display())))?;
    let plan: TrainPlan = serde_json::from_str(&text)?;
    let models = plan
        .runs
        .iter()
        .map(|r| Ok((r.run, load_checkpoint(dir.join(&r.checkpoint))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, models))
}

pub fn cmd_eval(file: FileConfig, seed: Option<u64>, a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = experiment_config(&file, seed);
    let mut boot = cfg.bootstrap;
    if let Some(b) = a.bootstrap {
        boot.participants = b.participants;
        boot.reps = b.reps;
    }
    let mut variants = Vec::new();
    let mut models = std::collections::BTreeMap::new();
    for dir in &a.models {
        let (plan, loaded) = load_plan(dir)?;
        if variants.contains(&plan.variant) {
            return Err(Error::Config(format!("variant {} given twice", plan.variant)));
        }
        variants.push(plan.variant);
        models.extend(loaded);
    }
    let test = parse_keypoint_file(&a.data)?;
    if test.iter().any(|s| s.true_label.is_none()) {
        return Err(Error::Data(format!("{}: evaluation needs ground-truth labels on every sequence", a.data.display())));
    }
    let (results, _, clips, participants) = evaluate_variants(&variants, &models, &test, &boot)?;
    let truth_classes = test.iter().filter_map(|s| s.true_label).collect::<std::collections::BTreeSet<_>>().len();
    if truth_classes < 2 {
        writeln!(out, "warning: the test set holds a single class, AUROC omitted")?;
    }
    let report = EvalFile {
        clips,
        participants,
        bootstrap: boot,
        variants: results
            .into_iter()
            .map(|r| VariantEval { variant: r.variant, fused: r.metrics, streams: r.stream_metrics, bootstrap: r.bootstrap })
            .collect(),
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    let mut csv = String::from("variant,stream,accuracy,precision,recall,macro_f1,weighted_f1,auroc\n");
    let row = |v: &str, s: &str, m: &MetricsReport| {
        let auc = m.auroc.map_or(String::new(), |x| format!("{x:.6}"));
        format!("{v},{s},{:.6},{:.6},{:.6},{:.6},{:.6},{auc}\n", m.accuracy, m.precision, m.recall, m.macro_f1, m.weighted_f1)
    };
    for v in &report.variants {
        csv.push_str(&row(v.variant.name(), "fused", &v.fused));
        for (s, m) in &v.streams {
            csv.push_str(&row(v.variant.name(), s.name(), m));
        }
    }
    fs::write(a.out.join("metrics.csv"), csv)?;

    writeln!(out, "{clips} clips from {participants} participants; bootstrap {}x{}", boot.participants, boot.reps)?;
    writeln!(out, "{:<9} {:<13} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "variant", "stream", "acc", "prec", "rec", "F1m", "F1w", "AUC")?;
    for v in &report.variants {
        let print = |out: &mut dyn Write, s: &str, m: &MetricsReport| {
            writeln!(
                out,
                "{:<9} {:<13} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6}",
                v.variant.name(),
                s,
                m.accuracy,
                m.precision,
                m.recall,
                m.macro_f1,
                m.weighted_f1,
                m.auroc.map_or("-".into(), |x| format!("{x:.3}"))
            )
        };
        print(out, "fused", &v.fused)?;
        if v.streams.len() > 1 {
            for (s, m) in &v.streams {
                print(out, s.name(), m)?;
            }
        }
        writeln!(out, "{:<9} bootstrap accuracy {:.3} ± {:.3}", "", v.bootstrap.accuracy.mean, v.bootstrap.accuracy.std)?;
    }
    Ok(())
}

/// Friedman/Holm comparison of the bootstrap accuracies in eval files.
pub fn friedman_from_evals(files: &[EvalFile]) -> Result<FriedmanReport> {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for f in files {
        for v in &f.variants {
            if columns.iter().any(|(n, _)| n == v.variant.name()) {
                return Err(Error::Data(format!("variant {} appears in more than one input", v.variant)));
            }
            columns.push((v.variant.name().to_string(), v.bootstrap.accuracies()));
        }
    }
    let reps = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != reps) {
        return Err(Error::Data("inputs differ in bootstrap replicate count".into()));
    }
    let names: Vec<String> = columns.iter().map(|c| c.0.clone()).collect();
    let matrix: Vec<Vec<f64>> = (0..reps).map(|i| columns.iter().map(|c| c.1[i]).collect()).collect();
    friedman_test(&matrix, &names)
}

pub fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let json = if a.graph {
        let graph = build_hand_graph(Handedness::Right);
        let adjacency = partition_adjacency(&graph, Default::default());
        serde_json::to_string_pretty(&graph_dump(&graph, &adjacency))?
    } else {
        if a.inputs.is_empty() {
            return Err(Error::Config("report needs eval.json inputs or --graph".into()));
        }
        let files = a
            .inputs
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
                Ok(serde_json::from_str::<EvalFile>(&text)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = friedman_from_evals(&files)?;
        writeln!(out, "Friedman chi2 = {:.4} with {} df, p = {:.4e} ({} replicates)", report.statistic, report.df, report.p_value, report.replicates)?;
        writeln!(out, "{:<9} {:>9}", "variant", "mean rank")?;
        for (m, r) in report.models.iter().zip(&report.average_ranks) {
            writeln!(out, "{m:<9} {r:>9.3}")?;
        }
        writeln!(out, "pairwise Holm-adjusted p-values:")?;
        for c in &report.pairwise {
            writeln!(out, "  {:<9} vs {:<9} z {:>7.3}  p {:.4e}  holm {:.4e}", c.a, c.b, c.z, c.p_value, c.p_holm)?;
        }
        let mut value = serde_json::to_value(&report)?;
        value["holm_matrix"] = serde_json::to_value(report.holm_matrix())?;
        serde_json::to_string_pretty(&value)?
    };
    match a.out {
        Some(path) => {
            fs::write(&path, json + "\n")?;
            writeln!(out, "wrote {}", path.display())?;
        }
        None => writeln!(out, "{json}")?,
    }
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown primitive `{name}` (one of {})", known.join(", ")))
        })?),
    };
    let report = run_suite(seed, fault)?;
    writeln!(out, "{:<32} {:>12} {:>12} {:>7}  result", "case", "max rel err", "max abs err", "coords")?;
    for c in &report.cases {
        writeln!(
            out,
            "{:<32} {:>12.3e} {:>12.3e} {:>7}  {}",
            c.name,
            c.max_rel_err,
            c.max_abs_err,
            c.checked,
            if c.passed { "ok" } else { "FAIL" }
        )?;
    }
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    if report.passed() {
        writeln!(out, "all {} cases within {:e}", report.cases.len(), report.tolerance)?;
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", report.failures().join(", "))))
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock())
}
