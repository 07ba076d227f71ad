//! The five-variant ablation: single joint-stream models with or without
//! PU risk and adaptive adjacency, and the four-stream fused model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment_all, prepare_clips, split_by_participant, Clip, ClipSet, KeypointSequence, CLIP_FRAMES,
};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_eval, compute_metrics, friedman_test, fuse_streams, BootstrapConfig, BootstrapReport, FriedmanReport, MetricsReport};
use crate::network::ModelConfig;
use crate::risk::RiskMode;
use crate::streams::StreamKind;
use crate::training::{train_stream, Checkpoint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "JS")]
    Js,
    #[serde(rename = "JS_PU")]
    JsPu,
    #[serde(rename = "JS_AC")]
    JsAc,
    #[serde(rename = "JS_AC_PU")]
    JsAcPu,
    #[serde(rename = "PULSAR")]
    Pulsar,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Js, Variant::JsPu, Variant::JsAc, Variant::JsAcPu, Variant::Pulsar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Js => "JS",
            Variant::JsPu => "JS_PU",
            Variant::JsAc => "JS_AC",
            Variant::JsAcPu => "JS_AC_PU",
            Variant::Pulsar => "PULSAR",
        }
    }

    pub fn adaptive(self) -> bool {
        matches!(self, Variant::JsAc | Variant::JsAcPu | Variant::Pulsar)
    }

    pub fn pu(self) -> bool {
        matches!(self, Variant::JsPu | Variant::JsAcPu | Variant::Pulsar)
    }

    pub fn streams(self) -> &'static [StreamKind] {
        match self {
            Variant::Pulsar => &StreamKind::ALL,
            _ => &[StreamKind::Joint],
        }
    }

    /// One training run per stream of this variant.
    pub fn runs(self) -> Vec<RunKey> {
        self.streams().iter().map(|&stream| RunKey { adaptive: self.adaptive(), pu: self.pu(), stream }).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == up)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected JS, JS_PU, JS_AC, JS_AC_PU or PULSAR)")))
    }
}

/// Identity of one stream model. Variants that agree on all three fields
/// share the trained model (the fused model reuses the adaptive PU joint one).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub adaptive: bool,
    pub pu: bool,
    pub stream: StreamKind,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arch = if self.adaptive { "adaptive" } else { "baseline" };
        let risk = if self.pu { "pu" } else { "pn" };
        write!(f, "{arch}-{risk}-{}", self.stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Template for every run; stream, risk mode, prior and adjacency are
    /// filled in per run.
    pub train: TrainConfig,
    pub val_fraction: f64,
    /// Flip-augment the training clips fourfold.
    pub augment: bool,
    /// Objective of the PU variants.
    pub pu_mode: RiskMode,
    /// Positive class prior of every run, PN and PU alike.
    pub prior: f64,
    pub bootstrap: BootstrapConfig,
    /// Concurrent training runs; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig { lr: 1e-3, ..TrainConfig::default() },
            val_fraction: 0.2,
            augment: true,
            pu_mode: RiskMode::PuNonneg,
            prior: 0.5,
            bootstrap: BootstrapConfig::default(),
            threads: 0,
        }
    }
}

/// Training and validation clips cut from a labeled pool.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

pub fn prepare_training_data(seqs: &[KeypointSequence], cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train_seqs, val_seqs) = split_by_participant(seqs, cfg.val_fraction, cfg.train.seed)?;
    let (train, _) = prepare_clips(&train_seqs, CLIP_FRAMES);
    let (val, _) = prepare_clips(&val_seqs, CLIP_FRAMES);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("{} training and {} validation clips; both must be non-empty", train.len(), val.len())));
    }
    let train = if cfg.augment { augment_all(&train) } else { train };
    Ok(PreparedData { train, val })
}

/// Fully specified training config of one run.
pub fn run_config(key: RunKey, cfg: &ExperimentConfig) -> (ModelConfig, TrainConfig) {
    let mut train = cfg.train.clone();
    train.stream = key.stream;
    train.risk.mode = if key.pu { cfg.pu_mode } else { RiskMode::Pn };
    train.risk.theta_p = cfg.prior;
    (ModelConfig { adaptive: key.adaptive, ..cfg.model.clone() }, train)
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Trains each distinct run once, `threads` at a time. Runs are independent
/// and individually seeded, so the results do not depend on scheduling.
pub fn train_runs(keys: &[RunKey], cfg: &ExperimentConfig, data: &PreparedData) -> Result<BTreeMap<RunKey, Checkpoint>> {
    let mut unique: Vec<RunKey> = keys.to_vec();
    unique.sort();
    unique.dedup();
    let mut sets: BTreeMap<StreamKind, (ClipSet, ClipSet)> = BTreeMap::new();
    for k in &unique {
        if !sets.contains_key(&k.stream) {
            sets.insert(k.stream, (ClipSet::from_clips(&data.train, k.stream)?, ClipSet::from_clips(&data.val, k.stream)?));
        }
    }
    let jobs: Vec<(RunKey, ModelConfig, TrainConfig)> = unique
        .iter()
        .map(|&k| {
            let (m, t) = run_config(k, cfg);
            (k, m, t)
        })
        .collect();
    let workers = worker_count(cfg.threads, jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(RunKey, Result<Checkpoint>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some((key, model, train)) = jobs.get(i) else { break };
                        let (tr, va) = &sets[&key.stream];
                        done.push((*key, train_stream(model, tr, va, train)));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
    });
    results.into_iter().map(|(k, r)| r.map(|c| (k, c))).collect()
}

/// Per-clip logits of every stream model of a variant plus their fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: Variant,
    pub per_stream: Vec<(StreamKind, Vec<f64>)>,
    pub fused: Vec<f64>,
}

/// Eval-mode logits of one checkpoint over test clips.
pub fn score_clips(ckpt: &Checkpoint, clips: &[Clip]) -> Result<Vec<f64>> {
    let set = ClipSet::from_clips(clips, ckpt.train.stream)?;
    ckpt.network::<f64>()?.predict(&set.all(), 64)
}

pub fn score_variant(variant: Variant, models: &BTreeMap<RunKey, Checkpoint>, clips: &[Clip]) -> Result<VariantScores> {
    let per_stream = variant
        .runs()
        .into_iter()
        .map(|k| {
            let ck = models.get(&k).ok_or_else(|| Error::Config(format!("{variant}: no trained model for {k}")))?;
            Ok((k.stream, score_clips(ck, clips)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_streams(&per_stream.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>())?;
    Ok(VariantScores { variant, per_stream, fused })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Direct evaluation on every test clip against ground truth.
    pub metrics: MetricsReport,
    pub stream_metrics: Vec<(StreamKind, MetricsReport)>,
    pub bootstrap: BootstrapReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub theta_p: f64,
    pub mode: RiskMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunSummary>,
    pub variants: Vec<VariantResult>,
    pub friedman: FriedmanReport,
    pub test_clips: usize,
    pub test_participants: usize,
    pub seconds: f64,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Evaluates trained variants on a test pool: direct metrics, participant
/// bootstrap on shared resamples, and the Friedman test on bootstrap accuracies.
pub fn evaluate_variants(
    variants: &[Variant],
    models: &BTreeMap<RunKey, Checkpoint>,
    test: &[KeypointSequence],
    bootstrap: &BootstrapConfig,
) -> Result<(Vec<VariantResult>, Option<FriedmanReport>, usize, usize)> {
    let (clips, _) = prepare_clips(test, CLIP_FRAMES);
    if clips.is_empty() {
        return Err(Error::Data("test set yields no clips".into()));
    }
    let truth: Vec<bool> = clips.iter().map(Clip::truth).collect();
    let ids: Vec<String> = clips.iter().map(|c| c.participant_id.clone()).collect();
    let scores = variants.iter().map(|&v| score_variant(v, models, &clips)).collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, Vec<f64>)> = scores.iter().map(|s| (s.variant.name().to_string(), s.fused.clone())).collect();
    let boots = bootstrap_eval(&ids, &truth, &named, bootstrap)?;
    let results = scores
        .iter()
        .zip(boots)
        .map(|(s, b)| {
            Ok(VariantResult {
                variant: s.variant,
                metrics: compute_metrics(&s.fused, &truth)?,
                stream_metrics: s.per_stream.iter().map(|(k, l)| Ok((*k, compute_metrics(l, &truth)?))).collect::<Result<_>>()?,
                bootstrap: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let friedman = if results.len() >= 2 && bootstrap.reps >= 2 {
        let names: Vec<String> = results.iter().map(|r| r.variant.name().to_string()).collect();
        let matrix: Vec<Vec<f64>> =
            (0..bootstrap.reps).map(|i| results.iter().map(|r| r.bootstrap.replicates[i].accuracy).collect()).collect();
        Some(friedman_test(&matrix, &names)?)
    } else {
        None
    };
    let participants = {
        let mut p = ids.clone();
        p.sort();
        p.dedup();
        p.len()
    };
    Ok((results, friedman, clips.len(), participants))
}

/// Trains every variant on `pool` and evaluates on `test`.
pub fn run_ablation(pool: &[KeypointSequence], test: &[KeypointSequence], cfg: &ExperimentConfig) -> Result<AblationReport> {
    let start = Instant::now();
    let data = prepare_training_data(pool, cfg)?;
    let keys: Vec<RunKey> = Variant::ALL.iter().flat_map(|v| v.runs()).collect();
    let models = train_runs(&keys, cfg, &data)?;
    let runs = models
        .iter()
        .map(|(k, c)| RunSummary {
            run: k.to_string(),
            best_epoch: c.best_epoch,
            best_val_accuracy: c.best_val_accuracy,
            theta_p: c.train.risk.theta_p,
            mode: c.train.risk.mode,
        })
        .collect();
    let (variants, friedman, test_clips, test_participants) = evaluate_variants(&Variant::ALL, &models, test, &cfg.bootstrap)?;
    Ok(AblationReport {
        runs,
        variants,
        friedman: friedman.ok_or_else(|| Error::Config("Friedman test needs at least 2 bootstrap replicates".into()))?,
        test_clips,
        test_participants,
        seconds: start.elapsed().as_secs_f64(),
    })
}
