//! Mini-batch training of one stream model under a PN or PU objective.

mod checkpoint;
mod scheduler;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use scheduler::{plateau_step, PlateauConfig, PlateauState};

use crate::data::ClipSet;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, Network};
use crate::numeric::{AdamConfig, AdamState, Real, Tape, Tensor};
use crate::risk::{base_loss, base_loss_derivative, risk, RiskConfig};
use crate::streams::StreamKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: PlateauConfig,
    pub max_epochs: usize,
    pub risk: RiskConfig,
    pub stream: StreamKind,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            scheduler: PlateauConfig::default(),
            max_epochs: 30,
            risk: RiskConfig::default(),
            stream: StreamKind::Joint,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        self.scheduler.validate()?;
        self.risk.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Batch-mean of the objective.
    pub train_risk: f64,
    pub positive_term: f64,
    pub other_term: f64,
    /// Batches where the non-negative correction was active.
    pub clamped_batches: usize,
    /// Batches holding only one side of the label split.
    pub one_sided_batches: usize,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Objective and logit gradient of one batch. A batch holding only
/// positives or only unlabeled clips falls back to the matching term of the
/// PN risk, so every batch still yields one step.
fn batch_objective(logits: &[f64], positive: &[bool], cfg: &RiskConfig) -> Result<(f64, f64, f64, bool, bool, Vec<f64>)> {
    let (mut p, mut o, mut p_idx, mut o_idx) = (vec![], vec![], vec![], vec![]);
    for (i, (&g, &pos)) in logits.iter().zip(positive).enumerate() {
        if pos {
            p.push(g);
            p_idx.push(i);
        } else {
            o.push(g);
            o_idx.push(i);
        }
    }
    let mut grad = vec![0.0; logits.len()];
    if p.is_empty() || o.is_empty() {
        let (scores, sign) = if p.is_empty() { (&o, -1.0) } else { (&p, 1.0) };
        let n = scores.len() as f64;
        let value = scores.iter().map(|&g| base_loss(sign * g, cfg.base_loss)).sum::<f64>() / n;
        for (i, &g) in grad.iter_mut().zip(scores) {
            *i = sign * base_loss_derivative(sign * g, cfg.base_loss) / n;
        }
        let (pt, ot) = if p.is_empty() { (0.0, value) } else { (value, 0.0) };
        return Ok((value, pt, ot, false, true, grad));
    }
    let r = risk(&p, &o, cfg)?;
    for (&i, &g) in p_idx.iter().zip(&r.grad_positive) {
        grad[i] = g;
    }
    for (&i, &g) in o_idx.iter().zip(&r.grad_other) {
        grad[i] = g;
    }
    let b = r.breakdown;
    Ok((b.total, b.positive_term, b.unlabeled_or_negative_term, b.clamped, false, grad))
}

/// Fraction of rows whose logit sign (ties positive) matches `truth`.
pub fn sign_accuracy(logits: &[f64], truth: &[bool]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().zip(truth).filter(|(&g, &t)| (g >= 0.0) == t).count() as f64 / logits.len() as f64
}

fn check_labels(train: &ClipSet, cfg: &TrainConfig) -> Result<()> {
    let pos = train.labeled_positive.iter().filter(|&&p| p).count();
    let other = train.len() - pos;
    let what = if cfg.risk.mode.is_pu() { "unlabeled" } else { "negative" };
    if pos == 0 {
        return Err(Error::Config(format!("{} risk needs positive-labeled training clips, found none", cfg.risk.mode)));
    }
    if other == 0 {
        return Err(Error::Config(format!("{} risk needs {what} training clips, found none", cfg.risk.mode)));
    }
    Ok(())
}

/// Trains a fresh model on `train`, tracks sign accuracy on `val` against
/// its ground truth, and returns the best-validation epoch.
pub fn train_stream(model: &ModelConfig, train: &ClipSet, val: &ClipSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if train.stream != cfg.stream || val.stream != cfg.stream {
        return Err(Error::Config(format!(
            "clips hold the {} / {} stream, config trains {}",
            train.stream, val.stream, cfg.stream
        )));
    }
    check_labels(train, cfg)?;
    match cfg.precision {
        Precision::F32 => train_in::<f32>(model, train, val, cfg),
        Precision::F64 => train_in::<f64>(model, train, val, cfg),
    }
}

fn train_in<F: Real>(model: &ModelConfig, train: &ClipSet, val: &ClipSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut net: Network<F> = Network::new(model.clone(), cfg.seed)?;
    let shapes: Vec<Vec<usize>> = net.params.weights.slots().iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = AdamState::<F>::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        shapes.iter().map(Vec::as_slice),
    )?;
    let mut plateau = PlateauState::new(cfg.lr);
    let val_x: Tensor<F> = val.all();

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, Network<F>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let lr = plateau.lr;
        adam.set_lr(lr);
        let mut rec = EpochRecord {
            epoch,
            steps: 0,
            train_risk: 0.0,
            positive_term: 0.0,
            other_term: 0.0,
            clamped_batches: 0,
            one_sided_batches: 0,
            val_accuracy: 0.0,
            lr,
        };
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new(seed.wrapping_add(b as u64 + 1));
            let x = tape.constant(train.gather(idx));
            let fwd = net.forward(&mut tape, x, true)?;
            let logits = tape.value(fwd.logits).to_f64_vec();
            let positive: Vec<bool> = idx.iter().map(|&i| train.labeled_positive[i]).collect();
            let (total, pt, ot, clamped, one_sided, grad) = batch_objective(&logits, &positive, &cfg.risk)?;
            let grad = Tensor::new([logits.len(), 1], grad.into_iter().map(F::from_f64_lossy).collect())?;
            let loss = tape.scalar_fn(fwd.logits, F::from_f64_lossy(total), grad)?;
            let grads = tape.backward(loss)?;
            let zero: Vec<Tensor<F>> = shapes.iter().map(|s| Tensor::zeros(s.as_slice())).collect();
            let g: Vec<&Tensor<F>> =
                fwd.bound.slots().iter().zip(&zero).map(|(&&v, z)| grads.wrt(v).unwrap_or(z)).collect();
            adam.step(&mut net.params.weights.slots_mut(), &g)?;
            net.update_running(&fwd.batch_stats)?;

            rec.steps += 1;
            rec.train_risk += total;
            rec.positive_term += pt;
            rec.other_term += ot;
            rec.clamped_batches += usize::from(clamped);
            rec.one_sided_batches += usize::from(one_sided);
        }
        let n = rec.steps as f64;
        rec.train_risk /= n;
        rec.positive_term /= n;
        rec.other_term /= n;
        rec.val_accuracy = sign_accuracy(&net.predict(&val_x, cfg.batch_size)?, &val.truth);
        if best.as_ref().map_or(true, |(_, acc, _)| rec.val_accuracy > *acc) {
            best = Some((epoch, rec.val_accuracy, net.clone()));
        }
        plateau_step(&mut plateau, &cfg.scheduler, rec.val_accuracy);
        history.push(rec);
    }
    let (best_epoch, best_val_accuracy, best_net) = best.expect("at least one epoch ran");
    Ok(Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        dtype: F::DTYPE.to_string(),
        params: best_net.cast::<f64>().params,
        history,
        best_epoch,
        best_val_accuracy,
    })
}

/// Writes the history as JSON lines.
pub fn write_log(history: &[EpochRecord], mut out: impl Write) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
