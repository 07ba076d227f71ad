use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub participants: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { participants: 120, reps: 20, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single replicate.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub model: String,
    pub replicates: Vec<MetricsReport>,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub macro_f1: MetricSummary,
    pub weighted_f1: MetricSummary,
    /// Over the replicates where AUROC is defined.
    pub auroc: Option<MetricSummary>,
}

impl BootstrapReport {
    fn from_replicates(model: String, replicates: Vec<MetricsReport>) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| summarize(&replicates.iter().map(f).collect::<Vec<_>>());
        let aucs: Vec<f64> = replicates.iter().filter_map(|r| r.auroc).collect();
        BootstrapReport {
            model,
            accuracy: pick(|r| r.accuracy),
            precision: pick(|r| r.precision),
            recall: pick(|r| r.recall),
            macro_f1: pick(|r| r.macro_f1),
            weighted_f1: pick(|r| r.weighted_f1),
            auroc: (!aucs.is_empty()).then(|| summarize(&aucs)),
            replicates,
        }
    }

    /// Per-replicate accuracies, one column of the Friedman matrix.
    pub fn accuracies(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.accuracy).collect()
    }
}

fn summarize(xs: &[f64]) -> MetricSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    MetricSummary { mean, std }
}

/// Seed of replicate `rep`, a SplitMix64 step away from the master seed so
/// replicates can be drawn in any order.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clip indices of each replicate: participants drawn with replacement,
/// every clip of a drawn participant included once per draw.
pub fn bootstrap_indices(participants: &[String], cfg: &BootstrapConfig) -> Result<Vec<Vec<usize>>> {
    if participants.is_empty() {
        return Err(Error::Data("bootstrap: empty test set".into()));
    }
    if cfg.participants == 0 || cfg.reps == 0 {
        return Err(Error::Config("bootstrap needs at least one participant and one replicate".into()));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, p) in participants.iter().enumerate() {
        match ids.iter().position(|q| q == p) {
            Some(g) => groups[g].push(i),
            None => {
                ids.push(p);
                groups.push(vec![i]);
            }
        }
    }
    Ok((0..cfg.reps)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(cfg.seed, rep));
            (0..cfg.participants).flat_map(|_| groups[rng.gen_range(0..groups.len())].iter().copied()).collect()
        })
        .collect())
}

/// Participant bootstrap of several scorers over the same resamples, so the
/// per-replicate accuracies line up for a Friedman test.
pub fn bootstrap_eval(
    participants: &[String],
    truth: &[bool],
    models: &[(String, Vec<f64>)],
    cfg: &BootstrapConfig,
) -> Result<Vec<BootstrapReport>> {
    if truth.len() != participants.len() {
        return Err(Error::Data(format!("{} labels for {} clips", truth.len(), participants.len())));
    }
    if let Some((name, s)) = models.iter().find(|(_, s)| s.len() != truth.len()) {
        return Err(Error::Data(format!("model {name}: {} scores for {} clips", s.len(), truth.len())));
    }
    let draws = bootstrap_indices(participants, cfg)?;
    models
        .iter()
        .map(|(name, scores)| {
            let reps = draws
                .iter()
                .map(|idx| {
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    let t: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
                    compute_metrics(&s, &t)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BootstrapReport::from_replicates(name.clone(), reps))
        })
        .collect()
}
