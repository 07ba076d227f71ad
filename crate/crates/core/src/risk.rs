//! Margin losses and the PN / unbiased PU / non-negative PU empirical risks.
//!
//! Scores are real-valued classifier outputs `g(x)`; the decision is their
//! sign. Every estimator also returns its gradient with respect to the
//! scores so it can close a tape through [`crate::numeric::Tape::scalar_fn`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    /// `1 / (1 + e^m)`, bounded in (0, 1).
    #[default]
    Sigmoid,
    /// `ln(1 + e^-m)`.
    Logistic,
}

impl FromStr for BaseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(BaseLoss::Sigmoid),
            "logistic" => Ok(BaseLoss::Logistic),
            other => Err(Error::Config(format!("unknown base loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Positive vs negative; unlabeled data counts as negative.
    Pn,
    PuUnbiased,
    #[default]
    PuNonneg,
}

impl RiskMode {
    pub fn is_pu(self) -> bool {
        self != RiskMode::Pn
    }

    pub fn tag(self) -> &'static str {
        match self {
            RiskMode::Pn => "pn",
            RiskMode::PuUnbiased => "pu_unbiased",
            RiskMode::PuNonneg => "pu_nonneg",
        }
    }
}

impl fmt::Display for RiskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Accepts the config spellings and the short command-line ones
/// (`pn`, `pu`, `pu-nn`).
impl FromStr for RiskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn" => Ok(RiskMode::Pn),
            "pu" | "pu_unbiased" | "pu-unbiased" => Ok(RiskMode::PuUnbiased),
            "pu-nn" | "pu_nonneg" | "pu-nonneg" => Ok(RiskMode::PuNonneg),
            other => Err(Error::Config(format!("unknown risk mode `{other}` (expected pn, pu or pu-nn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub base_loss: BaseLoss,
    /// Positive class prior; the negative prior is `1 - theta_p`.
    pub theta_p: f64,
    pub mode: RiskMode,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig { base_loss: BaseLoss::Sigmoid, theta_p: 0.5, mode: RiskMode::PuNonneg }
    }
}

impl RiskConfig {
    pub fn theta_n(&self) -> f64 {
        1.0 - self.theta_p
    }

    /// PN accepts a prior in `[0, 1]`; the PU estimators need `(0, 1)`.
    pub fn validate(&self) -> Result<()> {
        let ok = if self.mode.is_pu() {
            self.theta_p > 0.0 && self.theta_p < 1.0
        } else {
            (0.0..=1.0).contains(&self.theta_p)
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("class prior {} out of range for {} risk", self.theta_p, self.mode)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub total: f64,
    pub positive_term: f64,
    pub unlabeled_or_negative_term: f64,
    /// Non-negative PU only: the max(0, .) bound was active.
    pub clamped: bool,
}

/// Risk value plus its gradient with respect to each score.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskGrad {
    pub breakdown: RiskBreakdown,
    pub grad_positive: Vec<f64>,
    pub grad_other: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn base_loss(m: f64, kind: BaseLoss) -> f64 {
    match kind {
        BaseLoss::Sigmoid => sigmoid(-m),
        BaseLoss::Logistic => softplus(-m),
    }
}

/// `d loss / d m`.
pub fn base_loss_derivative(m: f64, kind: BaseLoss) -> f64 {
    match kind {
        BaseLoss::Sigmoid => -sigmoid(m) * sigmoid(-m),
        BaseLoss::Logistic => -sigmoid(-m),
    }
}

/// `l(m) - l(-m)`, an odd function of the margin.
pub fn composite_loss(m: f64, kind: BaseLoss) -> f64 {
    match kind {
        // written without cancellation: 1 - 2 sigmoid(m)
        BaseLoss::Sigmoid => sigmoid(-m) - sigmoid(m),
        BaseLoss::Logistic => -m,
    }
}

fn mean(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
}

fn non_empty(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Data(format!("{name} score set is empty")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "risk" });
    }
    Ok(())
}

/// `theta_p * mean_P l(g) + theta_n * mean_N l(-g)`.
pub fn risk_pn(scores_p: &[f64], scores_n: &[f64], cfg: &RiskConfig) -> Result<RiskBreakdown> {
    Ok(risk_pn_grad(scores_p, scores_n, cfg)?.breakdown)
}

/// The unbiased or non-negative PU risk, per `cfg.mode`.
pub fn risk_pu(scores_p: &[f64], scores_u: &[f64], cfg: &RiskConfig) -> Result<RiskBreakdown> {
    Ok(risk_pu_grad(scores_p, scores_u, cfg)?.breakdown)
}

/// Dispatches on `cfg.mode`; `other` holds negatives (PN) or unlabeled scores (PU).
pub fn risk(scores_p: &[f64], other: &[f64], cfg: &RiskConfig) -> Result<RiskGrad> {
    if cfg.mode.is_pu() {
        risk_pu_grad(scores_p, other, cfg)
    } else {
        risk_pn_grad(scores_p, other, cfg)
    }
}

pub fn risk_pn_grad(scores_p: &[f64], scores_n: &[f64], cfg: &RiskConfig) -> Result<RiskGrad> {
    non_empty("positive", scores_p)?;
    non_empty("negative", scores_n)?;
    let RiskConfig { base_loss: k, theta_p, .. } = *cfg;
    if !(0.0..=1.0).contains(&theta_p) {
        return Err(Error::Config(format!("class prior {theta_p} outside [0, 1]")));
    }
    let theta_n = cfg.theta_n();
    let (np, nn) = (scores_p.len() as f64, scores_n.len() as f64);
    let pos = theta_p * mean(scores_p, |g| base_loss(g, k));
    let neg = theta_n * mean(scores_n, |g| base_loss(-g, k));
    Ok(RiskGrad {
        breakdown: RiskBreakdown { total: pos + neg, positive_term: pos, unlabeled_or_negative_term: neg, clamped: false },
        grad_positive: scores_p.iter().map(|&g| theta_p / np * base_loss_derivative(g, k)).collect(),
        grad_other: scores_n.iter().map(|&g| -theta_n / nn * base_loss_derivative(-g, k)).collect(),
    })
}

pub fn risk_pu_grad(scores_p: &[f64], scores_u: &[f64], cfg: &RiskConfig) -> Result<RiskGrad> {
    non_empty("positive", scores_p)?;
    non_empty("unlabeled", scores_u)?;
    let RiskConfig { base_loss: k, theta_p, mode } = *cfg;
    if !(theta_p > 0.0 && theta_p < 1.0) {
        return Err(Error::Config(format!("class prior {theta_p} outside (0, 1)")));
    }
    let (np, nu) = (scores_p.len() as f64, scores_u.len() as f64);
    let unl = mean(scores_u, |g| base_loss(-g, k));
    let grad_u = |active: bool| -> Vec<f64> {
        scores_u.iter().map(|&g| if active { -base_loss_derivative(-g, k) / nu } else { 0.0 }).collect()
    };
    match mode {
        RiskMode::PuNonneg => {
            let pos = theta_p * mean(scores_p, |g| base_loss(g, k));
            let inner = unl - theta_p * mean(scores_p, |g| base_loss(-g, k));
            let clamped = inner < 0.0;
            let neg = inner.max(0.0);
            // gradient of the objective as written: the clamped branch is flat
            let grad_positive = scores_p
                .iter()
                .map(|&g| {
                    let own = base_loss_derivative(g, k);
                    let corr = if clamped { 0.0 } else { base_loss_derivative(-g, k) };
                    theta_p / np * (own + corr)
                })
                .collect();
            Ok(RiskGrad {
                breakdown: RiskBreakdown { total: pos + neg, positive_term: pos, unlabeled_or_negative_term: neg, clamped },
                grad_positive,
                grad_other: grad_u(!clamped),
            })
        }
        _ => {
            let pos = theta_p * mean(scores_p, |g| composite_loss(g, k));
            Ok(RiskGrad {
                breakdown: RiskBreakdown { total: pos + unl, positive_term: pos, unlabeled_or_negative_term: unl, clamped: false },
                grad_positive: scores_p
                    .iter()
                    .map(|&g| theta_p / np * (base_loss_derivative(g, k) + base_loss_derivative(-g, k)))
                    .collect(),
                grad_other: grad_u(true),
            })
        }
    }
}
