//! Focal loss, weighted binary cross-entropy, the auxiliary cross-entropy
//! and their multi-task combination.
//!
//! Probability-facing functions define the semantics; the `*_logits`
//! variants are what training uses. They work in log-space from the logit
//! and also return the gradient with respect to each logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, log_softmax, sigmoid, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainLossKind {
    Focal,
    WeightedBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub w_main: f64,
    pub main_loss: MainLossKind,
    /// Per-class weights for weighted BCE; uniform when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub aux_class_weights: Option<[f64; 2]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            gamma: 3.0,
            w_main: 0.9,
            main_loss: MainLossKind::Focal,
            class_weights: None,
            aux_class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        check_focal_params(self.alpha, self.gamma)?;
        if !(0.0..=1.0).contains(&self.w_main) {
            return Err(Error::Config(format!(
                "w_main must lie in [0, 1], got {}",
                self.w_main
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != classes {
                return Err(Error::Config(format!(
                    "{} class weights for {classes} classes",
                    w.len()
                )));
            }
            check_weights(w)?;
        }
        if let Some(w) = &self.aux_class_weights {
            check_weights(w)?;
        }
        Ok(())
    }
}

fn check_focal_params(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(bad) => Err(Error::Config(format!("class weights must be positive, got {bad}"))),
        None => Ok(()),
    }
}

fn check_prob(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{a} predictions for {b} targets")))
    }
}

/// A loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `FL(p_t) = −α (1 − p_t)^γ ln p_t`, with `p_t = p` for a positive target
/// and `1 − p` otherwise.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> Result<f64> {
    check_prob(p)?;
    check_focal_params(alpha, gamma)?;
    let pt = if target { p } else { 1.0 - p };
    Ok(-alpha * (1.0 - pt).powf(gamma) * pt.ln())
}

/// Focal loss of one logit and its derivative with respect to that logit.
pub fn focal_loss_logit(z: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let sign = if target { 1.0 } else { -1.0 };
    let u = sign * z;
    let log_pt = log_sigmoid(u);
    let log_qt = log_sigmoid(-u);
    let modulation = (gamma * log_qt).exp();
    let value = -alpha * modulation * log_pt;
    // d/du of −α(1−p)^γ ln p with p = σ(u)
    let pt = sigmoid(u);
    let du = alpha * modulation * (gamma * pt * log_pt - sigmoid(-u));
    (value, sign * du)
}

/// Mean over classes of the per-class focal loss.
pub fn focal_loss_multi(probs: &[f64], targets: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    check_lengths(probs.len(), targets.len())?;
    if probs.is_empty() {
        return Err(Error::Shape("no classes".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        total += focal_loss(p, y, alpha, gamma)?;
    }
    Ok(total / probs.len() as f64)
}

/// `−y ln p − (1−y) ln(1−p)`
pub fn bce(p: f64, target: bool) -> Result<f64> {
    check_prob(p)?;
    Ok(if target { -p.ln() } else { -(1.0 - p).ln() })
}

/// Mean over classes of `weight_c · BCE(p_c, y_c)`.
pub fn weighted_bce(probs: &[f64], targets: &[bool], class_weights: &[f64]) -> Result<f64> {
    check_lengths(probs.len(), targets.len())?;
    check_lengths(probs.len(), class_weights.len())?;
    check_weights(class_weights)?;
    if probs.is_empty() {
        return Err(Error::Shape("no classes".into()));
    }
    let mut total = 0.0;
    for ((&p, &y), &w) in probs.iter().zip(targets).zip(class_weights) {
        total += w * bce(p, y)?;
    }
    Ok(total / probs.len() as f64)
}

/// Mean main-task loss over the classes selected by `mask` (all when
/// `None`), computed from logits.
pub fn main_loss_logits(
    logits: &[f64],
    targets: &[bool],
    mask: Option<&[bool]>,
    config: &LossConfig,
) -> Result<LossGrad> {
    check_lengths(logits.len(), targets.len())?;
    if let Some(m) = mask {
        check_lengths(logits.len(), m.len())?;
    }
    let included = |c: usize| mask.is_none_or(|m| m[c]);
    let n = (0..logits.len()).filter(|&c| included(c)).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for (c, (&z, &y)) in logits.iter().zip(targets).enumerate() {
        if !included(c) {
            continue;
        }
        let (v, g) = match config.main_loss {
            MainLossKind::Focal => focal_loss_logit(z, y, config.alpha, config.gamma),
            MainLossKind::WeightedBce => {
                let w = config.class_weights.as_ref().map_or(1.0, |w| w[c]);
                let log_p = if y { log_sigmoid(z) } else { log_sigmoid(-z) };
                let yv = if y { 1.0 } else { 0.0 };
                (-w * log_p, w * (sigmoid(z) - yv))
            }
        };
        value += v * scale;
        grad[c] = g * scale;
    }
    Ok(LossGrad { value, grad })
}

/// Weighted negative log-likelihood of the target under `softmax(logits)`.
pub fn aux_cross_entropy(logits: &[f64], target: usize, weights: Option<&[f64; 2]>) -> Result<LossGrad> {
    if logits.len() != 2 || target > 1 {
        return Err(Error::Shape(format!(
            "auxiliary branch expects 2 logits and target 0/1, got {} logits and target {target}",
            logits.len()
        )));
    }
    let w = weights.map_or(1.0, |w| w[target]);
    let value = -w * log_softmax(logits)[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= w);
    Ok(LossGrad { value, grad })
}

/// `w_main · L_main + (1 − w_main) · L_aux`
pub fn mtl_loss(l_main: f64, l_aux: f64, w_main: f64) -> f64 {
    w_main * l_main + (1.0 - w_main) * l_aux
}

/// Per-class weights proportional to inverse positive frequency,
/// normalised to mean 1. Classes without positives count as one positive.
pub fn inverse_frequency_weights(positives: &[usize], total: usize) -> Result<Vec<f64>> {
    if total == 0 || positives.is_empty() {
        return Err(Error::Data("cannot derive class weights from an empty split".into()));
    }
    let raw: Vec<f64> = positives
        .iter()
        .map(|&n| total as f64 / n.max(1) as f64)
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
