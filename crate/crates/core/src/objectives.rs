//! Training objectives: the frequency-weighted squared error on category
//! scores, the margin squared error and Smooth L1 on continuous dimensions,
//! and their weighted sum.
//!
//! Every loss comes with its gradient with respect to the prediction. Batch
//! losses are means over samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{NUM_CATEGORIES, NUM_DIMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContLoss {
    L2Margin,
    SmoothL1,
}

impl FromStr for ContLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2margin" | "l2" => Ok(ContLoss::L2Margin),
            "smoothl1" | "sl1" => Ok(ContLoss::SmoothL1),
            _ => Err(Error::Config(format!("unknown continuous loss '{s}' (expected L2margin or SmoothL1)"))),
        }
    }
}

impl fmt::Display for ContLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContLoss::L2Margin => "L2margin",
            ContLoss::SmoothL1 => "SmoothL1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_disc: f64,
    pub lambda_cont: f64,
    pub cont_loss: ContLoss,
    /// Weight-bounding constant; must exceed 1.
    pub c: f64,
    /// Margin under which a continuous error is ignored.
    pub theta: f64,
    pub smooth_l1_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_disc: 1.0,
            lambda_cont: 1.0,
            cont_loss: ContLoss::L2Margin,
            c: 1.2,
            theta: 0.1,
            smooth_l1_threshold: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_disc >= 0.0 && self.lambda_disc.is_finite()) {
            return bad(format!("lambda_disc must be >= 0, got {}", self.lambda_disc));
        }
        if !(self.lambda_cont >= 0.0 && self.lambda_cont.is_finite()) {
            return bad(format!("lambda_cont must be >= 0, got {}", self.lambda_cont));
        }
        if !(self.c > 1.0 && self.c.is_finite()) {
            return bad(format!("c must be > 1, got {}", self.c));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be >= 0, got {}", self.theta));
        }
        if !(self.smooth_l1_threshold > 0.0 && self.smooth_l1_threshold.is_finite()) {
            return bad(format!("smooth_l1_threshold must be > 0, got {}", self.smooth_l1_threshold));
        }
        Ok(())
    }
}

/// Per-category weights `1 / ln(c + p_i)` where `p_i` is the share of the
/// batch labeled with category `i`.
pub fn category_weights(batch_targets: &[[f64; NUM_CATEGORIES]], c: f64) -> Result<[f64; NUM_CATEGORIES]> {
    if c.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("c must be > 1, got {c}")));
    }
    if batch_targets.is_empty() {
        return Err(Error::invalid("category weights of an empty batch"));
    }
    let n = batch_targets.len() as f64;
    let mut w = [0.0; NUM_CATEGORIES];
    for (i, wi) in w.iter_mut().enumerate() {
        let p = batch_targets.iter().map(|t| t[i]).sum::<f64>() / n;
        *wi = 1.0 / (c + p).ln();
    }
    Ok(w)
}

/// `sum_i w_i (pred_i - target_i)^2`.
pub fn discrete_loss(pred: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    debug_assert!(pred.len() == target.len() && pred.len() == weights.len());
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum()
}

pub fn discrete_loss_grad(pred: &[f64], target: &[f64], weights: &[f64], grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += weights[i] * d * d;
        grad[i] = 2.0 * weights[i] * d;
    }
    loss
}

/// `sum_k v_k (pred_k - target_k)^2`, `v_k = 0` when the error is below `theta`.
pub fn margin_cont_loss(pred: &[f64], target: &[f64], theta: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < theta {
                0.0
            } else {
                d * d
            }
        })
        .sum()
}

pub fn margin_cont_loss_grad(pred: &[f64], target: &[f64], theta: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for k in 0..pred.len() {
        let d = pred[k] - target[k];
        if d.abs() < theta {
            grad[k] = 0.0;
        } else {
            loss += d * d;
            grad[k] = 2.0 * d;
        }
    }
    loss
}

/// Smooth L1 with knee at `beta`: `0.5 x^2 / beta` inside, `|x| - 0.5 beta`
/// outside. With `beta = 1` this is `0.5 x^2` / `|x| - 0.5`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_deriv(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

pub fn smooth_l1_cont_loss(pred: &[f64], target: &[f64], beta: f64) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1(p - t, beta)).sum()
}

pub fn smooth_l1_cont_loss_grad(pred: &[f64], target: &[f64], beta: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for k in 0..pred.len() {
        let x = pred[k] - target[k];
        loss += smooth_l1(x, beta);
        grad[k] = smooth_l1_deriv(x, beta);
    }
    loss
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub disc: f64,
    pub cont: f64,
}

impl LossParts {
    fn combine(cfg: &LossConfig, disc: f64, cont: f64) -> Self {
        LossParts {
            total: cfg.lambda_disc * disc + cfg.lambda_cont * cont,
            disc,
            cont,
        }
    }
}

pub fn cont_loss(cfg: &LossConfig, pred: &[f64], target: &[f64]) -> f64 {
    match cfg.cont_loss {
        ContLoss::L2Margin => margin_cont_loss(pred, target, cfg.theta),
        ContLoss::SmoothL1 => smooth_l1_cont_loss(pred, target, cfg.smooth_l1_threshold),
    }
}

/// Loss of one sample.
pub fn combined_loss(
    scores: &[f64; NUM_CATEGORIES],
    dims: &[f64; NUM_DIMS],
    target_disc: &[f64; NUM_CATEGORIES],
    target_cont: &[f64; NUM_DIMS],
    cfg: &LossConfig,
    weights: &[f64; NUM_CATEGORIES],
) -> LossParts {
    let disc = discrete_loss(scores, target_disc, weights);
    let cont = cont_loss(cfg, dims, target_cont);
    LossParts::combine(cfg, disc, cont)
}

/// Gradient of a batch-mean loss with respect to each sample's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub parts: LossParts,
    pub grad_scores: Vec<[f64; NUM_CATEGORIES]>,
    pub grad_dims: Vec<[f64; NUM_DIMS]>,
}

/// Mean combined loss over a batch and its gradient. Weights are taken as
/// given (constant with respect to the predictions).
pub fn batch_loss(
    scores: &[[f64; NUM_CATEGORIES]],
    dims: &[[f64; NUM_DIMS]],
    target_disc: &[[f64; NUM_CATEGORIES]],
    target_cont: &[[f64; NUM_DIMS]],
    cfg: &LossConfig,
    weights: &[f64; NUM_CATEGORIES],
) -> BatchLoss {
    let n = scores.len();
    assert!(n > 0 && dims.len() == n && target_disc.len() == n && target_cont.len() == n);
    let inv = 1.0 / n as f64;
    let mut grad_scores = vec![[0.0; NUM_CATEGORIES]; n];
    let mut grad_dims = vec![[0.0; NUM_DIMS]; n];
    let (mut disc, mut cont) = (0.0, 0.0);
    for s in 0..n {
        disc += discrete_loss_grad(&scores[s], &target_disc[s], weights, &mut grad_scores[s]);
        cont += match cfg.cont_loss {
            ContLoss::L2Margin => margin_cont_loss_grad(&dims[s], &target_cont[s], cfg.theta, &mut grad_dims[s]),
            ContLoss::SmoothL1 => {
                smooth_l1_cont_loss_grad(&dims[s], &target_cont[s], cfg.smooth_l1_threshold, &mut grad_dims[s])
            }
        };
        for g in grad_scores[s].iter_mut() {
            *g *= cfg.lambda_disc * inv;
        }
        for g in grad_dims[s].iter_mut() {
            *g *= cfg.lambda_cont * inv;
        }
    }
    BatchLoss {
        parts: LossParts::combine(cfg, disc * inv, cont * inv),
        grad_scores,
        grad_dims,
    }
}
