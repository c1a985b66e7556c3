//! Asymmetric loss with probability shifting, and F1 metrics.
//!
//! For one frame with class probabilities `p` and binary labels `y`:
//!
//! ```text
//! L+  = (1 - p)^g+ * ln p
//! p_m = max(p - m, 0)
//! L-  = p_m^g- * ln(1 - p_m)
//! L   = -(1/C) * sum_i [ y_i L+_i + (1 - y_i) L-_i ]
//! ```
//!
//! Probabilities are clamped to `[eps, 1 - eps]` before any logarithm. The
//! returned gradient is evaluated at the clamped value (straight through the
//! clamp). At the `p = m` kink the subgradient is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub clamp_eps: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            margin: 0.05,
            clamp_eps: 1e-8,
        }
    }
}

impl AslConfig {
    /// Plain binary cross-entropy.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            ..Self::default()
        }
    }

    /// Symmetric focal loss without shifting.
    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma_pos: gamma,
            gamma_neg: gamma,
            margin: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma_pos, self.gamma_neg, self.margin, self.clamp_eps]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= self.gamma_pos) {
            return Err(Error::Config(format!(
                "need gamma_neg >= gamma_pos >= 0, got gamma_pos={} gamma_neg={}",
                self.gamma_pos, self.gamma_neg
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps {} outside (0, 0.5)", self.clamp_eps)));
        }
        Ok(())
    }
}

/// `x^g` with `0^0 = 1`.
fn powg(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

/// `g * x^(g-1)`, zero when `g = 0`.
fn dpowg(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else if g == 1.0 {
        1.0
    } else {
        g * x.powf(g - 1.0)
    }
}

/// Unnormalized loss term and its derivative for one probability.
fn term(p: f64, y: f64, cfg: &AslConfig) -> (f64, f64) {
    let p = p.clamp(cfg.clamp_eps, 1.0 - cfg.clamp_eps);
    if y == 1.0 {
        let q = 1.0 - p;
        let lp = p.ln();
        let loss = -powg(q, cfg.gamma_pos) * lp;
        let grad = dpowg(q, cfg.gamma_pos) * lp - powg(q, cfg.gamma_pos) / p;
        (loss, grad)
    } else {
        let pm = p - cfg.margin;
        if pm <= 0.0 {
            return (0.0, 0.0);
        }
        let l1 = (-pm).ln_1p();
        let loss = -powg(pm, cfg.gamma_neg) * l1;
        let grad = -dpowg(pm, cfg.gamma_neg) * l1 + powg(pm, cfg.gamma_neg) / (1.0 - pm);
        (loss, grad)
    }
}

fn check_frame(probs: &[f64], labels: &[f64]) -> Result<()> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(
            "asl_loss",
            format!("{} probabilities vs {} labels", probs.len(), labels.len()),
        ));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("label {y} is not binary")));
    }
    Ok(())
}

/// Loss of one frame and its gradient with respect to `probs`.
pub fn asl_loss(probs: &[f64], labels: &[f64], cfg: &AslConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_frame(probs, labels)?;
    let inv_c = 1.0 / probs.len() as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let (l, g) = term(p, y, cfg);
            loss += l;
            g * inv_c
        })
        .collect();
    Ok((loss * inv_c, grad))
}

/// Mean loss over `frames` rows of logits `[frames, C]`; returns the gradient
/// with respect to the logits.
pub fn asl_loss_logits(logits: &[f64], labels: &[f64], classes: usize, cfg: &AslConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if classes == 0 || logits.len() != labels.len() || logits.len() % classes != 0 {
        return Err(Error::shape(
            "asl_loss_logits",
            format!("{} logits, {} labels, {classes} classes", logits.len(), labels.len()),
        ));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logit {z}")));
    }
    let frames = logits.len() / classes;
    let scale = 1.0 / (frames * classes) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument(format!("label {y} is not binary")));
        }
        let p = sigmoid(z);
        let (l, g) = term(p, y, cfg);
        loss += l;
        grad.push(g * p * (1.0 - p) * scale);
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

/// Per-class F1 `2TP / (2TP + FP + FN)` (0 when undefined) and their mean.
pub fn f1_scores(probs: &[f64], labels: &[f64], classes: usize, threshold: f64) -> Result<F1Report> {
    if classes == 0 || probs.len() != labels.len() || probs.len() % classes != 0 {
        return Err(Error::shape(
            "f1_scores",
            format!(
                "{} predictions, {} labels, {classes} classes",
                probs.len(),
                labels.len()
            ),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (row_p, row_y) in probs.chunks_exact(classes).zip(labels.chunks_exact(classes)) {
        for c in 0..classes {
            match (row_p[c] >= threshold, row_y[c] >= 0.5) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fn_[c];
            if den == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / den as f64
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / classes as f64;
    Ok(F1Report {
        per_class,
        macro_f1,
        tp,
        fp,
        fn_,
    })
}
