//! Training objectives over a batch of student probabilities and weak targets. Every
//! loss reports its mean value and the gradient of that mean with respect to the logits;
//! hardened and product targets are constants for differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to [EPS, 1 − EPS] before taking logs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error("batch lengths disagree: {preds} predictions, {targets} targets")]
    Misaligned { preds: usize, targets: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    NaiveCe,
    ConfidenceAux,
    ProductConfidence,
    EntropyAux,
    L2Aux,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::NaiveCe => "naive_ce",
            LossVariant::ConfidenceAux => "confidence_aux",
            LossVariant::ProductConfidence => "product_confidence",
            LossVariant::EntropyAux => "entropy_aux",
            LossVariant::L2Aux => "l2_aux",
        }
    }

    pub fn uses_alpha(&self) -> bool {
        matches!(
            self,
            LossVariant::ConfidenceAux | LossVariant::EntropyAux | LossVariant::L2Aux
        )
    }
}

fn default_warmup() -> f64 {
    0.2
}

fn default_threshold_fraction() -> f64 {
    0.5
}

fn default_large_ratio() -> f64 {
    16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub variant: LossVariant,
    /// `None` picks 0.75 when the strong/weak compute ratio reaches `large_ratio`, else 0.5.
    #[serde(default)]
    pub alpha_max: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_threshold_fraction")]
    pub threshold_fraction: f64,
    /// Use the batch mean of the hardened weak labels as the threshold fraction.
    #[serde(default)]
    pub adaptive_prior: bool,
    #[serde(default = "default_large_ratio")]
    pub large_ratio: f64,
}

impl LossSpec {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            alpha_max: None,
            warmup_fraction: default_warmup(),
            threshold_fraction: default_threshold_fraction(),
            adaptive_prior: false,
            large_ratio: default_large_ratio(),
        }
    }

    pub fn naive() -> Self {
        Self::new(LossVariant::NaiveCe)
    }

    pub fn confidence() -> Self {
        Self::new(LossVariant::ConfidenceAux)
    }

    pub fn with_alpha_max(mut self, alpha_max: f64) -> Self {
        self.alpha_max = Some(alpha_max);
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if let Some(a) = self.alpha_max {
            if !(0.0..=1.0).contains(&a) {
                return Err(LossError::InvalidSpec(format!("alpha_max {a} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(LossError::InvalidSpec(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(LossError::InvalidSpec(format!(
                "threshold_fraction {} outside (0, 1)",
                self.threshold_fraction
            )));
        }
        if self.large_ratio.is_nan() || self.large_ratio <= 0.0 {
            return Err(LossError::InvalidSpec("large_ratio must be positive".into()));
        }
        Ok(())
    }

    /// α_max for a student whose compute proxy is `ratio` times the supervisor's.
    pub fn alpha_max_for(&self, ratio: f64) -> f64 {
        self.alpha_max
            .unwrap_or(if ratio >= self.large_ratio { 0.75 } else { 0.5 })
    }

    /// Copy with α_max pinned for the given compute ratio.
    pub fn resolved(&self, ratio: f64) -> LossSpec {
        let mut s = self.clone();
        s.alpha_max = Some(self.alpha_max_for(ratio));
        s
    }

    pub fn schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            alpha_max: self.alpha_max_for(1.0),
            warmup_fraction: self.warmup_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub warmup_fraction: f64,
}

impl AlphaSchedule {
    /// α at `progress` ∈ [0, 1] of training; a zero warmup jumps straight to α_max.
    pub fn alpha(&self, progress: f64) -> f64 {
        if self.warmup_fraction <= 0.0 {
            return self.alpha_max;
        }
        self.alpha_max * (progress.max(0.0) / self.warmup_fraction).min(1.0)
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// −[t·ln p + (1 − t)·ln(1 − p)], prediction first, target second.
pub fn soft_cross_entropy(pred: f64, target: f64) -> f64 {
    let p = clamp(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Binary entropy in nats.
pub fn entropy(p: f64) -> f64 {
    soft_cross_entropy(p, p)
}

/// Hardens the top ⌊fraction × n⌋ probabilities to 1 (ties by ascending index) and returns
/// the smallest hardened-to-1 probability as the cut value (+∞ when nothing is hardened).
pub fn adaptive_threshold(probs: &[f64], fraction: f64) -> (f64, Vec<u8>) {
    let count = ((fraction * probs.len() as f64) + 1e-9).floor() as usize;
    let count = count.min(probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut hard = vec![0u8; probs.len()];
    for &i in &order[..count] {
        hard[i] = 1;
    }
    let t = if count == 0 {
        f64::INFINITY
    } else {
        probs[order[count - 1]]
    };
    (t, hard)
}

/// Weighted-sum form: mean of (1 − α)·CE(p, w) + α·CE(p, ĥ).
pub fn confidence_loss(preds: &[f64], weak: &[f64], alpha: f64, threshold_fraction: f64) -> f64 {
    let (_, hard) = adaptive_threshold(preds, threshold_fraction);
    mean(
        preds.iter().zip(weak).zip(&hard).map(|((&p, &w), &h)| {
            (1.0 - alpha) * soft_cross_entropy(p, w) + alpha * soft_cross_entropy(p, f64::from(h))
        }),
    )
}

/// Mixed-target form: mean of CE(p, (1 − α)·w + α·ĥ).
pub fn confidence_loss_mixed_target(preds: &[f64], weak: &[f64], alpha: f64, threshold_fraction: f64) -> f64 {
    let (_, hard) = adaptive_threshold(preds, threshold_fraction);
    mean(
        preds
            .iter()
            .zip(weak)
            .zip(&hard)
            .map(|((&p, &w), &h)| soft_cross_entropy(p, (1.0 - alpha) * w + alpha * f64::from(h))),
    )
}

/// Normalized product of student and weak probabilities for class 1. The second value is
/// true when the normalizer fell below 1e-12 and was clamped.
pub fn product_target(p: f64, w: f64) -> (f64, bool) {
    let num = p * w;
    let den = num + (1.0 - p) * (1.0 - w);
    if den < 1e-12 {
        (num / 1e-12, true)
    } else {
        (num / den, false)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Entropy aux term H(p) and its derivative with respect to the logit.
pub fn entropy_aux(p: f64) -> (f64, f64) {
    let q = clamp(p);
    (entropy(q), q * (1.0 - q) * ((1.0 - q) / q).ln())
}

/// L2 aux term −(p − 0.5)² and its derivative with respect to the logit.
pub fn l2_aux(p: f64) -> (f64, f64) {
    (-(p - 0.5).powi(2), -2.0 * (p - 0.5) * p * (1.0 - p))
}

/// Value and per-example logit gradient of a batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub dlogits: Vec<f64>,
    /// Examples whose product target had a degenerate normalizer.
    pub degenerate_targets: usize,
}

/// Evaluates `spec` on a batch. `alpha` is the scheduled weight (ignored by variants without
/// one); `preds` are student probabilities; `weak` are targets in [0, 1].
pub fn batch_loss(spec: &LossSpec, preds: &[f64], weak: &[f64], alpha: f64) -> Result<BatchLoss, LossError> {
    if preds.len() != weak.len() {
        return Err(LossError::Misaligned {
            preds: preds.len(),
            targets: weak.len(),
        });
    }
    let n = preds.len().max(1) as f64;
    let mut degenerate = 0;
    let (value, dlogits) = match spec.variant {
        LossVariant::NaiveCe => (
            mean(preds.iter().zip(weak).map(|(&p, &w)| soft_cross_entropy(p, w))),
            preds.iter().zip(weak).map(|(&p, &w)| (p - w) / n).collect(),
        ),
        LossVariant::ConfidenceAux => {
            let fraction = if spec.adaptive_prior {
                mean(weak.iter().map(|&w| f64::from(u8::from(w > 0.5))))
            } else {
                spec.threshold_fraction
            };
            let (_, hard) = adaptive_threshold(preds, fraction);
            let targets: Vec<f64> = weak
                .iter()
                .zip(&hard)
                .map(|(&w, &h)| (1.0 - alpha) * w + alpha * f64::from(h))
                .collect();
            (
                mean(preds.iter().zip(&targets).map(|(&p, &t)| soft_cross_entropy(p, t))),
                preds.iter().zip(&targets).map(|(&p, &t)| (p - t) / n).collect(),
            )
        }
        LossVariant::ProductConfidence => {
            let targets: Vec<f64> = preds
                .iter()
                .zip(weak)
                .map(|(&p, &w)| {
                    let (q, flag) = product_target(p, w);
                    degenerate += usize::from(flag);
                    q.clamp(0.0, 1.0)
                })
                .collect();
            (
                mean(preds.iter().zip(&targets).map(|(&p, &t)| soft_cross_entropy(p, t))),
                preds.iter().zip(&targets).map(|(&p, &t)| (p - t) / n).collect(),
            )
        }
        LossVariant::EntropyAux | LossVariant::L2Aux => {
            let aux = if spec.variant == LossVariant::EntropyAux {
                entropy_aux
            } else {
                l2_aux
            };
            let mut value = 0.0;
            let mut grads = Vec::with_capacity(preds.len());
            for (&p, &w) in preds.iter().zip(weak) {
                let (a, da) = aux(p);
                value += (1.0 - alpha) * soft_cross_entropy(p, w) + alpha * a;
                grads.push(((1.0 - alpha) * (p - w) + alpha * da) / n);
            }
            (value / n, grads)
        }
    };
    Ok(BatchLoss {
        value,
        dlogits,
        degenerate_targets: degenerate,
    })
}
