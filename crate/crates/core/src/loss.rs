//! Bounded losses on probability vectors and their loss-to-error bounds.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Cross-entropy clipped to `[0, B]`.
    TruncatedCe,
    /// Squared Euclidean distance between the prediction and the one-hot target.
    Squared,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::TruncatedCe => "truncated_ce",
            LossKind::Squared => "squared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "truncated_ce" | "ce" => Ok(LossKind::TruncatedCe),
            "squared" => Ok(LossKind::Squared),
            other => Err(Error::Parameter(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Truncation bound for cross-entropy.
    pub bound: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::TruncatedCe,
            bound: 30.0,
        }
    }
}

impl LossConfig {
    pub fn truncated_ce(bound: f64) -> Self {
        Self {
            kind: LossKind::TruncatedCe,
            bound,
        }
    }

    pub fn squared() -> Self {
        Self {
            kind: LossKind::Squared,
            bound: 30.0,
        }
    }

    /// The truncation bound must cover `log K` for every arity the loss sees.
    pub fn check_arity(&self, k: usize) -> Result<()> {
        if self.kind == LossKind::TruncatedCe && self.bound < (k as f64).ln() {
            return Err(Error::Parameter(format!(
                "truncation bound {} is below log({k})",
                self.bound
            )));
        }
        Ok(())
    }

    /// Upper bound of the loss.
    pub fn max_value(&self) -> f64 {
        match self.kind {
            LossKind::TruncatedCe => self.bound,
            LossKind::Squared => 2.0,
        }
    }
}

pub fn loss_value(cfg: &LossConfig, probs: &[f64], target: usize) -> f64 {
    match cfg.kind {
        LossKind::TruncatedCe => {
            let p = probs[target];
            if p <= 0.0 {
                cfg.bound
            } else {
                (-p.ln()).min(cfg.bound)
            }
        }
        LossKind::Squared => probs
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let d = p - if k == target { 1.0 } else { 0.0 };
                d * d
            })
            .sum(),
    }
}

/// Gradient of the loss with respect to the logits feeding `probs`.
///
/// `active[k] == false` marks logits fixed at minus infinity; those
/// coordinates get zero gradient. In the truncated region of cross-entropy
/// the gradient is zero.
pub fn logit_grad(cfg: &LossConfig, probs: &[f64], target: usize, out: &mut [f64]) {
    match cfg.kind {
        LossKind::TruncatedCe => {
            let p = probs[target];
            if p <= 0.0 || -p.ln() > cfg.bound {
                out.iter_mut().for_each(|g| *g = 0.0);
                return;
            }
            for (k, (g, &pk)) in out.iter_mut().zip(probs).enumerate() {
                *g = pk - if k == target { 1.0 } else { 0.0 };
            }
        }
        LossKind::Squared => {
            // d/dz_j sum_k (p_k - e_k)^2 = 2 p_j [(p_j - e_j) - sum_k (p_k - e_k) p_k]
            let inner: f64 = probs
                .iter()
                .enumerate()
                .map(|(k, &pk)| (pk - if k == target { 1.0 } else { 0.0 }) * pk)
                .sum();
            for (k, (g, &pk)) in out.iter_mut().zip(probs).enumerate() {
                let e = if k == target { 1.0 } else { 0.0 };
                *g = 2.0 * pk * ((pk - e) - inner);
            }
        }
    }
}

/// Bound on the misclassification indicator implied by a loss value.
pub fn error_upper_bound(cfg: &LossConfig, loss: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Parameter(format!("error bound needs K >= 2, got {k}")));
    }
    let k = k as f64;
    Ok(match cfg.kind {
        LossKind::TruncatedCe => loss / k.ln(),
        LossKind::Squared => loss * k / (k - 1.0),
    })
}

/// Bound on the misclassification indicator from the fact that a wrong
/// argmax leaves the target at most half the mass: `loss / log 2` for
/// truncated cross-entropy, `2 * loss` for squared loss. Valid for every `K`.
pub fn two_way_error_bound(cfg: &LossConfig, loss: f64) -> f64 {
    match cfg.kind {
        LossKind::TruncatedCe => loss / std::f64::consts::LN_2,
        LossKind::Squared => 2.0 * loss,
    }
}
