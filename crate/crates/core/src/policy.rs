//! Transfer policies: which masked positions to commit after a forward pass,
//! and the per-token criterion used to accept speculated tokens against a
//! verifier's predictions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{argmax_of, DenoiserOutput};
use crate::trace::DecodeTrace;
use crate::vocab::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("tau must lie strictly between 0 and 1, got {0}")]
    Tau(f64),
    #[error("anchor_tau must lie strictly between 0 and 1, got {0}")]
    AnchorTau(f64),
    #[error("no masked positions to select from")]
    NothingMasked,
    #[error("predictions do not cover masked position {0}")]
    MissingPrediction(usize),
    #[error("no position clears the threshold at step {0}")]
    Stalled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy,
    #[default]
    Confidence,
    /// Anchor-and-window variant in the spirit of local determinism propagation.
    #[serde(rename = "localleap")]
    LocalLeap,
}

impl PolicyKind {
    pub fn id(self) -> &'static str {
        match self {
            PolicyKind::Greedy => "greedy",
            PolicyKind::Confidence => "confidence",
            PolicyKind::LocalLeap => "localleap-style",
        }
    }
}

/// What to do when a thresholded policy selects nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    Top1,
    StallError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Anchor threshold for the local-window policy; defaults to `tau`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_tau: Option<f64>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub fallback: Fallback,
}

fn default_tau() -> f64 {
    0.9
}

fn default_window() -> usize {
    1
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::confidence(default_tau())
    }
}

impl PolicyConfig {
    pub fn greedy() -> Self {
        Self {
            kind: PolicyKind::Greedy,
            ..Self::confidence(default_tau())
        }
    }

    pub fn confidence(tau: f64) -> Self {
        Self {
            kind: PolicyKind::Confidence,
            tau,
            anchor_tau: None,
            window: default_window(),
            fallback: Fallback::Top1,
        }
    }

    pub fn local_leap(tau: f64, window: usize) -> Self {
        Self {
            kind: PolicyKind::LocalLeap,
            window,
            ..Self::confidence(tau)
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(PolicyError::Tau(self.tau));
        }
        if let Some(a) = self.anchor_tau {
            if !(a > 0.0 && a < 1.0) {
                return Err(PolicyError::AnchorTau(a));
            }
        }
        Ok(())
    }

    pub fn anchor_threshold(&self) -> f64 {
        self.anchor_tau.unwrap_or(self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferDecision {
    /// Ascending positions to commit.
    pub selected: Vec<usize>,
    pub policy_id: &'static str,
    pub step: usize,
}

/// A validated transfer policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferPolicy {
    cfg: PolicyConfig,
}

impl TransferPolicy {
    pub fn new(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn kind(&self) -> PolicyKind {
        self.cfg.kind
    }

    /// Choose positions to commit among `masked` given one forward pass.
    pub fn select(
        &self,
        masked: &[usize],
        preds: &DenoiserOutput,
        step: usize,
    ) -> Result<TransferDecision, PolicyError> {
        if masked.is_empty() {
            return Err(PolicyError::NothingMasked);
        }
        let mut sorted: Vec<usize> = masked.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let confs = sorted
            .iter()
            .map(|&i| {
                preds
                    .get(i)
                    .map(|p| p.confidence)
                    .ok_or(PolicyError::MissingPrediction(i))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let top1 = || {
            let best = argmax_of(sorted.iter().map(|&i| preds.get(i).expect("checked above")))
                .expect("non-empty");
            vec![best.position]
        };

        let selected = match self.cfg.kind {
            PolicyKind::Greedy => top1(),
            PolicyKind::Confidence => {
                let hits: Vec<usize> = sorted
                    .iter()
                    .zip(&confs)
                    .filter(|(_, &c)| c >= self.cfg.tau)
                    .map(|(&i, _)| i)
                    .collect();
                self.or_fallback(hits, top1, step)?
            }
            PolicyKind::LocalLeap => {
                let anchor_tau = self.cfg.anchor_threshold();
                let w = self.cfg.window;
                let mut chosen = BTreeSet::new();
                for (idx, _) in confs.iter().enumerate().filter(|(_, &c)| c >= anchor_tau) {
                    let lo = idx.saturating_sub(w);
                    let hi = (idx + w).min(sorted.len() - 1);
                    chosen.extend(sorted[lo..=hi].iter().copied());
                }
                self.or_fallback(chosen.into_iter().collect(), top1, step)?
            }
        };
        Ok(TransferDecision {
            selected,
            policy_id: self.cfg.kind.id(),
            step,
        })
    }

    fn or_fallback(
        &self,
        hits: Vec<usize>,
        top1: impl FnOnce() -> Vec<usize>,
        step: usize,
    ) -> Result<Vec<usize>, PolicyError> {
        if !hits.is_empty() {
            return Ok(hits);
        }
        match self.cfg.fallback {
            Fallback::Top1 => Ok(top1()),
            Fallback::StallError => Err(PolicyError::Stalled(step)),
        }
    }

    /// Whether `speculated` at `position` is endorsed by the parent draft's
    /// verifier output.
    pub fn accepts(&self, speculated: TokenId, position: usize, parent: &DenoiserOutput) -> bool {
        let Some(pred) = parent.get(position) else {
            return false;
        };
        if pred.token != speculated {
            return false;
        }
        match self.cfg.kind {
            PolicyKind::Confidence | PolicyKind::LocalLeap => pred.confidence >= self.cfg.tau,
            PolicyKind::Greedy => parent.argmax().map(|b| b.position) == Some(position),
        }
    }
}

/// Mean number of positions committed per spatial step.
pub fn mean_reveal_rate(trace: &DecodeTrace) -> Option<f64> {
    let steps = trace.iterations.len();
    if steps == 0 {
        return None;
    }
    let total: usize = trace.iterations.iter().map(|it| it.spatial.len()).sum();
    Some(total as f64 / steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Prediction;

    fn out(entries: &[(usize, f64)]) -> DenoiserOutput {
        DenoiserOutput::new(
            entries.iter().map(|&(position, confidence)| Prediction {
                position,
                token: position as TokenId,
                confidence,
            }),
            0,
        )
    }

    fn with_tokens(entries: &[(usize, TokenId, f64)]) -> DenoiserOutput {
        DenoiserOutput::new(
            entries.iter().map(|&(position, token, confidence)| Prediction {
                position,
                token,
                confidence,
            }),
            0,
        )
    }

    #[test]
    fn confidence_thresholding() {
        let p = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let o = out(&[(2, 0.95), (5, 0.50), (7, 0.92)]);
        assert_eq!(p.select(&[2, 5, 7], &o, 0).unwrap().selected, vec![2, 7]);
    }

    #[test]
    fn greedy_argmax() {
        let p = TransferPolicy::new(PolicyConfig::greedy()).unwrap();
        let o = out(&[(2, 0.3), (5, 0.7), (7, 0.5)]);
        assert_eq!(p.select(&[2, 5, 7], &o, 0).unwrap().selected, vec![5]);
    }

    #[test]
    fn top1_fallback_leftmost() {
        let p = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let o = out(&[(2, 0.5), (5, 0.5), (7, 0.5)]);
        assert_eq!(p.select(&[2, 5, 7], &o, 0).unwrap().selected, vec![2]);

        let mut strict = PolicyConfig::confidence(0.9);
        strict.fallback = Fallback::StallError;
        let p = TransferPolicy::new(strict).unwrap();
        assert_eq!(p.select(&[2, 5, 7], &o, 3), Err(PolicyError::Stalled(3)));
    }

    #[test]
    fn local_leap_window_uses_masked_neighbours() {
        let p = TransferPolicy::new(PolicyConfig::local_leap(0.9, 1)).unwrap();
        let o = out(&[(3, 0.2), (5, 0.95), (6, 0.3), (9, 0.1)]);
        assert_eq!(p.select(&[3, 5, 6, 9], &o, 0).unwrap().selected, vec![3, 5, 6]);
    }

    #[test]
    fn missing_prediction_and_empty_mask() {
        let p = TransferPolicy::new(PolicyConfig::greedy()).unwrap();
        let o = out(&[(2, 0.3)]);
        assert_eq!(p.select(&[2, 4], &o, 0), Err(PolicyError::MissingPrediction(4)));
        assert_eq!(p.select(&[], &o, 0), Err(PolicyError::NothingMasked));
    }

    #[test]
    fn acceptance_criterion() {
        let p = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        assert!(p.accepts(1, 4, &with_tokens(&[(4, 1, 0.93)])));
        assert!(!p.accepts(1, 4, &with_tokens(&[(4, 1, 0.85)])));
        assert!(!p.accepts(1, 4, &with_tokens(&[(4, 2, 0.99)])));
        assert!(!p.accepts(1, 5, &with_tokens(&[(4, 1, 0.99)])));

        let g = TransferPolicy::new(PolicyConfig::greedy()).unwrap();
        let parent = with_tokens(&[(4, 1, 0.6), (6, 2, 0.6), (8, 3, 0.4)]);
        assert!(g.accepts(1, 4, &parent));
        assert!(!g.accepts(2, 6, &parent), "tie goes to the leftmost position");
        assert!(!g.accepts(3, 8, &parent));
    }

    #[test]
    fn tau_validation() {
        assert_eq!(
            TransferPolicy::new(PolicyConfig::confidence(1.5)).unwrap_err(),
            PolicyError::Tau(1.5)
        );
        assert!(TransferPolicy::new(PolicyConfig::confidence(0.0)).is_err());
        let mut c = PolicyConfig::local_leap(0.9, 2);
        c.anchor_tau = Some(1.0);
        assert!(TransferPolicy::new(c).is_err());
    }
}
