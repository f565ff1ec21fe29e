//! Synthetic denoiser with controllable confidence geometry.
//!
//! Confidence at a masked position falls linearly with its distance to the
//! nearest decoded token (prompt included), plus a per-position jitter that
//! is frozen across steps unless `drift` is set. Predicted tokens come from a
//! reference sequence, replaced by a seeded wrong token with probability
//! `1 - correctness`. Token errors are drawn per (position, input state), so
//! two different states rarely make the same mistake.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{keyed_rng, keyed_uniform, Denoiser, DenoiserError, Prediction};
use crate::state::SequenceState;
use crate::vocab::{TokenId, Vocabulary};

const SALT_NOISE: u64 = 0x006e_6f69_7365;
const SALT_CORRECT: u64 = 0x636f_7272;
const SALT_WRONG: u64 = 0x0077_726f_6e67;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierOracleConfig {
    /// True tokens by absolute position; positions past the end predict eos.
    pub reference: Vec<TokenId>,
    pub c_max: f64,
    /// Confidence lost per unit of distance from the nearest decoded token.
    pub decay: f64,
    /// Half-width of the uniform jitter added to every confidence.
    pub noise_scale: f64,
    /// Probability that a prediction equals the reference token.
    pub correctness: f64,
    pub floor: f64,
    pub seed: u64,
    /// Re-draw the confidence jitter for every distinct input state.
    #[serde(default)]
    pub drift: bool,
}

impl FrontierOracleConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::InvalidConfig(m.to_string()));
        if !(self.floor > 0.0 && self.floor <= self.c_max && self.c_max <= 1.0) {
            return bad("require 0 < floor <= c_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.correctness) {
            return bad("correctness must lie in [0, 1]");
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad("decay must be a finite non-negative number");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be a finite non-negative number");
        }
        if let Some(&t) = self.reference.iter().find(|&&t| !vocab.is_real(t)) {
            return Err(DenoiserError::InvalidConfig(format!(
                "reference token {t} outside vocabulary"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FrontierOracle {
    cfg: FrontierOracleConfig,
    vocab: Vocabulary,
}

impl FrontierOracle {
    pub fn new(cfg: FrontierOracleConfig, vocab: Vocabulary) -> Result<Self, DenoiserError> {
        cfg.validate(&vocab)?;
        Ok(Self { cfg, vocab })
    }

    pub fn config(&self) -> &FrontierOracleConfig {
        &self.cfg
    }

    fn reference_token(&self, position: usize) -> TokenId {
        self.cfg
            .reference
            .get(position)
            .copied()
            .unwrap_or(self.vocab.eos_id())
    }

    fn draw_keys(&self, salt: u64, position: usize, state: &SequenceState, per_state: bool) -> Vec<u64> {
        let mut keys = vec![self.cfg.seed, salt, position as u64];
        if per_state {
            keys.push(state.fingerprint());
        }
        keys
    }

    fn token_at(&self, state: &SequenceState, position: usize) -> TokenId {
        let truth = self.reference_token(position);
        let u = keyed_uniform(&self.draw_keys(SALT_CORRECT, position, state, true));
        if u < self.cfg.correctness {
            return truth;
        }
        let k = keyed_rng(&self.draw_keys(SALT_WRONG, position, state, true))
            .gen_range(0..self.vocab.size() - 1);
        if k >= truth {
            k + 1
        } else {
            k
        }
    }

    fn jitter(&self, state: &SequenceState, position: usize) -> f64 {
        if self.cfg.noise_scale == 0.0 {
            return 0.0;
        }
        let u = keyed_uniform(&self.draw_keys(SALT_NOISE, position, state, self.cfg.drift));
        self.cfg.noise_scale * (2.0 * u - 1.0)
    }
}

/// Distance from `i` to the nearest non-mask position in either direction.
/// With nothing decoded anywhere, a virtual anchor sits just before position 0.
pub fn frontier_distance(state: &SequenceState, i: usize) -> usize {
    let toks = state.tokens();
    let mask = state.mask_id();
    let left = toks[..i].iter().rposition(|&t| t != mask).map(|j| i - j);
    let right = toks[i + 1..].iter().position(|&t| t != mask).map(|j| j + 1);
    match (left, right) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) => a,
        (None, Some(b)) => b.min(i + 1),
        (None, None) => i + 1,
    }
}

/// `clip(c_max - decay * dist + jitter, floor, 1)` for masked position `i`.
pub fn frontier_confidence(oracle: &FrontierOracle, state: &SequenceState, i: usize) -> f64 {
    let cfg = &oracle.cfg;
    let dist = frontier_distance(state, i) as f64;
    let raw = cfg.c_max - cfg.decay * dist + oracle.jitter(state, i);
    raw.clamp(cfg.floor, 1.0)
}

impl Denoiser for FrontierOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict_positions(&self, state: &SequenceState, positions: &[usize]) -> Vec<Prediction> {
        positions
            .iter()
            .map(|&i| Prediction {
                position: i,
                token: self.token_at(state, i),
                confidence: frontier_confidence(self, state, i),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{CommitSource, CommitSet, Scope};

    fn vocab() -> Vocabulary {
        Vocabulary::new(8, 7).unwrap()
    }

    fn cfg(decay: f64, noise: f64, correctness: f64) -> FrontierOracleConfig {
        FrontierOracleConfig {
            reference: vec![0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4],
            c_max: 0.99,
            decay,
            noise_scale: noise,
            correctness,
            floor: 0.1,
            seed: 11,
            drift: false,
        }
    }

    fn fresh(prompt_len: usize, gen: usize) -> SequenceState {
        let prompt: Vec<TokenId> = (0..prompt_len as u32).collect();
        SequenceState::new(&prompt, gen, gen.max(1), &vocab()).unwrap()
    }

    #[test]
    fn perfect_oracle_predicts_reference() {
        let o = FrontierOracle::new(cfg(0.05, 0.0, 1.0), vocab()).unwrap();
        let s = fresh(2, 12);
        let out = o.predict(&s, Scope::ActiveBlock).unwrap();
        for p in out.iter() {
            assert_eq!(p.token, o.reference_token(p.position));
        }
        assert_eq!(out.get(13).unwrap().token, 7, "past the reference is eos");
    }

    #[test]
    fn flat_oracle_gives_c_max() {
        let o = FrontierOracle::new(cfg(0.0, 0.0, 1.0), vocab()).unwrap();
        let out = o.predict(&fresh(2, 6), Scope::ActiveBlock).unwrap();
        assert!(out.iter().all(|p| p.confidence == 0.99));
    }

    #[test]
    fn confidence_arithmetic() {
        let o = FrontierOracle::new(cfg(0.05, 0.0, 1.0), vocab()).unwrap();
        let s = fresh(2, 8);
        // adjacent to the prompt
        assert_eq!(frontier_confidence(&o, &s, 2), 0.99 - 0.05);
        // four away
        assert!((frontier_confidence(&o, &s, 5) - 0.79).abs() < 1e-12);
        // floor
        let far = FrontierOracle::new(cfg(0.3, 0.0, 1.0), vocab()).unwrap();
        assert_eq!(frontier_confidence(&far, &s, 9), 0.1);
    }

    #[test]
    fn distance_is_bidirectional() {
        let s = fresh(1, 6);
        let s = s
            .apply_commits(&[(5, 3, CommitSource::Spatial)].into_iter().collect::<CommitSet>())
            .unwrap();
        assert_eq!(frontier_distance(&s, 1), 1);
        assert_eq!(frontier_distance(&s, 3), 2);
        assert_eq!(frontier_distance(&s, 4), 1);
        assert_eq!(frontier_distance(&s, 6), 1);
        let empty = fresh(0, 4);
        assert_eq!(frontier_distance(&empty, 0), 1);
        assert_eq!(frontier_distance(&empty, 3), 4);
    }

    #[test]
    fn wrong_tokens_differ_from_reference() {
        let o = FrontierOracle::new(cfg(0.05, 0.0, 0.0), vocab()).unwrap();
        let out = o.predict(&fresh(2, 10), Scope::ActiveBlock).unwrap();
        for p in out.iter() {
            assert_ne!(p.token, o.reference_token(p.position));
            assert!(vocab().is_real(p.token));
        }
    }

    #[test]
    fn frozen_noise_ignores_state_drift_does_not() {
        let o = FrontierOracle::new(cfg(0.0, 0.05, 1.0), vocab()).unwrap();
        let s = fresh(2, 6);
        let s2 = s
            .apply_commits(&[(7, 1, CommitSource::Spatial)].into_iter().collect::<CommitSet>())
            .unwrap();
        assert_eq!(o.jitter(&s, 4), o.jitter(&s2, 4));
        let mut dc = cfg(0.0, 0.05, 1.0);
        dc.drift = true;
        let d = FrontierOracle::new(dc, vocab()).unwrap();
        assert_ne!(d.jitter(&s, 4), d.jitter(&s2, 4));
        assert_eq!(d.jitter(&s, 4), d.jitter(&s.clone(), 4));
    }

    #[test]
    fn validation() {
        let mut c = cfg(0.05, 0.0, 1.0);
        c.floor = 0.0;
        assert!(FrontierOracle::new(c, vocab()).is_err());
        let mut c = cfg(0.05, 0.0, 1.0);
        c.correctness = 1.2;
        assert!(FrontierOracle::new(c, vocab()).is_err());
        let mut c = cfg(0.05, 0.0, 1.0);
        c.reference.push(8);
        assert!(FrontierOracle::new(c, vocab()).is_err());
    }

    #[test]
    fn empty_query_is_error() {
        let o = FrontierOracle::new(cfg(0.05, 0.0, 1.0), vocab()).unwrap();
        let s = fresh(3, 0);
        assert!(matches!(
            o.predict(&s, Scope::ActiveBlock),
            Err(DenoiserError::EmptyQuery)
        ));
    }
}
