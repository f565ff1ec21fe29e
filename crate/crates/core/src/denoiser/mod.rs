//! The denoiser abstraction: one forward pass yields, for every queried masked
//! position, the most likely token and its probability.
//!
//! Two deterministic backends are provided: [`FrontierOracle`], whose
//! confidences decay with distance from already-decoded context, and
//! [`CountModel`], a smoothed skip-bigram model trained on a corpus.

mod count;
mod frontier;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::state::{Scope, SequenceState};
use crate::vocab::{TokenId, Vocabulary};

pub use count::{CountModel, CountModelConfig, InterpolationWeights, COUNT_MODEL_FORMAT_VERSION};
pub use frontier::{frontier_confidence, frontier_distance, FrontierOracle, FrontierOracleConfig};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("query has no masked positions in scope")]
    EmptyQuery,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus token {token} in document {doc} is not a real token")]
    BadCorpusToken { doc: usize, token: TokenId },
    #[error("count model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Argmax token and its confidence at one masked position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    predictions: BTreeMap<usize, Prediction>,
    query_fingerprint: u64,
}

impl DenoiserOutput {
    pub fn new(predictions: impl IntoIterator<Item = Prediction>, query_fingerprint: u64) -> Self {
        Self {
            predictions: predictions.into_iter().map(|p| (p.position, p)).collect(),
            query_fingerprint,
        }
    }

    /// Output for a query that had nothing left to predict.
    pub fn empty(query_fingerprint: u64) -> Self {
        Self::new(std::iter::empty(), query_fingerprint)
    }

    pub fn get(&self, position: usize) -> Option<&Prediction> {
        self.predictions.get(&position)
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn query_fingerprint(&self) -> u64 {
        self.query_fingerprint
    }

    /// Predictions in ascending position order.
    pub fn iter(&self) -> impl Iterator<Item = &Prediction> + '_ {
        self.predictions.values()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.predictions.keys().copied()
    }

    /// Highest-confidence prediction; ties go to the leftmost position.
    pub fn argmax(&self) -> Option<&Prediction> {
        argmax_of(self.predictions.values())
    }
}

/// Highest confidence, leftmost on ties, over predictions in position order.
pub(crate) fn argmax_of<'a>(preds: impl Iterator<Item = &'a Prediction>) -> Option<&'a Prediction> {
    let mut best: Option<&Prediction> = None;
    for p in preds {
        match best {
            Some(b) if p.confidence > b.confidence => best = Some(p),
            Some(b) if p.confidence == b.confidence && p.position < b.position => best = Some(p),
            None => best = Some(p),
            _ => {}
        }
    }
    best
}

/// One application of the model to a partially masked sequence.
pub trait Denoiser: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Predictions for exactly `positions`, all of which are masked in `state`.
    fn predict_positions(&self, state: &SequenceState, positions: &[usize]) -> Vec<Prediction>;

    fn predict(&self, state: &SequenceState, scope: Scope) -> Result<DenoiserOutput, DenoiserError> {
        let positions = state.masked_positions(scope);
        if positions.is_empty() {
            return Err(DenoiserError::EmptyQuery);
        }
        let preds = self.predict_positions(state, &positions);
        debug_assert_eq!(preds.len(), positions.len());
        Ok(DenoiserOutput::new(preds, state.fingerprint()))
    }

    /// Evaluate several states as one model invocation; outputs follow input order.
    fn predict_batch(
        &self,
        states: &[SequenceState],
        scope: Scope,
    ) -> Result<Vec<DenoiserOutput>, DenoiserError> {
        if states.is_empty() {
            return Err(DenoiserError::EmptyBatch);
        }
        states.iter().map(|s| self.predict(s, scope)).collect()
    }
}

/// Deterministic uniform draw in `[0, 1)` keyed by a tuple of integers.
pub(crate) fn keyed_uniform(keys: &[u64]) -> f64 {
    keyed_rng(keys).gen::<f64>()
}

pub(crate) fn keyed_rng(keys: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
