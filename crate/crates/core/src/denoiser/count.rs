//! Count-based denoiser: an interpolated, add-α smoothed skip-bigram model.
//!
//! For a masked position the model looks at the nearest decoded token on each
//! side. If that token sits within `order` positions, the matching
//! distance-specific pair table contributes `P(v | context, distance)`;
//! otherwise that component's weight falls back to the unigram distribution.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserError, Prediction};
use crate::state::SequenceState;
use crate::vocab::{TokenId, Vocabulary};

pub const COUNT_MODEL_FORMAT_VERSION: u32 = 1;
const COUNT_MODEL_FORMAT: &str = "psd-count-model";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolationWeights {
    pub left: f64,
    pub right: f64,
    pub unigram: f64,
}

impl Default for InterpolationWeights {
    fn default() -> Self {
        Self {
            left: 0.6,
            right: 0.3,
            unigram: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountModelConfig {
    /// Largest context distance with its own pair table (1 = adjacent bigram).
    pub order: usize,
    pub alpha: f64,
    pub weights: InterpolationWeights,
}

impl Default for CountModelConfig {
    fn default() -> Self {
        Self {
            order: 2,
            alpha: 0.1,
            weights: InterpolationWeights::default(),
        }
    }
}

impl CountModelConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let w = self.weights;
        let bad = |m: &str| Err(DenoiserError::InvalidConfig(m.to_string()));
        if self.order == 0 {
            return bad("order must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if w.left < 0.0 || w.right < 0.0 || w.unigram < 0.0 {
            return bad("interpolation weights must be non-negative");
        }
        if ((w.left + w.right + w.unigram) - 1.0).abs() > 1e-9 {
            return bad("interpolation weights must sum to 1");
        }
        Ok(())
    }
}

/// Pair counts at one distance, indexed both ways.
#[derive(Debug, Clone, PartialEq, Default)]
struct PairTable {
    /// `forward[u][v]`: count of `u` followed `d` positions later by `v`.
    forward: Vec<BTreeMap<TokenId, u64>>,
    /// `backward[u][v]`: count of `v` followed `d` positions later by `u`.
    backward: Vec<BTreeMap<TokenId, u64>>,
    forward_totals: Vec<u64>,
    backward_totals: Vec<u64>,
}

impl PairTable {
    fn new(v: usize) -> Self {
        Self {
            forward: vec![BTreeMap::new(); v],
            backward: vec![BTreeMap::new(); v],
            forward_totals: vec![0; v],
            backward_totals: vec![0; v],
        }
    }

    fn add(&mut self, first: TokenId, second: TokenId, count: u64) {
        *self.forward[first as usize].entry(second).or_default() += count;
        *self.backward[second as usize].entry(first).or_default() += count;
        self.forward_totals[first as usize] += count;
        self.backward_totals[second as usize] += count;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    cfg: CountModelConfig,
    vocab: Vocabulary,
    unigram: Vec<u64>,
    unigram_total: u64,
    /// `pairs[d - 1]` holds distance-`d` counts.
    pairs: Vec<PairTable>,
}

#[derive(Serialize, Deserialize)]
struct CountArtifact {
    format: String,
    version: u32,
    config: CountModelConfig,
    vocab: Vocabulary,
    unigram: Vec<u64>,
    /// `(distance, first, second, count)`, sorted.
    pairs: Vec<(usize, TokenId, TokenId, u64)>,
}

impl CountModel {
    /// Count unigrams and distance-`1..=order` pairs within each document.
    pub fn train(
        cfg: CountModelConfig,
        vocab: Vocabulary,
        corpus: &[Vec<TokenId>],
    ) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        if corpus.iter().all(|d| d.is_empty()) {
            return Err(DenoiserError::EmptyCorpus);
        }
        let v = vocab.size() as usize;
        let mut unigram = vec![0u64; v];
        let mut pairs = vec![PairTable::new(v); cfg.order];
        for (doc_idx, doc) in corpus.iter().enumerate() {
            if let Some(&token) = doc.iter().find(|&&t| !vocab.is_real(t)) {
                return Err(DenoiserError::BadCorpusToken {
                    doc: doc_idx,
                    token,
                });
            }
            for (k, &t) in doc.iter().enumerate() {
                unigram[t as usize] += 1;
                for (d, table) in pairs.iter_mut().enumerate() {
                    if let Some(&next) = doc.get(k + d + 1) {
                        table.add(t, next, 1);
                    }
                }
            }
        }
        let unigram_total = unigram.iter().sum();
        Ok(Self {
            cfg,
            vocab,
            unigram,
            unigram_total,
            pairs,
        })
    }

    pub fn config(&self) -> &CountModelConfig {
        &self.cfg
    }

    /// Full interpolated distribution at masked position `i`.
    pub fn distribution(&self, state: &SequenceState, i: usize) -> Vec<f64> {
        let v = self.vocab.size() as usize;
        let alpha = self.cfg.alpha;
        let smooth_denominator = alpha * v as f64;
        let toks = state.tokens();
        let mask = state.mask_id();
        let order = self.cfg.order;

        let left = toks[..i]
            .iter()
            .rposition(|&t| t != mask)
            .map(|j| (i - j, toks[j]))
            .filter(|&(d, _)| d <= order);
        let right = toks[i + 1..]
            .iter()
            .position(|&t| t != mask)
            .map(|j| (j + 1, toks[i + 1 + j]))
            .filter(|&(d, _)| d <= order);

        let w = self.cfg.weights;
        let mut unigram_w = w.unigram;
        let mut probs = vec![0.0f64; v];

        let add_component =
            |weight: f64, row: &BTreeMap<TokenId, u64>, total: u64, probs: &mut Vec<f64>| {
                let denom = total as f64 + smooth_denominator;
                for (tok, p) in probs.iter_mut().enumerate() {
                    let c = row.get(&(tok as TokenId)).copied().unwrap_or(0) as f64;
                    *p += weight * (c + alpha) / denom;
                }
            };

        match left {
            Some((d, u)) => {
                let t = &self.pairs[d - 1];
                add_component(w.left, &t.forward[u as usize], t.forward_totals[u as usize], &mut probs);
            }
            None => unigram_w += w.left,
        }
        match right {
            Some((d, u)) => {
                let t = &self.pairs[d - 1];
                add_component(w.right, &t.backward[u as usize], t.backward_totals[u as usize], &mut probs);
            }
            None => unigram_w += w.right,
        }
        let denom = self.unigram_total as f64 + smooth_denominator;
        for (tok, p) in probs.iter_mut().enumerate() {
            *p += unigram_w * (self.unigram[tok] as f64 + alpha) / denom;
        }
        probs
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<(), DenoiserError> {
        let mut pairs = Vec::new();
        for (d, table) in self.pairs.iter().enumerate() {
            for (u, row) in table.forward.iter().enumerate() {
                for (&v, &c) in row {
                    pairs.push((d + 1, u as TokenId, v, c));
                }
            }
        }
        let artifact = CountArtifact {
            format: COUNT_MODEL_FORMAT.to_string(),
            version: COUNT_MODEL_FORMAT_VERSION,
            config: self.cfg,
            vocab: self.vocab.clone(),
            unigram: self.unigram.clone(),
            pairs,
        };
        serde_json::to_writer(&mut out, &artifact)
            .map_err(|e| DenoiserError::Artifact(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self, DenoiserError> {
        let a: CountArtifact =
            serde_json::from_reader(input).map_err(|e| DenoiserError::Artifact(e.to_string()))?;
        if a.format != COUNT_MODEL_FORMAT || a.version != COUNT_MODEL_FORMAT_VERSION {
            return Err(DenoiserError::Artifact(format!(
                "unsupported artifact {} v{} (expected {} v{})",
                a.format, a.version, COUNT_MODEL_FORMAT, COUNT_MODEL_FORMAT_VERSION
            )));
        }
        a.config.validate()?;
        let v = a.vocab.size() as usize;
        if a.unigram.len() != v {
            return Err(DenoiserError::Artifact("unigram table length mismatch".into()));
        }
        let mut pairs = vec![PairTable::new(v); a.config.order];
        for (d, u, w, c) in a.pairs {
            if d == 0 || d > a.config.order || u as usize >= v || w as usize >= v {
                return Err(DenoiserError::Artifact(format!(
                    "pair entry ({d}, {u}, {w}) out of range"
                )));
            }
            pairs[d - 1].add(u, w, c);
        }
        let unigram_total = a.unigram.iter().sum();
        Ok(Self {
            cfg: a.config,
            vocab: a.vocab,
            unigram: a.unigram,
            unigram_total,
            pairs,
        })
    }
}

impl Denoiser for CountModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict_positions(&self, state: &SequenceState, positions: &[usize]) -> Vec<Prediction> {
        positions
            .iter()
            .map(|&i| {
                let probs = self.distribution(state, i);
                let mut best = 0usize;
                for (tok, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = tok;
                    }
                }
                Prediction {
                    position: i,
                    token: best as TokenId,
                    confidence: probs[best].min(1.0),
                }
            })
            .collect()
    }
}
