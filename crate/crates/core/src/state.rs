//! Partially masked sequence state, its block grid, and the commit primitive.
//!
//! Positions are absolute indices into the full sequence (prompt included).
//! Blocks tile only the generation region: block `b` covers
//! `prompt_len + b*L .. min(prompt_len + (b+1)*L, prompt_len + max_new_tokens)`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("block length must be positive")]
    ZeroBlockLen,
    #[error("prompt token {token} at position {position} is not a real token")]
    BadPromptToken { position: usize, token: TokenId },
    #[error("commit to position {0} which is not masked")]
    CommitToUnmasked(usize),
    #[error("commit at position {0} carries the mask token")]
    CommitOfMask(usize),
    #[error("commit position {position} outside sequence of length {len}")]
    OutOfRange { position: usize, len: usize },
}

/// Which stage produced a committed token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitSource {
    Spatial,
    Speculative,
    VerifierCommit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Commit {
    pub token: TokenId,
    pub source: CommitSource,
}

/// Positions to unmask in one update, keyed by absolute position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitSet {
    entries: BTreeMap<usize, Commit>,
}

impl CommitSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, position: usize, token: TokenId, source: CommitSource) {
        self.entries.insert(position, Commit { token, source });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, position: usize) -> Option<&Commit> {
        self.entries.get(&position)
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries.contains_key(&position)
    }

    /// Entries in ascending position order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Commit)> + '_ {
        self.entries.iter().map(|(p, c)| (*p, c))
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}

impl FromIterator<(usize, TokenId, CommitSource)> for CommitSet {
    fn from_iter<I: IntoIterator<Item = (usize, TokenId, CommitSource)>>(iter: I) -> Self {
        let mut set = CommitSet::new();
        for (p, t, s) in iter {
            set.insert(p, t, s);
        }
        set
    }
}

/// Which masked positions a query covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    ActiveBlock,
    WholeSequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<TokenId>,
    prompt_len: usize,
    block_len: usize,
    active_block: usize,
    step: usize,
    mask_id: TokenId,
}

impl SequenceState {
    /// A fresh state: the prompt followed by `max_new_tokens` masks.
    pub fn new(
        prompt: &[TokenId],
        max_new_tokens: usize,
        block_len: usize,
        vocab: &Vocabulary,
    ) -> Result<Self, StateError> {
        if block_len == 0 {
            return Err(StateError::ZeroBlockLen);
        }
        if let Some((position, &token)) = prompt
            .iter()
            .enumerate()
            .find(|(_, &t)| !vocab.is_real(t))
        {
            return Err(StateError::BadPromptToken { position, token });
        }
        let mut tokens = Vec::with_capacity(prompt.len() + max_new_tokens);
        tokens.extend_from_slice(prompt);
        tokens.resize(prompt.len() + max_new_tokens, vocab.mask_id());
        Ok(Self {
            tokens,
            prompt_len: prompt.len(),
            block_len,
            active_block: 0,
            step: 0,
            mask_id: vocab.mask_id(),
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn active_block(&self) -> usize {
        self.active_block
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn generation_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn num_blocks(&self) -> usize {
        self.generation_len().div_ceil(self.block_len)
    }

    /// Absolute position range of block `b`; the last block may be short.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = (self.prompt_len + b * self.block_len).min(self.tokens.len());
        let end = (start + self.block_len).min(self.tokens.len());
        start..end
    }

    /// Block index of a generation-region position.
    pub fn block_of(&self, position: usize) -> Option<usize> {
        (position >= self.prompt_len && position < self.tokens.len())
            .then(|| (position - self.prompt_len) / self.block_len)
    }

    pub fn active_range(&self) -> Option<Range<usize>> {
        (!self.is_finished()).then(|| self.block_range(self.active_block))
    }

    /// True once every block has been resolved.
    pub fn is_finished(&self) -> bool {
        self.active_block >= self.num_blocks()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens.get(position) == Some(&self.mask_id)
    }

    /// Ascending masked positions within `scope`.
    pub fn masked_positions(&self, scope: Scope) -> Vec<usize> {
        let range = match scope {
            Scope::WholeSequence => 0..self.tokens.len(),
            Scope::ActiveBlock => match self.active_range() {
                Some(r) => r,
                None => return Vec::new(),
            },
        };
        range.filter(|&i| self.tokens[i] == self.mask_id).collect()
    }

    /// Substitute committed tokens. Every commit must target a masked position.
    pub fn apply_commits(&self, commits: &CommitSet) -> Result<SequenceState, StateError> {
        let mut next = self.clone();
        for (position, commit) in commits.iter() {
            if position >= next.tokens.len() {
                return Err(StateError::OutOfRange {
                    position,
                    len: next.tokens.len(),
                });
            }
            if commit.token == self.mask_id {
                return Err(StateError::CommitOfMask(position));
            }
            // Checked against `self` so the set behaves as one parallel update.
            if self.tokens[position] != self.mask_id {
                return Err(StateError::CommitToUnmasked(position));
            }
            next.tokens[position] = commit.token;
        }
        Ok(next)
    }

    /// Move to the next block when the active one holds no masks.
    pub fn advance_block_if_complete(&self) -> SequenceState {
        let mut next = self.clone();
        if let Some(r) = self.active_range() {
            if !self.tokens[r].contains(&self.mask_id) {
                next.active_block += 1;
            }
        }
        next
    }

    pub fn with_step(&self, step: usize) -> SequenceState {
        let mut next = self.clone();
        next.step = step;
        next
    }

    /// Stable 64-bit FNV-1a digest of the token array.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_tokens(&self.tokens)
    }
}

pub(crate) fn fingerprint_tokens(tokens: &[TokenId]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}
