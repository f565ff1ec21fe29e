//! Speculative ordering and index-level draft assembly.

use serde::{Deserialize, Serialize};

use super::{topological_order, DraftGraph, GraphError, RankSet};
use crate::denoiser::DenoiserOutput;
use crate::state::{CommitSet, CommitSource, Scope, SequenceState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEntry {
    pub position: usize,
    pub confidence: f64,
}

/// Still-masked positions sorted by cached confidence, highest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeculativeOrdering {
    entries: Vec<SigmaEntry>,
}

impl SpeculativeOrdering {
    pub fn entries(&self) -> &[SigmaEntry] {
        &self.entries
    }

    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position at 1-based `rank`.
    pub fn position(&self, rank: usize) -> Option<usize> {
        rank.checked_sub(1)
            .and_then(|r| self.entries.get(r))
            .map(|e| e.position)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.position)
    }
}

/// Order the active block's remaining masks by the confidences cached from the
/// spatial pass; ties go to the leftmost position.
pub fn speculative_ordering(post_state: &SequenceState, cached: &DenoiserOutput) -> SpeculativeOrdering {
    let mut entries: Vec<SigmaEntry> = post_state
        .masked_positions(Scope::ActiveBlock)
        .into_iter()
        .filter_map(|position| {
            let pred = cached.get(position);
            debug_assert!(pred.is_some(), "cached output misses position {position}");
            pred.map(|p| SigmaEntry {
                position,
                confidence: p.confidence,
            })
        })
        .collect();
    entries.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    SpeculativeOrdering { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftSequence {
    /// Graph node this draft represents (the lowest id among collapsed nodes).
    pub node: usize,
    /// Effective ranks, i.e. the node's ranks that exist in σ.
    pub ranks: RankSet,
    /// Ascending positions filled from cached predictions.
    pub filled: Vec<usize>,
    pub fills: CommitSet,
    pub state: SequenceState,
}

/// Materialised drafts plus the edges between them (indices into `drafts`).
#[derive(Debug, Clone, PartialEq)]
pub struct DraftSet {
    pub drafts: Vec<DraftSequence>,
    pub edges: Vec<(usize, usize)>,
}

impl DraftSet {
    pub fn len(&self) -> usize {
        self.drafts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drafts.is_empty()
    }

    /// Parents of draft `k`, ascending.
    pub fn parents(&self, k: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, c)| c == k)
            .map(|&(p, _)| p)
            .collect()
    }

    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        topological_order(self.drafts.len(), &self.edges)
    }
}

/// Build every node's draft from `post_state` and the cached predictions.
///
/// Ranks beyond `sigma.m()` are dropped; nodes whose effective rank sets
/// coincide are merged into the first such node and their edges re-pointed.
pub fn assemble_drafts(
    post_state: &SequenceState,
    sigma: &SpeculativeOrdering,
    cached: &DenoiserOutput,
    graph: &DraftGraph,
) -> DraftSet {
    let m = sigma.m();
    let mut drafts: Vec<DraftSequence> = Vec::new();
    let mut rep = Vec::with_capacity(graph.len());
    for (node, ranks) in graph.nodes().iter().enumerate() {
        let effective: RankSet = ranks.iter().copied().filter(|&r| r <= m).collect();
        if let Some(existing) = drafts.iter().position(|d| d.ranks == effective) {
            rep.push(existing);
            continue;
        }
        let fills: CommitSet = effective
            .iter()
            .map(|&r| {
                let position = sigma.position(r).expect("rank within m");
                let token = cached
                    .get(position)
                    .expect("cached output covers sigma")
                    .token;
                (position, token, CommitSource::Speculative)
            })
            .collect();
        let state = post_state
            .apply_commits(&fills)
            .expect("sigma positions are masked in the post-spatial state");
        rep.push(drafts.len());
        drafts.push(DraftSequence {
            node,
            ranks: effective,
            filled: fills.positions().collect(),
            fills,
            state,
        });
    }
    let mut edges: Vec<(usize, usize)> = graph
        .edges()
        .iter()
        .map(|&(p, k)| (rep[p], rep[k]))
        .filter(|(p, k)| p != k)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    DraftSet { drafts, edges }
}
