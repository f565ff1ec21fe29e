//! The decoding loop.
//!
//! Each PSD iteration runs one spatial pass (predict, select, commit), then,
//! if the block still has masks, assembles drafts from the cached
//! predictions, verifies them all in one batched pass, accepts the deepest
//! draft consistent with an accepted parent, and finally commits whatever the
//! transfer policy selects from that draft's own verifier output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserError, DenoiserOutput};
use crate::draft::{
    assemble_drafts, build_topology, speculative_ordering, DraftGraph, DraftSet, GraphError,
    TopologyConfig,
};
use crate::policy::{PolicyConfig, PolicyError, PolicyKind, TransferPolicy};
use crate::state::{CommitSet, CommitSource, Scope, SequenceState, StateError};
use crate::trace::{
    eos_cutoff, CommitRecord, DecodeTrace, DraftRecord, IterationRecord, NodeEvidence,
    PredictionRecord, SigmaRecord, TraceHeader, TraceSummary, TRACE_SCHEMA_VERSION,
};
use crate::vocab::TokenId;

pub const DEFAULT_BLOCK_LEN: usize = 32;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Psd,
    SpatialOnly,
    GreedyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_topology")]
    pub topology: TopologyConfig,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_eos_stop")]
    pub eos_stop: bool,
    #[serde(default)]
    pub mode: DecodeMode,
}

fn default_topology() -> TopologyConfig {
    TopologyConfig::chain(3)
}

fn default_block_len() -> usize {
    DEFAULT_BLOCK_LEN
}

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

fn default_eos_stop() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            topology: default_topology(),
            block_len: DEFAULT_BLOCK_LEN,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            eos_stop: true,
            mode: DecodeMode::Psd,
        }
    }
}

impl EngineConfig {
    /// The policy actually used: greedy-only mode forces the greedy rule.
    pub fn effective_policy(&self) -> PolicyConfig {
        match self.mode {
            DecodeMode::GreedyOnly => PolicyConfig {
                kind: PolicyKind::Greedy,
                ..self.policy
            },
            _ => self.policy,
        }
    }
}

/// Result of hierarchical acceptance over one draft set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceOutcome {
    /// Accepted draft indices, ascending. Always contains the root (0).
    pub accepted: Vec<usize>,
    /// For each draft, the accepted parent through which it was accepted.
    pub via: Vec<Option<usize>>,
    /// Deepest accepted draft index.
    pub deepest: usize,
    pub accepted_tokens: CommitSet,
}

/// Walk the drafts in topological order; a draft is accepted when some
/// accepted parent's verifier output endorses every token it adds.
/// The deepest accepted draft (most filled positions, lowest index on ties)
/// is selected.
pub fn hierarchical_accept(
    drafts: &DraftSet,
    verification: &[DenoiserOutput],
    policy: &TransferPolicy,
) -> AcceptanceOutcome {
    assert_eq!(
        drafts.len(),
        verification.len(),
        "one verifier output per draft"
    );
    let n = drafts.len();
    let mut accepted = vec![false; n];
    let mut via = vec![None; n];
    let order = drafts
        .topological_order()
        .expect("draft sets inherit acyclicity from their graph");
    for k in order {
        if k == 0 {
            accepted[0] = true;
            continue;
        }
        let child = &drafts.drafts[k];
        for p in drafts.parents(k) {
            if !accepted[p] {
                continue;
            }
            let parent = &drafts.drafts[p];
            let endorsed = child
                .fills
                .iter()
                .filter(|(pos, _)| !parent.fills.contains(*pos))
                .all(|(pos, c)| policy.accepts(c.token, pos, &verification[p]));
            if endorsed {
                accepted[k] = true;
                via[k] = Some(p);
                break;
            }
        }
    }
    let mut deepest = 0;
    for (k, _) in accepted.iter().enumerate().filter(|(_, &a)| a) {
        if drafts.drafts[k].filled.len() > drafts.drafts[deepest].filled.len() {
            deepest = k;
        }
    }
    AcceptanceOutcome {
        accepted: (0..n).filter(|&k| accepted[k]).collect(),
        via,
        deepest,
        accepted_tokens: drafts.drafts[deepest].fills.clone(),
    }
}

/// Apply the policy's selection rule to the deepest draft's verifier output.
pub fn verifier_commits(
    drafts: &DraftSet,
    deepest: usize,
    output: &DenoiserOutput,
    policy: &TransferPolicy,
    step: usize,
) -> Result<CommitSet, PolicyError> {
    let state = &drafts.drafts[deepest].state;
    let masked = state.masked_positions(Scope::ActiveBlock);
    if masked.is_empty() {
        return Ok(CommitSet::new());
    }
    let decision = match policy.select(&masked, output, step) {
        Ok(d) => d,
        // Speculative progress was made, so an empty verifier round is not a stall.
        Err(PolicyError::Stalled(_)) if deepest != 0 => return Ok(CommitSet::new()),
        Err(e) => return Err(e),
    };
    Ok(decision
        .selected
        .into_iter()
        .map(|p| {
            let token = output.get(p).expect("selection is over predicted positions").token;
            (p, token, CommitSource::VerifierCommit)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Decode with the graph built from `config.topology`.
pub fn decode(
    config: &EngineConfig,
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
) -> Result<Decoded, EngineError> {
    let graph = build_topology(&config.topology)?;
    decode_with_graph(config, &graph, denoiser, prompt)
}

/// Stage-1-only loop: predict, select, commit until the sequence is done.
pub fn decode_spatial_only(
    config: &EngineConfig,
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
) -> Result<Decoded, EngineError> {
    let cfg = EngineConfig {
        mode: DecodeMode::SpatialOnly,
        ..*config
    };
    decode_with_graph(&cfg, &DraftGraph::root_only(), denoiser, prompt)
}

pub fn decode_with_graph(
    config: &EngineConfig,
    graph: &DraftGraph,
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
) -> Result<Decoded, EngineError> {
    let policy = TransferPolicy::new(config.effective_policy())?;
    let vocab = denoiser.vocab();
    let eos = vocab.eos_id();
    let speculate = config.mode == DecodeMode::Psd;
    let mut state = SequenceState::new(prompt, config.max_new_tokens, config.block_len, vocab)?;
    let mut iterations = Vec::new();
    let mut step = 0usize;

    loop {
        while !state.is_finished() && state.masked_positions(Scope::ActiveBlock).is_empty() {
            state = state.advance_block_if_complete();
        }
        if state.is_finished() {
            break;
        }
        let block = state.active_block();
        let masked = state.masked_positions(Scope::ActiveBlock);

        // Stage 1: spatial parallel unmasking.
        let cached = denoiser.predict(&state, Scope::ActiveBlock)?;
        let decision = policy.select(&masked, &cached, step)?;
        let spatial: CommitSet = decision
            .selected
            .iter()
            .map(|&p| (p, cached.get(p).expect("selected from cached").token, CommitSource::Spatial))
            .collect();
        let post = state.apply_commits(&spatial)?;
        let sigma = speculative_ordering(&post, &cached);
        let mut eos_hit = spatial.iter().any(|(_, c)| c.token == eos);

        let mut record = IterationRecord {
            step,
            block,
            forward_passes: 1,
            batch_size: 0,
            stage1: prediction_records(&cached),
            spatial: spatial
                .iter()
                .map(|(p, c)| plain_commit(p, c.token, cached.get(p).map_or(0.0, |x| x.confidence)))
                .collect(),
            sigma: sigma
                .entries()
                .iter()
                .map(|e| SigmaRecord {
                    position: e.position,
                    confidence: e.confidence,
                })
                .collect(),
            drafts: Vec::new(),
            k_star: None,
            speculative: Vec::new(),
            verifier: Vec::new(),
            evidence: Vec::new(),
        };

        let mut next = post.clone();
        if speculate && !sigma.is_empty() && !(config.eos_stop && eos_hit) {
            // Stage 2: drafts from cached predictions, no model call.
            let drafts = assemble_drafts(&post, &sigma, &cached, graph);
            // Stage 3: one batched verification pass.
            let verification = verify(denoiser, &drafts)?;
            record.forward_passes = 2;
            record.batch_size = drafts.len();

            let outcome = hierarchical_accept(&drafts, &verification, &policy);
            let k = outcome.deepest;
            let extra = verifier_commits(&drafts, k, &verification[k], &policy, step)?;
            next = drafts.drafts[k].state.apply_commits(&extra)?;

            record_acceptance(&mut record, &drafts, &verification, &outcome, &sigma_ranks(&sigma));
            record.verifier = extra
                .iter()
                .map(|(p, c)| {
                    plain_commit(p, c.token, verification[k].get(p).map_or(0.0, |x| x.confidence))
                })
                .collect();
            eos_hit |= outcome.accepted_tokens.iter().any(|(_, c)| c.token == eos)
                || extra.iter().any(|(_, c)| c.token == eos);
        }

        iterations.push(record);
        step += 1;
        state = next.with_step(step);
        if config.eos_stop && eos_hit {
            break;
        }
    }

    let header = TraceHeader {
        schema_version: TRACE_SCHEMA_VERSION,
        mode: config.mode,
        policy: config.effective_policy(),
        block_len: config.block_len,
        max_new_tokens: config.max_new_tokens,
        eos_stop: config.eos_stop,
        vocab_size: vocab.size(),
        eos_id: eos,
        mask_id: vocab.mask_id(),
        prompt: prompt.to_vec(),
        graph_nodes: if speculate {
            graph.nodes().iter().map(|s| s.iter().copied().collect()).collect()
        } else {
            vec![vec![]]
        },
        graph_edges: if speculate { graph.edges().to_vec() } else { vec![] },
    };
    let summary = TraceSummary {
        final_tokens: state.tokens().to_vec(),
        forward_passes: iterations.iter().map(|it| u64::from(it.forward_passes)).sum(),
        committed: iterations.iter().map(|it| it.committed() as u64).sum(),
        eos_position: eos_cutoff(&header, &iterations).map(|(_, p)| p),
    };
    Ok(Decoded {
        tokens: state.tokens().to_vec(),
        trace: DecodeTrace {
            header,
            iterations,
            summary,
        },
    })
}

/// One batched pass over all drafts. Drafts with nothing left to predict get
/// an empty output instead of an empty query.
fn verify(denoiser: &dyn Denoiser, drafts: &DraftSet) -> Result<Vec<DenoiserOutput>, DenoiserError> {
    let live: Vec<usize> = (0..drafts.len())
        .filter(|&k| !drafts.drafts[k].state.masked_positions(Scope::ActiveBlock).is_empty())
        .collect();
    let states: Vec<SequenceState> = live.iter().map(|&k| drafts.drafts[k].state.clone()).collect();
    let mut outputs: Vec<Option<DenoiserOutput>> = vec![None; drafts.len()];
    if !states.is_empty() {
        for (k, out) in live.into_iter().zip(denoiser.predict_batch(&states, Scope::ActiveBlock)?) {
            outputs[k] = Some(out);
        }
    }
    Ok(outputs
        .into_iter()
        .enumerate()
        .map(|(k, o)| o.unwrap_or_else(|| DenoiserOutput::empty(drafts.drafts[k].state.fingerprint())))
        .collect())
}

fn sigma_ranks(sigma: &crate::draft::SpeculativeOrdering) -> Vec<usize> {
    sigma.positions().collect()
}

fn prediction_records(out: &DenoiserOutput) -> Vec<PredictionRecord> {
    out.iter()
        .map(|p| PredictionRecord {
            position: p.position,
            token: p.token,
            confidence: p.confidence,
        })
        .collect()
}

fn plain_commit(position: usize, token: TokenId, confidence: f64) -> CommitRecord {
    CommitRecord {
        position,
        token,
        confidence,
        parent: None,
        rank: None,
    }
}

fn record_acceptance(
    record: &mut IterationRecord,
    drafts: &DraftSet,
    verification: &[DenoiserOutput],
    outcome: &AcceptanceOutcome,
    sigma_positions: &[usize],
) {
    let node_id = |k: usize| drafts.drafts[k].node;
    record.drafts = (0..drafts.len())
        .map(|k| DraftRecord {
            node: node_id(k),
            ranks: drafts.drafts[k].ranks.iter().copied().collect(),
            parents: drafts.parents(k).into_iter().map(node_id).collect(),
            accepted: outcome.accepted.contains(&k),
            via: outcome.via[k].map(node_id),
        })
        .collect();
    record.k_star = Some(node_id(outcome.deepest));

    let mut path = vec![outcome.deepest];
    while let Some(p) = outcome.via[*path.last().expect("non-empty")] {
        path.push(p);
    }
    let rank_of = |pos: usize| sigma_positions.iter().position(|&x| x == pos).map(|r| r + 1);
    let mut speculative = Vec::new();
    for pair in path.windows(2) {
        let (k, p) = (pair[0], pair[1]);
        for (pos, c) in drafts.drafts[k].fills.iter() {
            if drafts.drafts[p].fills.contains(pos) {
                continue;
            }
            speculative.push(CommitRecord {
                position: pos,
                token: c.token,
                confidence: verification[p].get(pos).map_or(0.0, |x| x.confidence),
                parent: Some(node_id(p)),
                rank: rank_of(pos),
            });
        }
    }
    speculative.sort_by_key(|c| c.rank);
    record.speculative = speculative;

    path.reverse();
    record.evidence = path
        .into_iter()
        .map(|k| NodeEvidence {
            node: node_id(k),
            predictions: prediction_records(&verification[k]),
        })
        .collect();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Prediction;
    use crate::draft::{build_topology, RankSet};
    use crate::vocab::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::new(6, 5).unwrap()
    }

    fn outputs(drafts: &DraftSet, f: impl Fn(usize, usize) -> (TokenId, f64)) -> Vec<DenoiserOutput> {
        drafts
            .drafts
            .iter()
            .enumerate()
            .map(|(k, d)| {
                DenoiserOutput::new(
                    d.state
                        .masked_positions(Scope::ActiveBlock)
                        .into_iter()
                        .map(|pos| {
                            let (token, confidence) = f(k, pos);
                            Prediction {
                                position: pos,
                                token,
                                confidence,
                            }
                        }),
                    0,
                )
            })
            .collect()
    }

    /// Block [M, M, M] after the prompt; cached predictions token = position.
    fn setup(graph: &DraftGraph) -> DraftSet {
        let s = SequenceState::new(&[0], 3, 3, &vocab()).unwrap();
        let cached = DenoiserOutput::new(
            [(1, 0.9), (2, 0.8), (3, 0.7)].map(|(position, confidence)| Prediction {
                position,
                token: position as TokenId,
                confidence,
            }),
            0,
        );
        let sigma = speculative_ordering(&s, &cached);
        assemble_drafts(&s, &sigma, &cached, graph)
    }

    #[test]
    fn full_chain_accepted_when_verifier_agrees() {
        let drafts = setup(&DraftGraph::chain(2));
        let ver = outputs(&drafts, |_, pos| (pos as TokenId, 0.95));
        let policy = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let out = hierarchical_accept(&drafts, &ver, &policy);
        assert_eq!(out.accepted, vec![0, 1, 2]);
        assert_eq!(out.deepest, 2);
        assert_eq!(out.accepted_tokens.len(), 2);
    }

    #[test]
    fn skip_node_rescues_a_failed_first_rank() {
        let graph = DraftGraph::new(
            vec![
                RankSet::new(),
                [1].into_iter().collect(),
                [2].into_iter().collect(),
                [1, 2].into_iter().collect(),
            ],
            vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        )
        .unwrap();
        let drafts = setup(&graph);
        // Root's verifier disagrees at rank 1 (position 1) but endorses rank 2 (position 2).
        let ver = outputs(&drafts, |k, pos| match (k, pos) {
            (0, 1) => (4, 0.99),
            (0, _) => (pos as TokenId, 0.95),
            (2, 1) => (4, 0.5),
            _ => (pos as TokenId, 0.95),
        });
        let policy = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let out = hierarchical_accept(&drafts, &ver, &policy);
        assert_eq!(out.accepted, vec![0, 2]);
        assert_eq!(out.deepest, 2);
        assert_eq!(out.via[2], Some(0));
    }

    #[test]
    fn all_rejected_falls_back_to_root() {
        let drafts = setup(&DraftGraph::chain(3));
        let ver = outputs(&drafts, |_, _| (4, 0.99));
        let policy = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let out = hierarchical_accept(&drafts, &ver, &policy);
        assert_eq!(out.accepted, vec![0]);
        assert_eq!(out.deepest, 0);
        assert!(out.accepted_tokens.is_empty());
    }

    #[test]
    fn verifier_commit_thresholds_remaining_masks() {
        let drafts = setup(&DraftGraph::chain(1));
        let ver = outputs(&drafts, |_, pos| if pos == 2 { (2, 0.95) } else { (3, 0.2) });
        let policy = TransferPolicy::new(PolicyConfig::confidence(0.9)).unwrap();
        let commits = verifier_commits(&drafts, 1, &ver[1], &policy, 0).unwrap();
        assert_eq!(commits.positions().collect::<Vec<_>>(), vec![2]);

        let full = setup(&build_topology(&TopologyConfig::chain(3)).unwrap());
        let last = full.len() - 1;
        let ver = outputs(&full, |_, pos| (pos as TokenId, 0.95));
        assert!(verifier_commits(&full, last, &ver[last], &policy, 0).unwrap().is_empty());
    }
}
