//! Offline topology calibration from probe traces.
//!
//! Per-rank acceptance probabilities are estimated from chain-probe traces,
//! then nodes from the chain-plus-skip family are added greedily by marginal
//! gain in expected accepted tokens. Rank acceptances are treated as
//! independent, so a node is accepted exactly when all its ranks are.

use serde::{Deserialize, Serialize};

use super::{family, DraftGraph, GraphError, RankSet};
use crate::trace::DecodeTrace;

/// Skip siblings per depth in the candidate family.
pub const CALIBRATION_BRANCH: usize = 1;
/// Exact expectation enumerates `2^ranks` acceptance patterns.
pub const MAX_CALIBRATION_RANKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// Iterations where the rank was offered and every lower rank was accepted.
    pub tested: usize,
    pub accepted: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub graph: DraftGraph,
    pub estimates: Vec<RankEstimate>,
    pub expected_accepted: f64,
}

/// Conditional acceptance rate of each rank given all lower ranks passed.
pub fn estimate_rank_acceptance(traces: &[DecodeTrace]) -> Vec<RankEstimate> {
    let max_rank = traces
        .iter()
        .flat_map(|t| &t.iterations)
        .flat_map(|it| &it.drafts)
        .flat_map(|d| d.ranks.iter().copied())
        .max()
        .unwrap_or(0);
    let mut tested = vec![0usize; max_rank + 1];
    let mut accepted = vec![0usize; max_rank + 1];
    for it in traces.iter().flat_map(|t| &t.iterations) {
        if it.drafts.is_empty() {
            continue;
        }
        let offered: RankSet = it.drafts.iter().flat_map(|d| d.ranks.iter().copied()).collect();
        let won: RankSet = it.k_star_ranks().into_iter().collect();
        for &r in &offered {
            if (1..r).all(|lower| won.contains(&lower)) {
                tested[r] += 1;
                if won.contains(&r) {
                    accepted[r] += 1;
                }
            }
        }
    }
    (1..=max_rank)
        .map(|rank| RankEstimate {
            rank,
            tested: tested[rank],
            accepted: accepted[rank],
            p: if tested[rank] == 0 {
                0.0
            } else {
                accepted[rank] as f64 / tested[rank] as f64
            },
        })
        .collect()
}

/// `E[max |S| over nodes with every rank accepted]`, ranks independent with
/// `p[r - 1]`; ranks without an estimate count as never accepted.
pub fn expected_accepted(nodes: &[RankSet], p: &[f64]) -> Result<f64, GraphError> {
    let ranks: Vec<usize> = nodes
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect::<RankSet>()
        .into_iter()
        .collect();
    if ranks.len() > MAX_CALIBRATION_RANKS {
        return Err(GraphError::TooManyRanks(ranks.len(), MAX_CALIBRATION_RANKS));
    }
    let prob = |r: usize| p.get(r - 1).copied().unwrap_or(0.0);
    let masks: Vec<u32> = nodes
        .iter()
        .map(|s| {
            s.iter()
                .map(|r| 1u32 << ranks.iter().position(|x| x == r).expect("collected above"))
                .fold(0, |a, b| a | b)
        })
        .collect();
    let mut total = 0.0;
    for pattern in 0u32..(1 << ranks.len()) {
        let mut weight = 1.0;
        for (bit, &r) in ranks.iter().enumerate() {
            weight *= if pattern & (1 << bit) != 0 { prob(r) } else { 1.0 - prob(r) };
        }
        if weight == 0.0 {
            continue;
        }
        let best = nodes
            .iter()
            .zip(&masks)
            .filter(|(_, &m)| m & pattern == m)
            .map(|(s, _)| s.len())
            .max()
            .unwrap_or(0);
        total += weight * best as f64;
    }
    Ok(total)
}

/// Estimate rank acceptance from probe traces, then search the topology.
pub fn calibrate_topology(traces: &[DecodeTrace], k_max: usize) -> Result<Calibration, GraphError> {
    if traces.is_empty() {
        return Err(GraphError::NoTraces);
    }
    let estimates = estimate_rank_acceptance(traces);
    let p: Vec<f64> = estimates.iter().map(|e| e.p).collect();
    let (graph, expected_accepted) = select_topology(&p, k_max)?;
    Ok(Calibration {
        graph,
        estimates,
        expected_accepted,
    })
}

/// Greedy marginal-gain search over the chain-plus-skip family restricted to
/// ranks `1..=p.len()`. Every added node must extend an already chosen one.
pub fn select_topology(p: &[f64], k_max: usize) -> Result<(DraftGraph, f64), GraphError> {
    if k_max == 0 {
        return Err(GraphError::ZeroBudget);
    }
    let d_max = p.len();
    let (all_nodes, all_edges) = family(d_max, CALIBRATION_BRANCH);
    let admissible: Vec<bool> = all_nodes
        .iter()
        .map(|s| s.last().is_none_or(|&r| r <= d_max))
        .collect();

    let mut chosen = vec![0usize];
    let mut current = 0.0;
    while chosen.len() < k_max {
        let mut best: Option<(usize, f64, f64)> = None;
        for cand in 0..all_nodes.len() {
            if !admissible[cand] || chosen.contains(&cand) {
                continue;
            }
            let reachable = all_edges
                .iter()
                .any(|&(p, k)| k == cand && chosen.contains(&p));
            if !reachable {
                continue;
            }
            let mut trial: Vec<RankSet> = chosen.iter().map(|&c| all_nodes[c].clone()).collect();
            trial.push(all_nodes[cand].clone());
            let value = expected_accepted(&trial, p)?;
            let gain = value - current;
            if best.is_none_or(|(_, g, _)| gain > g) {
                best = Some((cand, gain, value));
            }
        }
        match best {
            Some((cand, gain, value)) if gain > 1e-12 => {
                chosen.push(cand);
                current = value;
            }
            _ => break,
        }
    }

    chosen.sort_unstable();
    let new_id = |old: usize| chosen.iter().position(|&c| c == old);
    let nodes = chosen.iter().map(|&c| all_nodes[c].clone()).collect();
    let edges = all_edges
        .iter()
        .filter_map(|&(p, k)| Some((new_id(p)?, new_id(k)?)))
        .collect();
    Ok((DraftGraph::new(nodes, edges)?, current))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(r: &[usize]) -> RankSet {
        r.iter().copied().collect()
    }

    #[test]
    fn expected_value_of_a_chain() {
        let nodes = vec![set(&[]), set(&[1]), set(&[1, 2])];
        let e = expected_accepted(&nodes, &[0.9, 0.5]).unwrap();
        assert!((e - (0.9 * 0.5 * 2.0 + 0.9 * 0.5 * 1.0)).abs() < 1e-12);
        assert_eq!(expected_accepted(&[set(&[])], &[]).unwrap(), 0.0);
    }

    #[test]
    fn too_many_ranks() {
        let nodes = vec![set(&[]), (1..=17).collect()];
        assert_eq!(
            expected_accepted(&nodes, &[]),
            Err(GraphError::TooManyRanks(17, MAX_CALIBRATION_RANKS))
        );
    }

    #[test]
    fn certain_acceptance_gives_a_chain() {
        let (g, e) = select_topology(&[1.0; 5], 4).unwrap();
        assert_eq!(g, DraftGraph::chain(3));
        assert_eq!(e, 3.0);
        let (g, _) = select_topology(&[1.0; 3], 10).unwrap();
        assert_eq!(g, DraftGraph::chain(3));
    }

    #[test]
    fn hopeless_ranks_give_root_only() {
        let (g, e) = select_topology(&[0.0; 4], 6).unwrap();
        assert_eq!(g, DraftGraph::root_only());
        assert_eq!(e, 0.0);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(calibrate_topology(&[], 4).unwrap_err(), GraphError::NoTraces);
    }
}
