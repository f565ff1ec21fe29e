//! Statistics computed from decode traces alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::state::CommitSource;
use crate::trace::DecodeTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionVariant {
    /// `|C ∩ D| / K`
    HitRate,
    /// `|C ∩ D| / max(1, |D|)`
    WindowCoverage,
}

impl PrecisionVariant {
    pub const ALL: [PrecisionVariant; 2] = [PrecisionVariant::HitRate, PrecisionVariant::WindowCoverage];

    pub fn id(self) -> &'static str {
        match self {
            PrecisionVariant::HitRate => "hit_rate",
            PrecisionVariant::WindowCoverage => "window_coverage",
        }
    }

    fn score(self, hits: usize, k: usize, window: usize) -> f64 {
        match self {
            PrecisionVariant::HitRate => hits as f64 / k as f64,
            PrecisionVariant::WindowCoverage => hits as f64 / window.max(1) as f64,
        }
    }

    fn bound(self, k: usize, window: usize) -> f64 {
        self.score(k.min(window), k, window)
    }
}

/// EOS-truncated `(committed tokens, forward passes)`.
pub fn tpf_counts(trace: &DecodeTrace) -> (u64, u64) {
    match trace.eos_cutoff() {
        Some((t_eos, p_eos)) => {
            let head = &trace.iterations[..=t_eos];
            let tokens = head
                .iter()
                .flat_map(|it| it.commits())
                .filter(|(c, _)| c.position <= p_eos)
                .count() as u64;
            let passes = head.iter().map(|it| u64::from(it.forward_passes)).sum();
            (tokens, passes)
        }
        None => (
            trace.iterations.iter().map(|it| it.committed() as u64).sum(),
            trace.total_forward_passes(),
        ),
    }
}

/// Tokens per forward pass, truncated at the first committed eos.
pub fn tpf(trace: &DecodeTrace) -> f64 {
    ratio(tpf_counts(trace))
}

/// Pooled TPF: total truncated tokens over total truncated passes.
pub fn pooled_tpf(traces: &[DecodeTrace]) -> f64 {
    ratio(
        traces
            .iter()
            .map(tpf_counts)
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d)),
    )
}

fn ratio((num, den): (u64, u64)) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Spatial commits per iteration, pooled over traces.
pub fn pooled_reveal_rate(traces: &[DecodeTrace]) -> f64 {
    let steps: usize = traces.iter().map(|t| t.iterations.len()).sum();
    let revealed: usize = traces
        .iter()
        .flat_map(|t| &t.iterations)
        .map(|it| it.spatial.len())
        .sum();
    ratio((revealed as u64, steps as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankAcceptance {
    pub rank: usize,
    pub offered: u64,
    pub accepted: u64,
    pub rate: f64,
}

/// For each rank of the traces' graphs, the fraction of iterations offering
/// it in which some accepted draft contained it. Ranks never offered get 0.
pub fn acceptance_by_rank(traces: &[DecodeTrace]) -> Vec<RankAcceptance> {
    let max_rank = traces
        .iter()
        .flat_map(|t| t.header.graph_nodes.iter().flatten())
        .copied()
        .max()
        .unwrap_or(0);
    let mut offered = vec![0u64; max_rank + 1];
    let mut accepted = vec![0u64; max_rank + 1];
    for it in traces.iter().flat_map(|t| &t.iterations) {
        let ranks_in = |accepted_only: bool| -> BTreeSet<usize> {
            it.drafts
                .iter()
                .filter(|d| !accepted_only || d.accepted)
                .flat_map(|d| d.ranks.iter().copied())
                .collect()
        };
        for r in ranks_in(false) {
            offered[r] += 1;
        }
        for r in ranks_in(true) {
            accepted[r] += 1;
        }
    }
    (1..=max_rank)
        .map(|rank| RankAcceptance {
            rank,
            offered: offered[rank],
            accepted: accepted[rank],
            rate: ratio((accepted[rank], offered[rank])),
        })
        .collect()
}

pub fn acceptance_rate_by_rank(traces: &[DecodeTrace]) -> Vec<f64> {
    acceptance_by_rank(traces).into_iter().map(|r| r.rate).collect()
}

/// Per-anchor `(|C ∩ D|, |D|)` where `C` is the top-`k` of the anchor's σ
/// snapshot and `D` the positions committed in the next `h` iterations.
/// Anchors need at least one later iteration and a non-empty σ.
fn anchors(trace: &DecodeTrace, k: usize, h: usize) -> Vec<(usize, usize)> {
    let its = &trace.iterations;
    (0..its.len().saturating_sub(1))
        .filter(|&t| !its[t].sigma.is_empty())
        .map(|t| {
            let candidates: BTreeSet<usize> = its[t].sigma.iter().take(k).map(|s| s.position).collect();
            let window: BTreeSet<usize> = its[t + 1..its.len().min(t + 1 + h)]
                .iter()
                .flat_map(|it| it.commits().map(|(c, _)| c.position))
                .collect();
            (candidates.intersection(&window).count(), window.len())
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Empirical lookahead precision averaged over anchor iterations.
pub fn precision_at_k(trace: &DecodeTrace, k: usize, h: usize, variant: PrecisionVariant) -> f64 {
    precision_pooled(std::slice::from_ref(trace), k, h, variant).0
}

/// Best achievable precision for the same windows: `|C ∩ D| ≤ min(K, |D|)`.
pub fn precision_oracle_bound(trace: &DecodeTrace, k: usize, h: usize, variant: PrecisionVariant) -> f64 {
    precision_pooled(std::slice::from_ref(trace), k, h, variant).1
}

/// `(empirical, bound)` averaged over the anchors of all traces.
pub fn precision_pooled(
    traces: &[DecodeTrace],
    k: usize,
    h: usize,
    variant: PrecisionVariant,
) -> (f64, f64) {
    assert!(k >= 1 && h >= 1, "K and h must be positive");
    let all: Vec<(usize, usize)> = traces.iter().flat_map(|t| anchors(t, k, h)).collect();
    (
        mean(all.iter().map(|&(hits, w)| variant.score(hits, k, w))),
        mean(all.iter().map(|&(_, w)| variant.bound(k, w))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub k: usize,
    pub h: usize,
    pub variant: PrecisionVariant,
    pub empirical: f64,
    pub oracle: f64,
}

pub fn precision_curves(traces: &[DecodeTrace], ks: &[usize], h_max: usize) -> Vec<PrecisionPoint> {
    let mut out = Vec::new();
    for &k in ks {
        for variant in PrecisionVariant::ALL {
            for h in 1..=h_max {
                let (empirical, oracle) = precision_pooled(traces, k, h, variant);
                out.push(PrecisionPoint {
                    k,
                    h,
                    variant,
                    empirical,
                    oracle,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionBucket {
    pub lo: f64,
    pub hi: f64,
    pub tokens: u64,
    pub spatial_pct: f64,
    pub speculative_pct: f64,
}

/// Share of speculative versus spatial commits along normalised block
/// progress. Verifier commits count as spatial.
pub fn contribution_profile(traces: &[DecodeTrace], buckets: usize) -> Vec<ContributionBucket> {
    assert!(buckets >= 1, "at least one bucket");
    let mut spatial = vec![0u64; buckets];
    let mut speculative = vec![0u64; buckets];
    for trace in traces {
        let mut done_in_block: BTreeMap<usize, usize> = BTreeMap::new();
        for it in &trace.iterations {
            for (c, source) in it.commits() {
                let block = trace.header.block_of(c.position);
                let len = trace.header.block_len_at(c.position).max(1);
                let before = done_in_block.entry(block).or_insert(0);
                let progress = *before as f64 / len as f64;
                *before += 1;
                let b = ((progress * buckets as f64) as usize).min(buckets - 1);
                match source {
                    CommitSource::Speculative => speculative[b] += 1,
                    CommitSource::Spatial | CommitSource::VerifierCommit => spatial[b] += 1,
                }
            }
        }
    }
    (0..buckets)
        .map(|b| {
            let tokens = spatial[b] + speculative[b];
            let (spatial_pct, speculative_pct) = if tokens == 0 {
                (0.0, 0.0)
            } else {
                let s = 100.0 * spatial[b] as f64 / tokens as f64;
                (s, 100.0 - s)
            };
            ContributionBucket {
                lo: b as f64 / buckets as f64,
                hi: (b + 1) as f64 / buckets as f64,
                tokens,
                spatial_pct,
                speculative_pct,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_ks")]
    pub k: Vec<usize>,
    #[serde(default = "default_h_max")]
    pub h_max: usize,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
}

fn default_ks() -> Vec<usize> {
    vec![5, 7, 9]
}

fn default_h_max() -> usize {
    10
}

fn default_buckets() -> usize {
    10
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: default_ks(),
            h_max: default_h_max(),
            buckets: default_buckets(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub traces: usize,
    pub tpf: f64,
    pub mean_reveal_rate: f64,
    pub acceptance_rate_by_rank: Vec<RankAcceptance>,
    pub precision: Vec<PrecisionPoint>,
    pub contribution_profile: Vec<ContributionBucket>,
}

pub fn report(traces: &[DecodeTrace], cfg: &MetricsConfig) -> MetricsReport {
    MetricsReport {
        traces: traces.len(),
        tpf: pooled_tpf(traces),
        mean_reveal_rate: pooled_reveal_rate(traces),
        acceptance_rate_by_rank: acceptance_by_rank(traces),
        precision: precision_curves(traces, &cfg.k, cfg.h_max),
        contribution_profile: contribution_profile(traces, cfg.buckets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_arithmetic() {
        // C = {3, 7, 9}, D = {3, 9, 12}
        assert_eq!(PrecisionVariant::HitRate.score(2, 3, 3), 2.0 / 3.0);
        assert_eq!(PrecisionVariant::WindowCoverage.score(2, 3, 3), 2.0 / 3.0);
        // D ⊇ C, |D| = 2K
        assert_eq!(PrecisionVariant::HitRate.score(4, 4, 8), 1.0);
        assert_eq!(PrecisionVariant::WindowCoverage.score(4, 4, 8), 0.5);
        assert_eq!(PrecisionVariant::HitRate.bound(5, 2), 0.4);
        assert_eq!(PrecisionVariant::WindowCoverage.bound(5, 8), 5.0 / 8.0);
        assert_eq!(PrecisionVariant::WindowCoverage.bound(5, 0), 0.0);
    }

    #[test]
    fn empty_inputs_give_zero() {
        assert_eq!(pooled_tpf(&[]), 0.0);
        assert_eq!(pooled_reveal_rate(&[]), 0.0);
        assert!(acceptance_by_rank(&[]).is_empty());
        let profile = contribution_profile(&[], 4);
        assert_eq!(profile.len(), 4);
        assert!(profile.iter().all(|b| b.tokens == 0));
    }
}
