mod common;

use std::collections::BTreeSet;

use common::frontier;
use proptest::prelude::*;
use psd_core::metrics::{
    acceptance_by_rank, acceptance_rate_by_rank, contribution_profile, precision_at_k, precision_oracle_bound, tpf, PrecisionVariant,
};
use psd_core::trace::{CommitRecord, IterationRecord, SigmaRecord, TraceHeader, TraceSummary, TRACE_SCHEMA_VERSION};
use psd_core::denoiser::{FrontierOracle, FrontierOracleConfig};
use psd_core::{decode, DecodeMode, DecodeTrace, EngineConfig, PolicyConfig, TopologyConfig, Vocabulary};

const EOS: u32 = 7;

fn commit(position: usize, token: u32) -> CommitRecord {
    CommitRecord { position, token, confidence: 0.95, parent: None, rank: None }
}

/// Iteration with commits given as (spatial, speculative, verifier) positions.
fn iteration(step: usize, passes: u32, spatial: &[usize], spec: &[usize], ver: &[usize], sigma: &[usize]) -> IterationRecord {
    IterationRecord {
        step,
        block: 0,
        forward_passes: passes,
        batch_size: 0,
        stage1: vec![],
        spatial: spatial.iter().map(|&p| commit(p, 0)).collect(),
        sigma: sigma.iter().map(|&position| SigmaRecord { position, confidence: 0.5 }).collect(),
        drafts: vec![],
        k_star: None,
        speculative: spec.iter().map(|&p| commit(p, 0)).collect(),
        verifier: ver.iter().map(|&p| commit(p, 0)).collect(),
        evidence: vec![],
    }
}

fn trace(iterations: Vec<IterationRecord>, block_len: usize, max_new: usize) -> DecodeTrace {
    DecodeTrace {
        header: TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            mode: DecodeMode::Psd,
            policy: PolicyConfig::confidence(0.9),
            block_len,
            max_new_tokens: max_new,
            eos_stop: true,
            vocab_size: 8,
            eos_id: EOS,
            mask_id: 8,
            prompt: vec![0],
            graph_nodes: vec![vec![]],
            graph_edges: vec![],
        },
        iterations,
        summary: TraceSummary { final_tokens: vec![], forward_passes: 0, committed: 0, eos_position: None },
    }
}

#[test]
fn tpf_arithmetic() {
    let t = trace(
        vec![
            iteration(0, 2, &[1, 2], &[3, 4, 5], &[6], &[]),
            iteration(1, 2, &[7, 8], &[9], &[10], &[]),
        ],
        16,
        16,
    );
    assert_eq!(tpf(&t), 10.0 / 4.0);
    let uniform = trace(
        (0..3)
            .map(|i| {
                let b = 1 + 6 * i;
                iteration(i, 2, &[b, b + 1], &[b + 2, b + 3, b + 4], &[b + 5], &[])
            })
            .collect(),
        32,
        32,
    );
    assert_eq!(tpf(&uniform), 3.0);
}

#[test]
fn tpf_truncates_at_eos() {
    let mut its = vec![
        iteration(0, 2, &[1, 2], &[3, 4], &[5], &[]),
        iteration(1, 2, &[6], &[7, 8], &[9], &[]),
    ];
    // eos at position 7 in iteration 1: count positions <= 7 in iterations 0..=1.
    its[1].speculative[0].token = EOS;
    its[1].verifier[0].token = EOS;
    let t = trace(its, 16, 16);
    assert_eq!(t.eos_cutoff(), Some((1, 7)));
    assert_eq!(tpf(&t), 7.0 / 4.0);
}

#[test]
fn precision_set_arithmetic() {
    // C = top-3 of sigma = {3, 7, 9}; D = {3, 9, 12} committed in the next iteration.
    let t = trace(
        vec![iteration(0, 1, &[1], &[], &[], &[3, 7, 9, 11]), iteration(1, 1, &[3, 9, 12], &[], &[], &[])],
        16,
        16,
    );
    assert_eq!(precision_at_k(&t, 3, 1, PrecisionVariant::HitRate), 2.0 / 3.0);
    assert_eq!(precision_at_k(&t, 3, 1, PrecisionVariant::WindowCoverage), 2.0 / 3.0);
    assert_eq!(precision_oracle_bound(&t, 5, 1, PrecisionVariant::HitRate), 3.0 / 5.0);
}

#[test]
fn contribution_shares() {
    // Block of 4: spatial, speculative, speculative, verifier.
    let t = trace(vec![iteration(0, 2, &[1], &[2, 3], &[4], &[])], 4, 4);
    let p = contribution_profile(&[t], 4);
    let spec: Vec<f64> = p.iter().map(|b| b.speculative_pct).collect();
    assert_eq!(spec, vec![0.0, 100.0, 100.0, 0.0]);
    assert!(p.iter().all(|b| b.tokens == 0 || b.spatial_pct + b.speculative_pct == 100.0));
}

#[test]
fn greedy_traces_are_all_spatial() {
    let (o, p) = frontier(4, 0.03, 0.05, 0.9, 40);
    let c = EngineConfig {
        mode: DecodeMode::GreedyOnly,
        block_len: 8,
        max_new_tokens: 24,
        ..EngineConfig::default()
    };
    let out = decode(&c, &o, &p).unwrap();
    for b in contribution_profile(&[out.trace], 5) {
        assert_eq!(b.speculative_pct, 0.0);
        assert!(b.tokens == 0 || b.spatial_pct == 100.0);
    }
}

#[test]
fn acceptance_rates_on_extreme_oracles() {
    let c = EngineConfig {
        policy: PolicyConfig::confidence(0.9),
        topology: TopologyConfig::chain(3),
        block_len: 16,
        max_new_tokens: 32,
        eos_stop: false,
        mode: DecodeMode::Psd,
    };
    // Noise-free, always-correct oracle with a gentle slope: every offered rank is endorsed.
    let (o, p) = frontier(2, 0.02, 0.0, 1.0, 40);
    let rates = acceptance_rate_by_rank(&[decode(&c, &o, &p).unwrap().trace]);
    assert_eq!(rates.len(), 3);
    assert!(rates.iter().all(|&r| r == 1.0), "{rates:?}");
    // Never-correct oracle: cached and verifier tokens are independent wrong
    // draws, so with a large vocabulary they essentially never agree.
    let vocab = Vocabulary::new(1000, 999).unwrap();
    let reference: Vec<u32> = (0..40).map(|i| (i * 37) % 999).collect();
    let o = FrontierOracle::new(
        FrontierOracleConfig {
            reference: reference.clone(),
            c_max: 0.99,
            decay: 0.02,
            noise_scale: 0.0,
            correctness: 0.0,
            floor: 0.05,
            seed: 2,
            drift: false,
        },
        vocab,
    )
    .unwrap();
    let ranks = acceptance_by_rank(&[decode(&c, &o, &reference[..2]).unwrap().trace]);
    assert!(ranks[0].offered > 0);
    assert_eq!(ranks[0].rate, 0.0);
}

/// Coverage recomputed from the raw JSONL with an untyped parser.
fn coverage_from_json(text: &str, k: usize, h: usize) -> f64 {
    let its: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "iteration")
        .collect();
    let positions = |v: &serde_json::Value| -> Vec<usize> {
        ["spatial", "speculative", "verifier"]
            .iter()
            .flat_map(|key| v[key].as_array().unwrap().iter().map(|c| c["position"].as_u64().unwrap() as usize))
            .collect()
    };
    let mut scores = Vec::new();
    for t in 0..its.len().saturating_sub(1) {
        let sigma = its[t]["sigma"].as_array().unwrap();
        if sigma.is_empty() {
            continue;
        }
        let c: BTreeSet<usize> = sigma.iter().take(k).map(|s| s["position"].as_u64().unwrap() as usize).collect();
        let d: BTreeSet<usize> = its[t + 1..its.len().min(t + 1 + h)].iter().flat_map(positions).collect();
        scores.push(c.intersection(&d).count() as f64 / d.len().max(1) as f64);
    }
    if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 }
}

#[test]
fn coverage_curve_matches_raw_recomputation() {
    let (o, p) = frontier(8, 0.03, 0.0, 1.0, 80);
    let c = EngineConfig {
        topology: TopologyConfig::chain(2),
        block_len: 32,
        max_new_tokens: 64,
        eos_stop: false,
        ..EngineConfig::default()
    };
    let t = decode(&c, &o, &p).unwrap().trace;
    let text = t.to_jsonl();
    for h in 1..=10 {
        let ours = precision_at_k(&t, 5, h, PrecisionVariant::WindowCoverage);
        assert!((ours - coverage_from_json(&text, 5, h)).abs() < 1e-12, "h={h}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn empirical_precision_never_exceeds_bound(seed in 0u64..5000, depth in 0usize..6, k in 1usize..10, h in 1usize..11) {
        let (o, p) = frontier(seed, 0.02, 0.1, 0.8, 40);
        let c = EngineConfig {
            topology: TopologyConfig::chain(depth),
            block_len: 16,
            max_new_tokens: 32,
            eos_stop: false,
            ..EngineConfig::default()
        };
        let t = decode(&c, &o, &p).unwrap().trace;
        for v in PrecisionVariant::ALL {
            let e = precision_at_k(&t, k, h, v);
            let b = precision_oracle_bound(&t, k, h, v);
            prop_assert!(e <= b && (0.0..=1.0).contains(&e) && b <= 1.0);
        }
    }
}
