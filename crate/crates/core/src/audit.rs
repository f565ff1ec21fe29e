//! Replays a trace from its header and checks that every commit was legal
//! under the recorded policy, using only what the trace itself contains.
//!
//! The selection rules are re-derived here rather than calling into the
//! policy module, so a bug in one does not hide in the other.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::policy::{Fallback, PolicyConfig, PolicyKind};
use crate::trace::{CommitRecord, DecodeTrace, IterationRecord, PredictionRecord};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub iteration: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.iteration {
            Some(t) => write!(f, "iteration {t}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

type Preds = BTreeMap<usize, (TokenId, f64)>;

fn preds_of(records: &[PredictionRecord]) -> Preds {
    records
        .iter()
        .map(|p| (p.position, (p.token, p.confidence)))
        .collect()
}

/// Highest confidence, lowest position on ties.
fn best(preds: &Preds, among: &[usize]) -> Option<usize> {
    among
        .iter()
        .filter_map(|&p| preds.get(&p).map(|&(_, c)| (p, c)))
        .fold(None, |acc: Option<(usize, f64)>, (p, c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((p, c)),
        })
        .map(|(p, _)| p)
}

/// The set the policy must have committed over `masked` (ascending), or
/// `None` when the policy would have stalled.
fn expected_selection(policy: &PolicyConfig, masked: &[usize], preds: &Preds) -> Option<BTreeSet<usize>> {
    let conf = |p: usize| preds.get(&p).map_or(f64::NEG_INFINITY, |&(_, c)| c);
    let top1 = || best(preds, masked).into_iter().collect::<BTreeSet<_>>();
    let hits: BTreeSet<usize> = match policy.kind {
        PolicyKind::Greedy => return Some(top1()),
        PolicyKind::Confidence => masked.iter().copied().filter(|&p| conf(p) >= policy.tau).collect(),
        PolicyKind::LocalLeap => {
            let anchor = policy.anchor_tau.unwrap_or(policy.tau);
            let mut out = BTreeSet::new();
            for (idx, &p) in masked.iter().enumerate() {
                if conf(p) >= anchor {
                    let lo = idx.saturating_sub(policy.window);
                    let hi = (idx + policy.window).min(masked.len() - 1);
                    out.extend(&masked[lo..=hi]);
                }
            }
            out
        }
    };
    if !hits.is_empty() {
        return Some(hits);
    }
    match policy.fallback {
        Fallback::Top1 => Some(top1()),
        Fallback::StallError => None,
    }
}

/// Whether `token` at `position` passes the acceptance test against `parent`.
fn endorsed(policy: &PolicyConfig, token: TokenId, position: usize, parent: &Preds) -> bool {
    let Some(&(pred, conf)) = parent.get(&position) else {
        return false;
    };
    if pred != token {
        return false;
    }
    match policy.kind {
        PolicyKind::Greedy => {
            let all: Vec<usize> = parent.keys().copied().collect();
            best(parent, &all) == Some(position)
        }
        PolicyKind::Confidence | PolicyKind::LocalLeap => conf >= policy.tau,
    }
}

struct Auditor<'a> {
    trace: &'a DecodeTrace,
    tokens: Vec<TokenId>,
    active: usize,
    violations: Vec<Violation>,
    iteration: Option<usize>,
}

impl<'a> Auditor<'a> {
    fn flag(&mut self, message: impl Into<String>) {
        self.violations.push(Violation {
            iteration: self.iteration,
            message: message.into(),
        });
    }

    fn num_blocks(&self) -> usize {
        self.trace.header.max_new_tokens.div_ceil(self.trace.header.block_len)
    }

    fn block_positions(&self, b: usize) -> std::ops::Range<usize> {
        let h = &self.trace.header;
        let start = h.prompt_len() + b * h.block_len;
        start..(start + h.block_len).min(h.prompt_len() + h.max_new_tokens)
    }

    fn masked_in(&self, b: usize) -> Vec<usize> {
        let mask = self.trace.header.mask_id;
        self.block_positions(b).filter(|&p| self.tokens[p] == mask).collect()
    }

    fn check_selection(&mut self, what: &str, masked: &[usize], preds: &Preds, commits: &[CommitRecord], stall_ok: bool) {
        let policy = self.trace.header.policy;
        for c in commits {
            match preds.get(&c.position) {
                Some(&(tok, conf)) if tok == c.token && conf == c.confidence => {}
                _ => self.flag(format!("{what} commit at {} does not match its prediction", c.position)),
            }
        }
        let got: BTreeSet<usize> = commits.iter().map(|c| c.position).collect();
        if got.len() != commits.len() {
            self.flag(format!("duplicate {what} positions"));
        }
        if masked.is_empty() {
            if !commits.is_empty() {
                self.flag(format!("{what} commits with nothing masked"));
            }
            return;
        }
        match expected_selection(&policy, masked, preds) {
            Some(expected) if expected == got => {}
            None if got.is_empty() && stall_ok => {}
            expected => self.flag(format!(
                "{what} commits {got:?} violate the {} rule (expected {expected:?})",
                policy.kind.id()
            )),
        }
    }

    fn commit(&mut self, c: &CommitRecord) {
        let h = &self.trace.header;
        let range = self.block_positions(self.active);
        if !range.contains(&c.position) {
            self.flag(format!("commit at {} outside the active block", c.position));
            return;
        }
        if self.tokens[c.position] != h.mask_id {
            self.flag(format!("commit at {} overwrites a decoded token", c.position));
            return;
        }
        if c.token >= h.vocab_size {
            self.flag(format!("commit at {} of non-vocabulary token {}", c.position, c.token));
            return;
        }
        self.tokens[c.position] = c.token;
    }

    fn iteration(&mut self, t: usize, it: &IterationRecord) {
        self.iteration = Some(t);
        let h = &self.trace.header;
        let policy = h.policy;
        while self.active < self.num_blocks() && self.masked_in(self.active).is_empty() {
            self.active += 1;
        }
        if self.active >= self.num_blocks() {
            self.flag("iteration after generation finished");
            return;
        }
        if it.step != t || it.block != self.active {
            self.flag(format!("step/block ({}, {}) expected ({t}, {})", it.step, it.block, self.active));
        }

        // Stage 1.
        let masked = self.masked_in(self.active);
        let cached = preds_of(&it.stage1);
        if !cached.keys().copied().eq(masked.iter().copied()) {
            self.flag("spatial pass predictions do not cover exactly the masked positions");
        }
        self.check_selection("spatial", &masked, &cached, &it.spatial, false);
        for c in &it.spatial {
            self.commit(c);
        }

        // Speculative ordering.
        let mut expected_sigma: Vec<(usize, f64)> = self
            .masked_in(self.active)
            .into_iter()
            .filter_map(|p| cached.get(&p).map(|&(_, c)| (p, c)))
            .collect();
        expected_sigma.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let sigma: Vec<(usize, f64)> = it.sigma.iter().map(|s| (s.position, s.confidence)).collect();
        if sigma != expected_sigma {
            self.flag("sigma is not the confidence ordering of the remaining masks");
        }

        if it.drafts.is_empty() {
            if it.forward_passes != 1 || !it.speculative.is_empty() || !it.verifier.is_empty() {
                self.flag("iteration without drafts must be one pass with spatial commits only");
            }
            return;
        }
        if it.forward_passes != 2 {
            self.flag("verified iteration must count two passes");
        }

        // Acceptance bookkeeping.
        let drafts: BTreeMap<usize, _> = it.drafts.iter().map(|d| (d.node, d)).collect();
        let accepted = |n: usize| drafts.get(&n).is_some_and(|d| d.accepted);
        if !accepted(0) {
            self.flag("root draft not accepted");
        }
        for d in it.drafts.iter().filter(|d| d.accepted && d.node != 0) {
            match d.via {
                Some(p) if d.parents.contains(&p) && accepted(p) => {}
                _ => self.flag(format!("draft {} accepted without an accepted parent", d.node)),
            }
        }
        let Some(k_star) = it.k_star.filter(|&k| accepted(k)) else {
            self.flag("k* missing or not accepted");
            return;
        };

        // Speculative commits: cached token, endorsed by an accepted parent.
        let k_ranks: BTreeSet<usize> = drafts[&k_star].ranks.iter().copied().collect();
        let mut spec_ranks = BTreeSet::new();
        for c in &it.speculative {
            let rank = c.rank.unwrap_or(0);
            spec_ranks.insert(rank);
            if sigma.get(rank.wrapping_sub(1)).map(|s| s.0) != Some(c.position) {
                self.flag(format!("speculative commit at {} has wrong rank {rank}", c.position));
            }
            if cached.get(&c.position).map(|x| x.0) != Some(c.token) {
                self.flag(format!("speculative token at {} is not the cached prediction", c.position));
            }
            let parent = c.parent.filter(|&p| accepted(p));
            match parent.and_then(|p| it.evidence_for(p)) {
                Some(ev) => {
                    let ev = preds_of(&ev.predictions);
                    if !endorsed(&policy, c.token, c.position, &ev) {
                        self.flag(format!("speculative commit at {} fails the acceptance test", c.position));
                    }
                    if ev.get(&c.position).map(|x| x.1) != Some(c.confidence) {
                        self.flag(format!("speculative commit at {} records a foreign confidence", c.position));
                    }
                }
                None => self.flag(format!("speculative commit at {} lacks accepted-parent evidence", c.position)),
            }
        }
        if spec_ranks != k_ranks || spec_ranks.len() != it.speculative.len() {
            self.flag(format!("speculative ranks {spec_ranks:?} differ from k* ranks {k_ranks:?}"));
        }
        for c in &it.speculative {
            self.commit(c);
        }

        // Verifier commits from k*'s own output.
        let remaining = self.masked_in(self.active);
        match it.evidence_for(k_star) {
            Some(ev) => {
                let ev = preds_of(&ev.predictions);
                if !ev.keys().copied().eq(remaining.iter().copied()) {
                    self.flag("k* verifier output does not cover exactly its masked positions");
                }
                self.check_selection("verifier", &remaining, &ev, &it.verifier, k_star != 0);
            }
            None => self.flag("no verifier evidence for k*"),
        }
        for c in &it.verifier {
            self.commit(c);
        }
    }
}

/// Every legality violation found while replaying `trace`.
pub fn audit_trace(trace: &DecodeTrace) -> Vec<Violation> {
    let h = &trace.header;
    let mut tokens = h.prompt.clone();
    tokens.resize(h.prompt_len() + h.max_new_tokens, h.mask_id);
    let mut a = Auditor {
        trace,
        tokens,
        active: 0,
        violations: Vec::new(),
        iteration: None,
    };
    if h.block_len == 0 {
        a.flag("zero block length");
        return a.violations;
    }
    for (t, it) in trace.iterations.iter().enumerate() {
        a.iteration(t, it);
        let eos = it.commits().any(|(c, _)| c.token == h.eos_id);
        if h.eos_stop && eos && t + 1 != trace.iterations.len() {
            a.flag("decoding continued after an eos commit");
        }
    }
    a.iteration = None;
    if a.tokens != trace.summary.final_tokens {
        a.flag("summary tokens differ from the replayed sequence");
    }
    if trace.summary.forward_passes != trace.total_forward_passes() {
        a.flag("summary pass count differs from the iterations");
    }
    let committed: u64 = trace.iterations.iter().map(|it| it.committed() as u64).sum();
    if trace.summary.committed != committed {
        a.flag("summary commit count differs from the iterations");
    }
    a.violations
}
