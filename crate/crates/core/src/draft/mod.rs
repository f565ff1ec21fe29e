//! Draft graphs over ranks of the speculative ordering.
//!
//! A node holds a set of 1-based ranks into the ordering σ; node 0 is the
//! root with the empty set. An edge `p -> k` requires `S_p ⊂ S_k` strictly,
//! so every graph is acyclic by construction. Graphs are defined over ranks
//! rather than positions, so one graph serves every decoding step.

mod assemble;
mod calibrate;

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assemble::{assemble_drafts, speculative_ordering, DraftSequence, DraftSet, SigmaEntry, SpeculativeOrdering};
pub use calibrate::{
    calibrate_topology, estimate_rank_acceptance, expected_accepted, select_topology, Calibration,
    RankEstimate, CALIBRATION_BRANCH, MAX_CALIBRATION_RANKS,
};

pub type RankSet = BTreeSet<usize>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("node 0 must be the root with an empty rank set")]
    BadRoot,
    #[error("node {0} has an empty rank set but is not the root")]
    EmptyNonRoot(usize),
    #[error("ranks are 1-based; node {0} contains rank 0")]
    ZeroRank(usize),
    #[error("edge ({0}, {1}) references a missing node")]
    DanglingEdge(usize, usize),
    #[error("edge ({0}, {1}) does not satisfy strict subset inclusion")]
    NotStrictSubset(usize, usize),
    #[error("node {0} has no parent")]
    Orphan(usize),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("budget must allow at least the root node")]
    ZeroBudget,
    #[error("graph text line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no traces to calibrate from")]
    NoTraces,
    #[error("calibration over {0} ranks exceeds the supported {1}")]
    TooManyRanks(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftGraph {
    nodes: Vec<RankSet>,
    edges: Vec<(usize, usize)>,
}

impl DraftGraph {
    /// Validate and build. Edges are deduplicated and sorted.
    pub fn new(nodes: Vec<RankSet>, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        if !nodes[0].is_empty() {
            return Err(GraphError::BadRoot);
        }
        for (k, s) in nodes.iter().enumerate().skip(1) {
            if s.is_empty() {
                return Err(GraphError::EmptyNonRoot(k));
            }
            if s.contains(&0) {
                return Err(GraphError::ZeroRank(k));
            }
        }
        let mut edges: Vec<(usize, usize)> = edges;
        edges.sort_unstable();
        edges.dedup();
        for &(p, k) in &edges {
            if p >= nodes.len() || k >= nodes.len() {
                return Err(GraphError::DanglingEdge(p, k));
            }
            if !(nodes[p].len() < nodes[k].len() && nodes[p].is_subset(&nodes[k])) {
                return Err(GraphError::NotStrictSubset(p, k));
            }
        }
        let g = Self { nodes, edges };
        for k in 1..g.nodes.len() {
            if !g.edges.iter().any(|&(_, c)| c == k) {
                return Err(GraphError::Orphan(k));
            }
        }
        g.topological_order()?;
        Ok(g)
    }

    pub fn root_only() -> Self {
        Self {
            nodes: vec![RankSet::new()],
            edges: Vec::new(),
        }
    }

    /// Pure chain of depth `d`.
    pub fn chain(d: usize) -> Self {
        build_topology(&TopologyConfig {
            depth: d,
            branch: 0,
            budget: None,
        })
        .expect("chain topology is always valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[RankSet] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn ranks(&self, node: usize) -> &RankSet {
        &self.nodes[node]
    }

    /// Largest rank referenced by any node.
    pub fn max_rank(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|s| s.last().copied())
            .max()
            .unwrap_or(0)
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, c)| c == node)
            .map(|&(p, _)| p)
            .collect()
    }

    /// Kahn's algorithm; among ready nodes the smallest id goes first.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        topological_order(self.nodes.len(), &self.edges)
    }

    /// Line-oriented text form: a header, `node <id> : <ranks...>`, `edge <p> <k>`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("psd-draft-graph v1\n");
        for (k, ranks) in self.nodes.iter().enumerate() {
            let _ = write!(s, "node {k} :");
            for r in ranks {
                let _ = write!(s, " {r}");
            }
            s.push('\n');
        }
        for (p, k) in &self.edges {
            let _ = writeln!(s, "edge {p} {k}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let err = |line: usize, message: &str| GraphError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "psd-draft-graph v1")) => {}
            Some((n, _)) => return Err(err(n, "expected header `psd-draft-graph v1`")),
            None => return Err(GraphError::Empty),
        }
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("node") => {
                    let id: usize = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(n, "bad node id"))?;
                    if id != nodes.len() {
                        return Err(err(n, "node ids must be consecutive from 0"));
                    }
                    if parts.next() != Some(":") {
                        return Err(err(n, "expected `:` after node id"));
                    }
                    let ranks = parts
                        .map(|t| t.parse::<usize>().map_err(|_| err(n, "bad rank")))
                        .collect::<Result<RankSet, _>>()?;
                    nodes.push(ranks);
                }
                Some("edge") => {
                    let mut next = || {
                        parts
                            .next()
                            .and_then(|t| t.parse::<usize>().ok())
                            .ok_or_else(|| err(n, "bad edge endpoint"))
                    };
                    let p = next()?;
                    let k = next()?;
                    edges.push((p, k));
                }
                _ => return Err(err(n, "expected `node` or `edge`")),
            }
        }
        Self::new(nodes, edges)
    }
}

pub(crate) fn topological_order(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>, GraphError> {
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for &(p, k) in edges {
        indegree[k] += 1;
        children[p].push(k);
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&k| indegree[k] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(k)) = ready.pop() {
        order.push(k);
        for &c in &children[k] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(GraphError::Cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Length of the chain `{1}, {1,2}, ..., {1..d}`.
    pub depth: usize,
    /// Skip siblings per depth: sibling `q` at depth `j` fills `{1..j-1} ∪ {j+q}`.
    #[serde(default)]
    pub branch: usize,
    /// Node cap, root included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

impl TopologyConfig {
    pub fn chain(depth: usize) -> Self {
        Self {
            depth,
            branch: 0,
            budget: None,
        }
    }
}

/// Chain-plus-skip family, truncated to the budget in breadth-first order.
pub fn build_topology(cfg: &TopologyConfig) -> Result<DraftGraph, GraphError> {
    if cfg.budget == Some(0) {
        return Err(GraphError::ZeroBudget);
    }
    let (nodes, edges) = family(cfg.depth, cfg.branch);

    let mut children = vec![Vec::new(); nodes.len()];
    for &(p, k) in &edges {
        children[p].push(k);
    }
    let mut seen = vec![false; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(k) = queue.pop_front() {
        order.push(k);
        for &c in &children[k] {
            if !seen[c] {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    let keep = cfg.budget.unwrap_or(usize::MAX).min(order.len());
    let mut new_id = vec![usize::MAX; nodes.len()];
    for (i, &old) in order[..keep].iter().enumerate() {
        new_id[old] = i;
    }
    let kept_nodes = order[..keep].iter().map(|&old| nodes[old].clone()).collect();
    let kept_edges = edges
        .iter()
        .filter(|&&(p, k)| new_id[p] != usize::MAX && new_id[k] != usize::MAX)
        .map(|&(p, k)| (new_id[p], new_id[k]))
        .collect();
    DraftGraph::new(kept_nodes, kept_edges)
}

/// Untruncated chain-plus-skip family in construction order: root, then for
/// each depth the chain node followed by its skip siblings.
pub(crate) fn family(depth: usize, branch: usize) -> (Vec<RankSet>, Vec<(usize, usize)>) {
    let mut nodes = vec![RankSet::new()];
    let mut chain_ids = vec![0usize];
    let mut skips: Vec<(usize, usize)> = Vec::new(); // (node id, target chain depth)
    let mut edges = Vec::new();
    for j in 1..=depth {
        let id = nodes.len();
        nodes.push((1..=j).collect());
        edges.push((chain_ids[j - 1], id));
        chain_ids.push(id);
        for q in 1..=branch {
            let id = nodes.len();
            let mut s: RankSet = (1..j).collect();
            s.insert(j + q);
            nodes.push(s);
            edges.push((chain_ids[j - 1], id));
            skips.push((id, j + q));
        }
    }
    for (id, target) in skips {
        if target <= depth {
            edges.push((id, chain_ids[target]));
        }
    }
    (nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(r: &[usize]) -> RankSet {
        r.iter().copied().collect()
    }

    #[test]
    fn minimal_chain() {
        let g = build_topology(&TopologyConfig::chain(1)).unwrap();
        assert_eq!(g.nodes(), &[set(&[]), set(&[1])]);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn depth_three_chain() {
        let g = DraftGraph::chain(3);
        assert_eq!(g.len(), 4);
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(g.ranks(3), &set(&[1, 2, 3]));
        assert_eq!(g.max_rank(), 3);
    }

    #[test]
    fn skip_node_has_two_paths_to_chain() {
        let g = build_topology(&TopologyConfig {
            depth: 2,
            branch: 1,
            budget: None,
        })
        .unwrap();
        let skip = g.nodes().iter().position(|s| *s == set(&[2])).unwrap();
        let c2 = g.nodes().iter().position(|s| *s == set(&[1, 2])).unwrap();
        assert!(g.edges().contains(&(0, skip)));
        assert!(g.edges().contains(&(skip, c2)));
        assert_eq!(g.parents(c2).len(), 2);
    }

    #[test]
    fn budget_truncates_breadth_first() {
        let g = build_topology(&TopologyConfig {
            depth: 4,
            branch: 1,
            budget: Some(3),
        })
        .unwrap();
        assert_eq!(g.nodes(), &[set(&[]), set(&[1]), set(&[2])]);
        assert_eq!(
            build_topology(&TopologyConfig {
                depth: 2,
                branch: 0,
                budget: Some(0)
            }),
            Err(GraphError::ZeroBudget)
        );
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            DraftGraph::new(vec![set(&[]), set(&[1]), set(&[1, 2])], vec![(0, 1), (2, 1)]),
            Err(GraphError::NotStrictSubset(2, 1))
        );
        assert_eq!(
            DraftGraph::new(vec![set(&[]), set(&[1])], vec![]),
            Err(GraphError::Orphan(1))
        );
        assert_eq!(DraftGraph::new(vec![set(&[1])], vec![]), Err(GraphError::BadRoot));
        assert_eq!(
            DraftGraph::new(vec![set(&[]), set(&[0])], vec![(0, 1)]),
            Err(GraphError::ZeroRank(1))
        );
    }

    #[test]
    fn text_round_trip() {
        let g = build_topology(&TopologyConfig {
            depth: 3,
            branch: 2,
            budget: None,
        })
        .unwrap();
        let text = g.to_text();
        assert_eq!(DraftGraph::from_text(&text).unwrap(), g);
        assert!(DraftGraph::from_text("node 0 :\n").is_err());
        assert!(DraftGraph::from_text("psd-draft-graph v1\nnode 1 :\n").is_err());
    }

    #[test]
    fn topological_order_respects_edges() {
        let g = build_topology(&TopologyConfig {
            depth: 5,
            branch: 2,
            budget: None,
        })
        .unwrap();
        let order = g.topological_order().unwrap();
        let pos: Vec<usize> = {
            let mut p = vec![0; order.len()];
            for (i, &k) in order.iter().enumerate() {
                p[k] = i;
            }
            p
        };
        for &(a, b) in g.edges() {
            assert!(pos[a] < pos[b]);
        }
        assert_eq!(topological_order(2, &[(0, 1), (1, 0)]), Err(GraphError::Cycle));
    }
}
