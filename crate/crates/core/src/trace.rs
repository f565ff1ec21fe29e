//! Decode traces and their JSONL serialization.
//!
//! A trace file is one JSON object per line: a `header`, one `iteration`
//! record per decoding iteration, then a `summary`. Token ids are integers
//! and confidences are decimal strings with exactly nine fractional digits,
//! so identical runs produce byte-identical files on every platform.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::DecodeMode;
use crate::policy::PolicyConfig;
use crate::state::CommitSource;
use crate::vocab::TokenId;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed nine-digit decimal encoding for confidences.
mod conf9 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:.9}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub mode: DecodeMode,
    pub policy: PolicyConfig,
    pub block_len: usize,
    pub max_new_tokens: usize,
    pub eos_stop: bool,
    pub vocab_size: u32,
    pub eos_id: TokenId,
    pub mask_id: TokenId,
    pub prompt: Vec<TokenId>,
    /// Rank sets of the draft graph, node id order.
    pub graph_nodes: Vec<Vec<usize>>,
    pub graph_edges: Vec<(usize, usize)>,
}

impl TraceHeader {
    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Length of the block containing generation position `position`.
    pub fn block_len_at(&self, position: usize) -> usize {
        let b = (position - self.prompt_len()) / self.block_len;
        self.block_len.min(self.max_new_tokens - b * self.block_len)
    }

    pub fn block_of(&self, position: usize) -> usize {
        (position - self.prompt_len()) / self.block_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub position: usize,
    pub token: TokenId,
    #[serde(with = "conf9")]
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub position: usize,
    pub token: TokenId,
    /// Confidence of the prediction the commit was judged against.
    #[serde(with = "conf9")]
    pub confidence: f64,
    /// Speculative commits: the accepted parent node that endorsed the token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    /// Speculative commits: rank in σ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaRecord {
    pub position: usize,
    #[serde(with = "conf9")]
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub node: usize,
    /// Effective ranks after truncation to σ's length.
    pub ranks: Vec<usize>,
    pub parents: Vec<usize>,
    pub accepted: bool,
    /// The accepted parent through which this node was accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<usize>,
}

/// Verifier output of one draft node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEvidence {
    pub node: usize,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub block: usize,
    pub forward_passes: u32,
    /// Drafts evaluated in the verification pass (0 if none ran).
    pub batch_size: usize,
    /// Spatial-pass predictions over the active block's masks.
    pub stage1: Vec<PredictionRecord>,
    pub spatial: Vec<CommitRecord>,
    pub sigma: Vec<SigmaRecord>,
    pub drafts: Vec<DraftRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_star: Option<usize>,
    pub speculative: Vec<CommitRecord>,
    pub verifier: Vec<CommitRecord>,
    /// Verifier outputs of the nodes on the accepted path to `k_star`, plus `k_star`.
    pub evidence: Vec<NodeEvidence>,
}

impl IterationRecord {
    /// Every commit with its source, in commit order: spatial, then
    /// speculative by rank, then verifier commits.
    pub fn commits(&self) -> impl Iterator<Item = (&CommitRecord, CommitSource)> + '_ {
        self.spatial
            .iter()
            .map(|c| (c, CommitSource::Spatial))
            .chain(self.speculative.iter().map(|c| (c, CommitSource::Speculative)))
            .chain(self.verifier.iter().map(|c| (c, CommitSource::VerifierCommit)))
    }

    pub fn committed(&self) -> usize {
        self.spatial.len() + self.speculative.len() + self.verifier.len()
    }

    pub fn k_star_ranks(&self) -> Vec<usize> {
        self.k_star
            .and_then(|k| self.drafts.iter().find(|d| d.node == k))
            .map(|d| d.ranks.clone())
            .unwrap_or_default()
    }

    pub fn evidence_for(&self, node: usize) -> Option<&NodeEvidence> {
        self.evidence.iter().find(|e| e.node == node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub final_tokens: Vec<TokenId>,
    pub forward_passes: u64,
    pub committed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub header: TraceHeader,
    pub iterations: Vec<IterationRecord>,
    pub summary: TraceSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Iteration(IterationRecord),
    Summary(TraceSummary),
}

/// Earliest committed eos: `(iteration index, position)`. Within the first
/// iteration that commits an eos, the smallest such position wins.
pub fn eos_cutoff(header: &TraceHeader, iterations: &[IterationRecord]) -> Option<(usize, usize)> {
    iterations.iter().enumerate().find_map(|(t, it)| {
        it.commits()
            .filter(|(c, _)| c.token == header.eos_id)
            .map(|(c, _)| c.position)
            .min()
            .map(|p| (t, p))
    })
}

impl DecodeTrace {
    pub fn prompt_len(&self) -> usize {
        self.header.prompt_len()
    }

    pub fn total_forward_passes(&self) -> u64 {
        self.iterations.iter().map(|it| u64::from(it.forward_passes)).sum()
    }

    pub fn eos_cutoff(&self) -> Option<(usize, usize)> {
        eos_cutoff(&self.header, &self.iterations)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), TraceError> {
        let mut line = |v: &TraceLine| -> Result<(), TraceError> {
            serde_json::to_writer(&mut out, v).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for it in &self.iterations {
            line(&TraceLine::Iteration(it.clone()))?;
        }
        line(&TraceLine::Summary(self.summary.clone()))?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut iterations = Vec::new();
        let mut summary = None;
        for (idx, line) in input.lines().enumerate() {
            let n = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| TraceError::Malformed { line: n, message };
            if header.is_none() {
                let v: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
                let found = v
                    .get("schema_version")
                    .and_then(|x| x.as_u64())
                    .ok_or_else(|| malformed("header lacks schema_version".into()))?;
                if found != u64::from(TRACE_SCHEMA_VERSION) {
                    return Err(TraceError::SchemaVersion {
                        found,
                        expected: TRACE_SCHEMA_VERSION,
                    });
                }
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match (parsed, &header, &summary) {
                (TraceLine::Header(h), None, _) => header = Some(h),
                (TraceLine::Iteration(it), Some(_), None) => iterations.push(it),
                (TraceLine::Summary(s), Some(_), None) => summary = Some(s),
                _ => return Err(malformed("unexpected record order".into())),
            }
        }
        let eof = |message: &str| TraceError::Malformed {
            line: 0,
            message: message.to_string(),
        };
        Ok(Self {
            header: header.ok_or_else(|| eof("missing header"))?,
            iterations,
            summary: summary.ok_or_else(|| eof("missing summary"))?,
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        Self::read_jsonl(text.as_bytes())
    }
}
