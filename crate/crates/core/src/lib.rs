//! Parallel speculative decoding for masked-diffusion language models.
//!
//! A decode iteration commits tokens spatially through a transfer policy,
//! drafts future states from cached predictions along a DAG of rank subsets,
//! and verifies every draft in one batched pass. Synthetic denoisers, a trace
//! format, trace-derived metrics and an independent commit auditor live
//! alongside the engine.

pub mod audit;
pub mod corpus;
pub mod denoiser;
pub mod draft;
pub mod engine;
pub mod metrics;
pub mod policy;
pub mod state;
pub mod trace;
pub mod vocab;

pub use denoiser::{Denoiser, DenoiserOutput, Prediction};
pub use draft::{DraftGraph, TopologyConfig};
pub use engine::{decode, decode_spatial_only, decode_with_graph, DecodeMode, Decoded, EngineConfig};
pub use policy::{PolicyConfig, PolicyKind, TransferPolicy};
pub use state::{CommitSet, CommitSource, Scope, SequenceState};
pub use trace::DecodeTrace;
pub use vocab::{TokenId, Vocabulary};
