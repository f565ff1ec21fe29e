//! Run configuration: one JSON document with denoiser, engine, metrics and
//! output sections. Unknown fields are rejected and every validation error
//! names the offending field path.

use std::path::{Path, PathBuf};

use psd_core::corpus::CorpusOptions;
use psd_core::denoiser::CountModelConfig;
use psd_core::draft::build_topology;
use psd_core::metrics::MetricsConfig;
use psd_core::policy::PolicyError;
use psd_core::{DecodeMode, EngineConfig, PolicyKind, TokenId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Prompt tokens per replicate.
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Replicate `r` runs with seed `seed + r`.
    #[serde(default)]
    pub seed: u64,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_prompt_len() -> usize {
    8
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSection {
    Frontier(FrontierSection),
    Count(CountSection),
}

impl DenoiserSection {
    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserSection::Frontier(_) => "frontier",
            DenoiserSection::Count(_) => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierSection {
    #[serde(default = "default_vocab_size")]
    pub vocab_size: u32,
    /// Defaults to the last real id.
    #[serde(default)]
    pub eos_id: Option<TokenId>,
    #[serde(default = "default_c_max")]
    pub c_max: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default = "default_correctness")]
    pub correctness: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub drift: bool,
    /// Fixed reference shared by all replicates; otherwise one is drawn per replicate seed.
    #[serde(default)]
    pub reference: Option<Vec<TokenId>>,
    /// Length of drawn references; defaults to `prompt_len + engine.max_new_tokens`.
    #[serde(default)]
    pub reference_len: Option<usize>,
}

fn default_vocab_size() -> u32 {
    32
}

fn default_c_max() -> f64 {
    0.99
}

fn default_decay() -> f64 {
    0.03
}

fn default_correctness() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    0.05
}

impl Default for FrontierSection {
    fn default() -> Self {
        Self {
            vocab_size: default_vocab_size(),
            eos_id: None,
            c_max: default_c_max(),
            decay: default_decay(),
            noise_scale: 0.0,
            correctness: default_correctness(),
            floor: default_floor(),
            drift: false,
            reference: None,
            reference_len: None,
        }
    }
}

impl FrontierSection {
    pub fn eos(&self) -> TokenId {
        self.eos_id.unwrap_or(self.vocab_size.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountSection {
    /// UTF-8 text file, one document per line.
    pub corpus: PathBuf,
    #[serde(default)]
    pub corpus_options: CorpusOptions,
    #[serde(default)]
    pub model: CountModelConfig,
    /// Append eos to every training document.
    #[serde(default = "default_true")]
    pub append_eos: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out_dir() }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    pub fn validate(&self) -> CliResult<()> {
        let e = &self.engine;
        e.policy.validate().map_err(|err| match err {
            PolicyError::AnchorTau(_) => CliError::config("engine.policy.anchor_tau", err),
            _ => CliError::config("engine.policy.tau", err),
        })?;
        if e.block_len == 0 {
            return Err(CliError::config("engine.block_len", "must be at least 1"));
        }
        if e.max_new_tokens == 0 {
            return Err(CliError::config("engine.max_new_tokens", "must be at least 1"));
        }
        build_topology(&e.topology).map_err(|err| CliError::config("engine.topology", err))?;

        let m = &self.metrics;
        if m.k.is_empty() || m.k.contains(&0) {
            return Err(CliError::config("metrics.k", "must be a non-empty list of positive integers"));
        }
        if m.h_max == 0 {
            return Err(CliError::config("metrics.h_max", "must be at least 1"));
        }
        if m.buckets == 0 {
            return Err(CliError::config("metrics.buckets", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(CliError::config("replicates", "must be at least 1"));
        }
        if self.prompt_len == 0 {
            return Err(CliError::config("prompt_len", "must be at least 1"));
        }

        match &self.denoiser {
            DenoiserSection::Frontier(f) => self.validate_frontier(f),
            DenoiserSection::Count(c) => {
                let path = self.resolve(&c.corpus);
                if !path.is_file() {
                    return Err(CliError::config(
                        "denoiser.corpus",
                        format!("file {} does not exist", path.display()),
                    ));
                }
                c.model.validate().map_err(|err| CliError::config("denoiser.model", err))
            }
        }
    }

    fn validate_frontier(&self, f: &FrontierSection) -> CliResult<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if f.vocab_size < 2 {
            return Err(CliError::config("denoiser.vocab_size", "must be at least 2"));
        }
        if f.eos() >= f.vocab_size {
            return Err(CliError::config("denoiser.eos_id", "must be below vocab_size"));
        }
        if !(f.c_max > 0.0 && f.c_max <= 1.0) {
            return Err(CliError::config("denoiser.c_max", "must lie in (0, 1]"));
        }
        if !(f.floor > 0.0 && f.floor <= f.c_max) {
            return Err(CliError::config("denoiser.floor", "must lie in (0, c_max]"));
        }
        if !(f.decay.is_finite() && f.decay >= 0.0) {
            return Err(CliError::config("denoiser.decay", "must be finite and non-negative"));
        }
        if !(f.noise_scale.is_finite() && f.noise_scale >= 0.0) {
            return Err(CliError::config("denoiser.noise_scale", "must be finite and non-negative"));
        }
        if !unit(f.correctness) {
            return Err(CliError::config("denoiser.correctness", "must lie in [0, 1]"));
        }
        match (&f.reference, f.reference_len) {
            (Some(r), _) if r.len() <= self.prompt_len => Err(CliError::config(
                "denoiser.reference",
                format!("needs more than prompt_len = {} tokens", self.prompt_len),
            )),
            (Some(r), _) if r.iter().any(|&t| t >= f.vocab_size) => {
                Err(CliError::config("denoiser.reference", "token outside vocabulary"))
            }
            (None, Some(n)) if n <= self.prompt_len => Err(CliError::config(
                "denoiser.reference_len",
                format!("must exceed prompt_len = {}", self.prompt_len),
            )),
            _ => Ok(()),
        }
    }
}

/// Sweep axes and the config field each one sets.
pub const GRID_KEYS: &[(&str, &str)] = &[
    ("depth", "engine.topology.depth"),
    ("branch", "engine.topology.branch"),
    ("budget", "engine.topology.budget"),
    ("tau", "engine.policy.tau"),
    ("policy", "engine.policy.kind"),
    ("window", "engine.policy.window"),
    ("mode", "engine.mode"),
    ("block_len", "engine.block_len"),
    ("max_new_tokens", "engine.max_new_tokens"),
    ("noise", "denoiser.noise_scale"),
    ("correctness", "denoiser.correctness"),
    ("decay", "denoiser.decay"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parse `KEY=V1,V2,...`.
pub fn parse_grid_axis(spec: &str) -> CliResult<GridAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config("--grid", format!("expected KEY=V1,V2,... in `{spec}`")))?;
    let key = key.trim().to_string();
    if !GRID_KEYS.iter().any(|(k, _)| *k == key) {
        let known: Vec<&str> = GRID_KEYS.iter().map(|(k, _)| *k).collect();
        return Err(CliError::config(
            format!("--grid {key}"),
            format!("unknown axis; expected one of {}", known.join(", ")),
        ));
    }
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::config(format!("--grid {key}"), "no values"));
    }
    Ok(GridAxis { key, values })
}

/// Cartesian product in axis order, last axis varying fastest.
pub fn grid_points(axes: &[GridAxis]) -> CliResult<Vec<Vec<(String, String)>>> {
    if axes.is_empty() {
        return Err(CliError::config("--grid", "sweep needs at least one grid axis"));
    }
    let mut points: Vec<Vec<(String, String)>> = vec![vec![]];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

fn parse<T: std::str::FromStr>(path: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::config(path, format!("cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Set one grid axis to `value`.
    pub fn apply(&mut self, key: &str, value: &str) -> CliResult<()> {
        let path = GRID_KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, p)| *p)
            .ok_or_else(|| CliError::config(format!("--grid {key}"), "unknown axis"))?;
        let e = &mut self.engine;
        match key {
            "depth" => e.topology.depth = parse(path, value)?,
            "branch" => e.topology.branch = parse(path, value)?,
            "budget" => {
                e.topology.budget = match value {
                    "none" => None,
                    v => Some(parse(path, v)?),
                }
            }
            "tau" => e.policy.tau = parse(path, value)?,
            "window" => e.policy.window = parse(path, value)?,
            "block_len" => e.block_len = parse(path, value)?,
            "max_new_tokens" => e.max_new_tokens = parse(path, value)?,
            "policy" => {
                e.policy.kind = match value {
                    "greedy" => PolicyKind::Greedy,
                    "confidence" => PolicyKind::Confidence,
                    "localleap" => PolicyKind::LocalLeap,
                    v => return Err(CliError::config(path, format!("unknown policy `{v}`"))),
                }
            }
            "mode" => {
                e.mode = match value {
                    "psd" => DecodeMode::Psd,
                    "spatial_only" => DecodeMode::SpatialOnly,
                    "greedy_only" => DecodeMode::GreedyOnly,
                    v => return Err(CliError::config(path, format!("unknown mode `{v}`"))),
                }
            }
            "noise" | "correctness" | "decay" => {
                let DenoiserSection::Frontier(f) = &mut self.denoiser else {
                    return Err(CliError::config(path, "axis requires the frontier denoiser"));
                };
                let v: f64 = parse(path, value)?;
                match key {
                    "noise" => f.noise_scale = v,
                    "correctness" => f.correctness = v,
                    _ => f.decay = v,
                }
            }
            _ => unreachable!("key checked against GRID_KEYS"),
        }
        Ok(())
    }
}
