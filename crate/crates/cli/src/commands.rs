use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use psd_core::audit::audit_trace;
use psd_core::draft::calibrate_topology;
use psd_core::metrics::{acceptance_by_rank, report, tpf_counts, MetricsConfig, MetricsReport};
use psd_core::policy::mean_reveal_rate;
use psd_core::{decode, DecodeTrace};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{grid_points, GridAxis, RunConfig};
use crate::error::{CliError, CliResult};
use crate::instance::prepare;

/// Fixed nine-digit decimal text used for every float in CSV output.
pub fn fmt9(v: f64) -> String {
    format!("{v:.9}")
}

fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// One decoded replicate. Column order is the CSV header order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunRow {
    pub point: usize,
    pub replicate: usize,
    pub seed: u64,
    pub denoiser: String,
    pub mode: String,
    pub policy: String,
    pub tau: String,
    pub window: usize,
    pub depth: usize,
    pub branch: usize,
    pub budget: String,
    pub block_len: usize,
    pub max_new_tokens: usize,
    pub decay: String,
    pub noise: String,
    pub correctness: String,
    /// Tokens counted toward TPF (through the first eos).
    pub tokens: u64,
    pub committed: u64,
    pub forward_passes: u64,
    pub iterations: usize,
    pub tpf: String,
    pub reveal_rate: String,
    /// Per-rank acceptance rates, `;`-separated from rank 1.
    pub acceptance_by_rank: String,
}

impl RunRow {
    fn new(point: usize, replicate: usize, seed: u64, cfg: &RunConfig, trace: &DecodeTrace) -> Self {
        let e = &cfg.engine;
        let (tokens, passes) = tpf_counts(trace);
        let frontier = match &cfg.denoiser {
            crate::config::DenoiserSection::Frontier(f) => Some(f),
            crate::config::DenoiserSection::Count(_) => None,
        };
        let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
        Self {
            point,
            replicate,
            seed,
            denoiser: cfg.denoiser.kind().to_string(),
            mode: serde_name(&e.mode),
            policy: serde_name(&e.effective_policy().kind),
            tau: fmt9(e.policy.tau),
            window: e.policy.window,
            depth: e.topology.depth,
            branch: e.topology.branch,
            budget: e.topology.budget.map(|b| b.to_string()).unwrap_or_default(),
            block_len: e.block_len,
            max_new_tokens: e.max_new_tokens,
            decay: opt(frontier.map(|f| f.decay)),
            noise: opt(frontier.map(|f| f.noise_scale)),
            correctness: opt(frontier.map(|f| f.correctness)),
            tokens,
            committed: trace.summary.committed,
            forward_passes: passes,
            iterations: trace.iterations.len(),
            tpf: fmt9(if passes == 0 { 0.0 } else { tokens as f64 / passes as f64 }),
            reveal_rate: fmt9(mean_reveal_rate(trace).unwrap_or(0.0)),
            acceptance_by_rank: acceptance_by_rank(std::slice::from_ref(trace))
                .iter()
                .map(|r| fmt9(r.rate))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

struct Job {
    point: usize,
    replicate: usize,
    cfg: RunConfig,
}

fn run_jobs(base: &RunConfig, jobs: Vec<Job>) -> CliResult<Vec<(RunRow, DecodeTrace)>> {
    let prepared = prepare(base).map_err(CliError::Runtime)?;
    jobs.into_par_iter()
        .map(|job| {
            let seed = job.cfg.replicate_seed(job.replicate);
            let inst = prepared.instance(&job.cfg, seed)?;
            let out = decode(&job.cfg.engine, inst.model.denoiser(), &inst.prompt)
                .with_context(|| format!("point {} replicate {} (seed {seed})", job.point, job.replicate))?;
            Ok((RunRow::new(job.point, job.replicate, seed, &job.cfg, &out.trace), out.trace))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(CliError::Runtime)
        .and_then(|rows| {
            prepared
                .write_artifacts(&base.resolve(&base.output.dir))
                .map_err(CliError::Runtime)?;
            Ok(rows)
        })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, trace: &DecodeTrace) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.resolve(&cfg.output.dir);
    fs::create_dir_all(dir.join("traces"))
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Runtime)?;
    Ok(dir)
}

/// Decode every replicate; writes `traces/rNNN.jsonl` and `decode.csv`.
pub fn cmd_decode(cfg: &RunConfig) -> CliResult<Vec<RunRow>> {
    cfg.validate()?;
    let dir = prepare_out(cfg)?;
    let jobs = (0..cfg.replicates)
        .map(|replicate| Job {
            point: 0,
            replicate,
            cfg: cfg.clone(),
        })
        .collect();
    let results = run_jobs(cfg, jobs)?;
    for (row, trace) in &results {
        write_trace(&dir.join("traces").join(format!("r{:03}.jsonl", row.replicate)), trace)?;
        println!(
            "replicate {} seed {}: tpf {} tokens {} committed {} passes {}",
            row.replicate, row.seed, row.tpf, row.tokens, row.committed, row.forward_passes
        );
    }
    let rows: Vec<RunRow> = results.into_iter().map(|(r, _)| r).collect();
    write_csv(&dir.join("decode.csv"), &rows)?;
    let (tokens, passes) = rows
        .iter()
        .fold((0u64, 0u64), |(t, p), r| (t + r.tokens, p + r.forward_passes));
    println!("pooled tpf {} over {} replicates", fmt9(tokens as f64 / passes.max(1) as f64), rows.len());
    Ok(rows)
}

/// Decode every grid point and replicate; writes `traces/pNNN_rNNN.jsonl` and `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, axes: &[GridAxis]) -> CliResult<Vec<RunRow>> {
    let points = grid_points(axes)?;
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (point, settings) in points.iter().enumerate() {
        let mut c = cfg.clone();
        for (k, v) in settings {
            c.apply(k, v)?;
        }
        c.validate()?;
        for replicate in 0..cfg.replicates {
            jobs.push(Job {
                point,
                replicate,
                cfg: c.clone(),
            });
        }
    }
    let dir = prepare_out(cfg)?;
    let results = run_jobs(cfg, jobs)?;
    for (row, trace) in &results {
        let name = format!("p{:03}_r{:03}.jsonl", row.point, row.replicate);
        write_trace(&dir.join("traces").join(name), trace)?;
    }
    let rows: Vec<RunRow> = results.into_iter().map(|(r, _)| r).collect();
    write_csv(&dir.join("sweep.csv"), &rows)?;
    for (point, settings) in points.iter().enumerate() {
        let label: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let (t, p) = rows
            .iter()
            .filter(|r| r.point == point)
            .fold((0u64, 0u64), |(t, p), r| (t + r.tokens, p + r.forward_passes));
        println!("point {point} [{}]: pooled tpf {}", label.join(" "), fmt9(t as f64 / p.max(1) as f64));
    }
    Ok(rows)
}

/// Traces matching `pattern`, in path order.
pub fn load_traces(pattern: &str) -> CliResult<Vec<(PathBuf, DecodeTrace)>> {
    let paths = glob::glob(pattern).map_err(|e| CliError::config("--traces", e))?;
    let mut paths: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(e.into()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::config("--traces", format!("no trace files match `{pattern}`")));
    }
    paths
        .into_iter()
        .map(|p| {
            let file = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            let t = DecodeTrace::read_jsonl(std::io::BufReader::new(file))
                .with_context(|| format!("reading {}", p.display()))?;
            Ok((p, t))
        })
        .collect::<anyhow::Result<_>>()
        .map_err(CliError::Runtime)
}

/// Fit a draft graph to the per-rank acceptance of chain probe traces.
pub fn cmd_calibrate(pattern: &str, k_max: usize, out: &Path) -> CliResult<psd_core::draft::Calibration> {
    if k_max == 0 {
        return Err(CliError::config("--k-max", "must be at least 1"));
    }
    let traces: Vec<DecodeTrace> = load_traces(pattern)?.into_iter().map(|(_, t)| t).collect();
    let cal = calibrate_topology(&traces, k_max).map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
    }
    fs::write(out, cal.graph.to_text())
        .with_context(|| format!("writing {}", out.display()))
        .map_err(CliError::Runtime)?;
    for e in &cal.estimates {
        println!("rank {}: p_hat {} ({}/{})", e.rank, fmt9(e.p), e.accepted, e.tested);
    }
    println!(
        "graph: {} nodes; expected accepted tokens {}",
        cal.graph.len(),
        fmt9(cal.expected_accepted)
    );
    Ok(cal)
}

/// One point of the long-format analysis table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: &'static str,
    pub variant: Option<&'static str>,
    pub k: Option<usize>,
    pub h: Option<usize>,
    pub bucket_lo: Option<String>,
    pub bucket_hi: Option<String>,
    pub rank: Option<usize>,
    pub value: String,
}

impl MetricRow {
    fn scalar(metric: &'static str, value: f64) -> Self {
        Self {
            metric,
            variant: None,
            k: None,
            h: None,
            bucket_lo: None,
            bucket_hi: None,
            rank: None,
            value: fmt9(value),
        }
    }
}

pub fn metric_rows(r: &MetricsReport, violations: usize) -> Vec<MetricRow> {
    let mut rows = vec![
        MetricRow::scalar("tpf", r.tpf),
        MetricRow::scalar("reveal_rate", r.mean_reveal_rate),
        MetricRow::scalar("audit_violations", violations as f64),
    ];
    for p in &r.precision {
        for (metric, value) in [("precision", p.empirical), ("precision_bound", p.oracle)] {
            rows.push(MetricRow {
                variant: Some(p.variant.id()),
                k: Some(p.k),
                h: Some(p.h),
                ..MetricRow::scalar(metric, value)
            });
        }
    }
    for b in &r.contribution_profile {
        for (metric, value) in [
            ("contribution_spatial_pct", b.spatial_pct),
            ("contribution_speculative_pct", b.speculative_pct),
            ("contribution_tokens", b.tokens as f64),
        ] {
            rows.push(MetricRow {
                bucket_lo: Some(fmt9(b.lo)),
                bucket_hi: Some(fmt9(b.hi)),
                ..MetricRow::scalar(metric, value)
            });
        }
    }
    for a in &r.acceptance_rate_by_rank {
        for (metric, value) in [
            ("acceptance_rate", a.rate),
            ("acceptance_offered", a.offered as f64),
            ("acceptance_accepted", a.accepted as f64),
        ] {
            rows.push(MetricRow {
                rank: Some(a.rank),
                ..MetricRow::scalar(metric, value)
            });
        }
    }
    rows
}

#[derive(Debug, Serialize)]
struct AnalysisDocument<'a> {
    sources: Vec<String>,
    audit_violations: usize,
    report: &'a MetricsReport,
}

/// Metrics over a set of traces; writes `analysis.csv` and `report.json`.
pub fn cmd_analyze(pattern: &str, metrics: &MetricsConfig, out_dir: &Path) -> CliResult<MetricsReport> {
    if metrics.k.is_empty() || metrics.k.contains(&0) || metrics.h_max == 0 || metrics.buckets == 0 {
        return Err(CliError::config("metrics", "k must be non-empty and positive; h_max and buckets at least 1"));
    }
    let loaded = load_traces(pattern)?;
    let mut violations = 0;
    for (path, t) in &loaded {
        for v in audit_trace(t) {
            log::warn!("{}: {v}", path.display());
            violations += 1;
        }
    }
    let sources = loaded.iter().map(|(p, _)| p.display().to_string()).collect();
    let traces: Vec<DecodeTrace> = loaded.into_iter().map(|(_, t)| t).collect();
    let rep = report(&traces, metrics);
    let doc = AnalysisDocument {
        sources,
        audit_violations: violations,
        report: &rep,
    };
    let write = || -> anyhow::Result<()> {
        fs::create_dir_all(out_dir)?;
        write_csv(&out_dir.join("analysis.csv"), &metric_rows(&rep, violations))?;
        let mut json = serde_json::to_string_pretty(&doc)?;
        json.push('\n');
        fs::write(out_dir.join("report.json"), json)?;
        Ok(())
    };
    write().map_err(CliError::Runtime)?;
    println!(
        "{} traces: tpf {} reveal rate {} audit violations {}",
        traces.len(),
        fmt9(rep.tpf),
        fmt9(rep.mean_reveal_rate),
        violations
    );
    Ok(rep)
}
