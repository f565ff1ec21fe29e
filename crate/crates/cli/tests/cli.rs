use std::fs;
use std::path::Path;
use std::process::Command;

use psd_cli::commands::{cmd_analyze, cmd_calibrate, cmd_decode, cmd_sweep};
use psd_cli::config::{parse_grid_axis, RunConfig};
use psd_cli::error::CliError;
use psd_core::denoiser::CountModel;
use psd_core::metrics::MetricsConfig;
use psd_core::DraftGraph;
use tempfile::TempDir;

fn config(json: &str, out: &Path) -> RunConfig {
    let mut c = RunConfig::from_json(json, Path::new(".")).unwrap();
    c.output.dir = out.to_path_buf();
    c
}

const NOISY: &str = r#"{
    "denoiser": {"kind": "frontier", "vocab_size": 16, "decay": 0.03, "noise_scale": 0.05, "correctness": 0.9},
    "engine": {"topology": {"depth": 3}, "block_len": 16, "max_new_tokens": 48, "eos_stop": false},
    "replicates": 3, "seed": 11
}"#;

const CLEAN: &str = r#"{
    "denoiser": {"kind": "frontier", "vocab_size": 16, "decay": 0.02},
    "engine": {"topology": {"depth": 6}, "block_len": 16, "max_new_tokens": 48, "eos_stop": false},
    "replicates": 2
}"#;

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn psd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_psd")).args(args).output().unwrap()
}

#[test]
fn decode_is_byte_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    cmd_decode(&config(NOISY, a.path())).unwrap();
    cmd_decode(&config(NOISY, b.path())).unwrap();
    for f in ["traces/r000.jsonl", "traces/r001.jsonl", "traces/r002.jsonl", "decode.csv"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn greedy_only_reports_unit_tpf() {
    let dir = TempDir::new().unwrap();
    let mut c = config(NOISY, dir.path());
    c.apply("mode", "greedy_only").unwrap();
    for row in cmd_decode(&c).unwrap() {
        assert_eq!(row.tpf, "1.000000000");
        assert_eq!(row.policy, "greedy");
    }
}

#[test]
fn invalid_tau_exits_with_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, NOISY.replace(r#""topology""#, r#""policy": {"tau": 1.5}, "topology""#)).unwrap();
    let out = psd(&["decode", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("engine.policy.tau"));
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let c = config(NOISY, dir.path());
    assert!(matches!(cmd_sweep(&c, &[]), Err(CliError::Config { .. })));
    let path = dir.path().join("c.json");
    fs::write(&path, NOISY).unwrap();
    let out = psd(&["sweep", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_of_one_reproduces_the_decode_rows() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let decoded = cmd_decode(&config(NOISY, a.path())).unwrap();
    let swept = cmd_sweep(&config(NOISY, b.path()), &[parse_grid_axis("depth=3").unwrap()]).unwrap();
    assert_eq!(decoded, swept);
    assert_eq!(read(a.path().join("decode.csv")), read(b.path().join("sweep.csv")));
    assert_eq!(read(a.path().join("traces/r001.jsonl")), read(b.path().join("traces/p000_r001.jsonl")));
}

#[test]
fn depth_sweep_is_monotone_on_a_noise_free_oracle() {
    let dir = TempDir::new().unwrap();
    let rows = cmd_sweep(&config(CLEAN, dir.path()), &[parse_grid_axis("depth=0,1,3,5,7").unwrap()]).unwrap();
    for r in 0..2 {
        let tpf: Vec<f64> = rows.iter().filter(|x| x.replicate == r).map(|x| x.tpf.parse().unwrap()).collect();
        assert_eq!(tpf.len(), 5);
        assert!(tpf.windows(2).all(|w| w[0] <= w[1]), "{tpf:?}");
    }
}

#[test]
fn analyze_is_pure_and_respects_the_bound() {
    let dir = TempDir::new().unwrap();
    cmd_decode(&config(NOISY, &dir.path().join("run"))).unwrap();
    let glob = format!("{}/run/traces/*.jsonl", dir.path().display());
    let m = MetricsConfig::default();
    cmd_analyze(&glob, &m, &dir.path().join("a")).unwrap();
    cmd_analyze(&glob, &m, &dir.path().join("b")).unwrap();
    for f in ["analysis.csv", "report.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)));
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("a/analysis.csv")).unwrap();
    let rows: Vec<Vec<String>> = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    let value = |metric: &str, key: &[String]| -> f64 {
        rows.iter().find(|r| r[0] == metric && r[1..4] == key[1..4]).unwrap()[7].parse().unwrap()
    };
    let mut checked = 0;
    for r in rows.iter().filter(|r| r[0] == "precision") {
        assert!(value("precision", r) <= value("precision_bound", r));
        checked += 1;
    }
    assert_eq!(checked, 3 * 2 * 10);
    assert_eq!(rows.iter().find(|r| r[0] == "audit_violations").unwrap()[7], "0.000000000");
}

#[test]
fn greedy_traces_analyze_to_zero_speculative_share() {
    let dir = TempDir::new().unwrap();
    let mut c = config(NOISY, &dir.path().join("run"));
    c.apply("mode", "greedy_only").unwrap();
    cmd_decode(&c).unwrap();
    let rep = cmd_analyze(&format!("{}/run/traces/*.jsonl", dir.path().display()), &MetricsConfig::default(), dir.path()).unwrap();
    assert!(rep.contribution_profile.iter().all(|b| b.speculative_pct == 0.0));
}

#[test]
fn analyze_rejects_unknown_schema_versions() {
    let dir = TempDir::new().unwrap();
    cmd_decode(&config(NOISY, dir.path())).unwrap();
    let p = dir.path().join("traces/r000.jsonl");
    let text = String::from_utf8(read(&p)).unwrap().replacen("\"schema_version\":1", "\"schema_version\":7", 1);
    fs::write(&p, text).unwrap();
    let err = cmd_analyze(&p.display().to_string(), &MetricsConfig::default(), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = format!("{err:#}");
    assert!(msg.contains('7') && msg.contains("expected 1"), "{msg}");
}

#[test]
fn calibration_extremes_from_probe_traces() {
    let dir = TempDir::new().unwrap();
    // Always-correct, noise-free oracle: every rank is endorsed.
    cmd_decode(&config(CLEAN, &dir.path().join("yes"))).unwrap();
    let cal = cmd_calibrate(&format!("{}/yes/traces/*.jsonl", dir.path().display()), 4, &dir.path().join("yes.txt")).unwrap();
    assert!(cal.estimates.iter().all(|e| e.p == 1.0));
    assert_eq!(cal.graph, DraftGraph::chain(3));
    assert_eq!(DraftGraph::from_text(&String::from_utf8(read(dir.path().join("yes.txt"))).unwrap()).unwrap(), cal.graph);

    // Never-correct oracle over a large vocabulary: nothing is endorsed.
    let never = CLEAN.replace(r#""vocab_size": 16, "decay": 0.02"#, r#""vocab_size": 1000, "decay": 0.02, "correctness": 0.0"#);
    cmd_decode(&config(&never, &dir.path().join("no"))).unwrap();
    let cal = cmd_calibrate(&format!("{}/no/traces/*.jsonl", dir.path().display()), 4, &dir.path().join("no.txt")).unwrap();
    assert!(cal.estimates.iter().all(|e| e.p == 0.0), "{:?}", cal.estimates);
    assert_eq!(cal.graph, DraftGraph::root_only());
}

#[test]
fn calibrate_without_traces_fails() {
    let dir = TempDir::new().unwrap();
    let pattern = format!("{}/none/*.jsonl", dir.path().display());
    let out = psd(&["calibrate", "--traces", &pattern, "--k-max", "4", "--out", dir.path().join("g.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn count_runs_write_reloadable_artifacts() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "the cat sat on the mat\nthe dog sat on the log\na cat and a dog\n").unwrap();
    let json = format!(
        r#"{{"denoiser": {{"kind": "count", "corpus": "{}"}}, "engine": {{"policy": {{"kind": "greedy"}}, "block_len": 8, "max_new_tokens": 16}}, "prompt_len": 4, "replicates": 2}}"#,
        corpus.display()
    );
    let rows = cmd_decode(&config(&json, &dir.path().join("out"))).unwrap();
    assert_eq!(rows.len(), 2);
    let model = CountModel::load(fs::File::open(dir.path().join("out/count_model.json")).unwrap()).unwrap();
    assert_eq!(model.config().order, 2);
    let table = String::from_utf8(read(dir.path().join("out/vocab.tsv"))).unwrap();
    assert!(table.starts_with("# psd-vocab v1 tokenization=char"));
}
