//! End-to-end runs of the `headlamp` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use headlamp::bridge::BridgeBackend;
use headlamp::store::RunConfig;
use headlamp::task::make_mini_niah;
use headlamp::{Backend, HeadId, Intervention};

const BIN: &str = env!("CARGO_BIN_EXE_headlamp");

const SMALL: &str = r#"
seed = 3

[model]
source = "induction"

[task]
kind = "mini_niah"
lengths = [48]
depths = [0.0, 1.0]
samples = 3
max_new = 6

[ablation]
k_values = [0, 1]
progressive_length = 48
progressive_runs = 2

[probe]
max_offset = 2

[probe.classifier]
loss = "asymmetric"
hidden_dims = [8]
epochs = 2

[probe.regressor]
loss = "squared_error"
hidden_dims = [8]
epochs = 2

[dynrag]
questions = 2

[dynrag.params]
max_new = 8
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn run(sub: &str, cfg: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args([sub, "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env_remove("HEADLAMP_OUT")
        .output()
        .unwrap()
}

fn ok(sub: &str, cfg: &Path, out: &Path) {
    let o = run(sub, cfg, out);
    assert!(o.status.success(), "{sub} failed: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stats_writes_table_one() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok("stats", &cfg, &out);
    let table = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(lines.count() >= 2, "{table}");
    assert!(out.join("traces.jsonl").exists());
    assert!(out.join("stats.json").exists());
}

#[test]
fn report_renders_grid_matrices() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let early = run("report", &cfg, &out);
    assert_eq!(early.status.code(), Some(3), "report without results must fail at runtime");
    ok("ablate-grid", &cfg, &out);
    ok("report", &cfg, &out);
    for cond in ["none", "dynamic", "static_top", "random"] {
        let m = std::fs::read_to_string(out.join(format!("report/fig2_{cond}.csv"))).unwrap();
        assert!(m.lines().any(|l| l.starts_with("48,")), "{cond}: {m}");
    }
    assert!(out.join("report/ablation_summary.csv").exists());
}

#[test]
fn probe_and_dynrag_pipeline() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok("probe-train", &cfg, &out);
    assert!(out.join("probe_classifier.hlmp").exists());
    ok("probe-eval", &cfg, &out);
    assert!(out.join("probe_eval.csv").exists());
    ok("dynrag", &cfg, &out);
    let table = std::fs::read_to_string(out.join("dynrag.csv")).unwrap();
    assert!(table.contains("no_rag"), "{table}");
    assert!(out.join("dynrag_logs").read_dir().unwrap().count() > 0);
}

#[test]
fn seed_override_changes_the_hash_line() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    ok("gen-traces", &cfg, &a);
    let b = dir.path().join("b");
    let o = Command::new(BIN)
        .args(["gen-traces", "--seed", "11", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert!(o.status.success());
    let head = |p: &Path| std::fs::read_to_string(p.join("traces.jsonl")).unwrap().lines().next().unwrap().to_string();
    assert_ne!(head(&a), head(&b));
    assert!(head(&b).contains("\"seed\":11"));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run("stats", &dir.path().join("nope.toml"), dir.path());
    assert_eq!(missing.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[task]\nunknown_key = 3\n").unwrap();
    assert_eq!(run("stats", &bad, dir.path()).status.code(), Some(2));

    let flag = Command::new(BIN).args(["stats", "--bogus"]).output().unwrap();
    assert_eq!(flag.status.code(), Some(2));
    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn bridge_matches_in_process_model() {
    let (dir, cfg) = setup();
    let config = RunConfig::load(&cfg).unwrap();
    let model = config.model.in_process(config.seed).unwrap().unwrap();
    let command: Vec<String> = [BIN, "serve", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let bridge = BridgeBackend::spawn(&command).unwrap();
    assert_eq!(bridge.descriptor().layout(), model.config().layout());

    let sample = make_mini_niah(40, 0.5, 1).unwrap();
    let masked = Intervention::mask([HeadId::new(1, 0)]).with_visible(2..sample.tokens.len());
    for iv in [Intervention::none(), masked] {
        let local = model.forward(&sample.tokens, &iv).unwrap();
        let remote = bridge.forward(&sample.tokens, &iv).unwrap();
        assert_eq!(local.logits.len(), remote.logits.len());
        for (a, b) in local.logits.iter().zip(&remote.logits) {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
        assert_eq!(local.predicted_token, remote.predicted_token);
        for (a, b) in local.attn_rows.iter().flatten().zip(remote.attn_rows.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
