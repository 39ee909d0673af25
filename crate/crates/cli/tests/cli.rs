use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
global_seed = 5

[corpus]
n_accents = 3
utterances_per_accent_eval = 4
utterances_per_accent_validation = 3
train_size = 48

[corpus.speakers]
train = 4
validation = 2
eval = 2

[train]
epochs = 2
max_epochs = 2
max_validation_wer = 100.0
require_reference_lowest = false

[subspace]
methods = ["ridge", "lda"]
layers = [1, 2]
ks = [2]
probe_steps = 20

[attack]
steps = 3
epsilons = [0.005, 0.01]
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accent-audit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("audit.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli(&["bogus"]).status.code(), Some(1));
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["gen", "--seed", "x"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[intervention]\nalpha = 2.0\n");
    let o = cli(&["gen", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"));
    let o = cli(&["gen", "--config", "/nonexistent/audit.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_stage_output_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for (stage, prerequisite) in [("train", "gen"), ("extract", "gen"), ("report", "train")] {
        let o = cli(&[stage, "--output-dir", out]);
        assert_eq!(o.status.code(), Some(2), "{stage}: {}", stderr(&o));
        assert!(stderr(&o).contains(&format!("run `{prerequisite}` first")), "{}", stderr(&o));
    }
}

#[test]
fn unmet_training_target_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("max_validation_wer = 100.0", "max_validation_wer = 0.0");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["gen", "--config", &cfg, "--output-dir", out]).status.code(), Some(0));
    let o = cli(&["train", "--config", &cfg, "--output-dir", out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn show_config_round_trips() {
    let o = cli(&["show-config", "--seed", "42"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("global_seed = 42"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &text);
    let again = cli(&["show-config", "--config", &cfg]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

fn provenance_of(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    if path.extension().is_some_and(|e| e == "csv") {
        text.lines().next().unwrap().to_string()
    } else {
        let v: serde_json::Value = serde_json::from_str(text.lines().next().filter(|l| l.ends_with('}')).unwrap_or(&text)).unwrap();
        v["provenance"].to_string()
    }
}

#[test]
fn stages_run_in_order_and_full_audit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let staged = dir.path().join("staged");
    let staged_s = staged.to_str().unwrap();
    for stage in ["gen", "train", "extract", "attack", "sweep-eps", "intervene", "report"] {
        let o = cli(&[stage, "--config", &cfg, "--output-dir", staged_s, "--jobs", "1"]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cli(&["full-audit", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let report = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.join("report.json")).unwrap());
    assert_eq!(report, fs::read(staged.join("report.json")).unwrap());

    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(v["provenance"]["stage"], "report");
    assert_eq!(v["provenance"]["global_seed"], 5);
    let hash = v["provenance"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(v["wer_table"].as_object().unwrap().len(), 5);

    for rel in [
        "corpus/manifest.csv",
        "model/checkpoint.json",
        "model/train_report.json",
        "subspace/sweep.csv",
        "subspace/selection.json",
        "subspace/accent.json",
        "subspace/random.json",
        "subspace/permuted.json",
        "attack/outcomes_accent.jsonl",
        "attack/wer_table.csv",
        "attack/coupling.csv",
        "attack/summary.json",
        "sweep/epsilon_sweep.csv",
        "sweep/epsilon_sweep.json",
        "intervention/intervention.csv",
        "intervention/intervention.json",
    ] {
        let p = provenance_of(&a.join(rel));
        assert!(p.contains(&hash), "{rel}: {p}");
        assert!(p.contains("tool_version") || p.contains("tool_version="), "{rel}");
    }
    let table = fs::read_to_string(a.join("intervention/intervention.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("accent,clean_base,clean_int,att_base,att_int"));
    assert!(table.lines().any(|l| l.starts_with("disparity,")));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let m1 = dir.path().join("s1");
    let m2 = dir.path().join("s2");
    cli(&["gen", "--config", &cfg, "--output-dir", m1.to_str().unwrap()]);
    cli(&["gen", "--config", &cfg, "--output-dir", m2.to_str().unwrap(), "--seed", "6"]);
    let a = fs::read_to_string(m1.join("corpus/manifest.csv")).unwrap();
    let b = fs::read_to_string(m2.join("corpus/manifest.csv")).unwrap();
    assert!(a.contains("global_seed=5"));
    assert!(b.contains("global_seed=6"));
    assert_ne!(a.lines().next(), b.lines().next());
}

#[test]
fn shipped_config_matches_defaults() {
    let text = include_str!("../../../configs/audit.toml");
    let shipped = accent_audit::config::AuditConfig::from_toml_str(text).unwrap();
    assert_eq!(shipped, accent_audit::config::AuditConfig::default());
    assert_eq!(String::from_utf8(cli(&["show-config"]).stdout).unwrap(), text);
}
