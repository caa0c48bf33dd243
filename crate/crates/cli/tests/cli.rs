use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_persona-audit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_corpus(path: &Path) {
    let mut out = String::new();
    for topic in ["marketing", "virology", "anatomy", "sociology"] {
        for i in 0..6 {
            out.push_str(
                &serde_json::json!({
                    "id": format!("{topic}-{i}"),
                    "topic": topic,
                    "question": format!("Question {i}?"),
                    "options": ["w", "x", "y", "z"],
                    "answer": "C",
                })
                .to_string(),
            );
            out.push('\n');
        }
    }
    fs::write(path, out).unwrap();
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("items.jsonl");
    write_corpus(&corpus);
    let cfg = dir.join("audit.toml");
    fs::write(
        &cfg,
        format!(
            "dataset = {:?}\noutput_dir = {:?}\ntopics = [\"marketing\", \"virology\"]\nn_per_topic = 3\n\
             trials = 4\nfields = [\"Law\"]\nlevels = [\"Junior\"]\n[seeds]\nsample = 1\n\
             [[models]]\nid = \"syn\"\nbackend = \"synthetic\"\n[synthetic]\ndecoration_rate = 0.5\n[synthetic.accuracy]\ndefault = 0.6\n",
            corpus,
            dir.join("run")
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn invalid_config_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "dataset = \"x\"\ntrials = 0\n[[models]]\nid = \"a\"\nbackend = \"synthetic\"\n").unwrap();
    let out = run(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("trials"));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "dataset = \"x\"\n[[models]]\nid = \"a\"\nbackend = \"synthetic\"\ntemprature = 1\n").unwrap();
    let out = run(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temprature"));
}

#[test]
fn run_before_prepare_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run(&["run-exp1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "run-dir");
}

#[test]
fn full_pipeline_then_analyze_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    for phase in ["prepare", "run-exp1", "run-exp2", "run-exp3"] {
        let out = run(&[phase, "--config", c]);
        assert!(out.status.success(), "{phase}: {}", String::from_utf8_lossy(&out.stderr));
        let _: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    }
    let report = dir.path().join("run/report/report.json");
    let first = fs::read(&report).unwrap();
    assert!(run(&["analyze", "--config", c]).status.success());
    assert_eq!(first, fs::read(&report).unwrap());
    for f in ["failures.csv", "figures/salary_points.csv", "tables/significant_pairs.md"] {
        assert!(dir.path().join("run/report").join(f).exists(), "{f}");
    }

    let out = run(&["review-export", "--config", c]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("run/review/failures.csv")).unwrap();
    assert!(csv.starts_with("experiment,model,persona,mode,item,temperature,trial_index,kind,reason,raw\n"));
}

#[test]
fn experiment_filter_skips_phase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert!(run(&["prepare", "--config", c]).status.success());
    let out = run(&["run-exp2", "--config", c, "--experiments", "1"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["skipped"], true);
}

#[test]
fn strict_replay_without_cache_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replacen("[seeds]", &format!("[cache]\ndir = {:?}\n[seeds]", dir.path().join("cache")), 1);
    fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    assert!(run(&["prepare", "--config", c]).status.success());
    let out = run(&["run-exp1", "--config", c, "--replay"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\""));
}
