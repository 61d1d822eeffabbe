#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub mod reference;

pub const EPOCH: &str = "1700000000";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/e2e")
}

/// Runs the CLI with a fixed clock and no endpoint variables from the caller's environment.
pub fn qgkit<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qgkit"));
    cmd.args(args).env("SOURCE_DATE_EPOCH", EPOCH);
    for var in [
        "MQG_CAPTION_URL",
        "MQG_OCR_URL",
        "MQG_EMBED_URL",
        "MQG_ORACLE_URL",
        "MQG_CHAT_URL",
        "MQG_CHAT_API_KEY",
        "MQG_SCORER_URL",
    ] {
        cmd.env_remove(var);
    }
    cmd.output().expect("qgkit binary runs")
}

pub fn ok(output: &Output) -> Result<(), String> {
    if output.status.success() {
        Ok(())
    } else {
        Err(format!(
            "exit {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ))
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub const RUN_SEEDS: [u64; 4] = [11, 22, 33, 44];

/// preprocess, describe, generate and evaluate on the fixture corpus, writing into `out`.
pub fn run_e2e(out: &Path) -> Result<(), String> {
    let fx = fixture_dir();
    let config = fx.join("config.toml");
    let c = p(&config);
    let o = |name: &str| out.join(name);
    ok(&qgkit(&["--config", c, "preprocess", "--corpus", p(&fx.join("corpus.jsonl")), "--out", p(out)]))?;
    ok(&qgkit(&["--config", c, "describe", "--examples", p(&o("examples.jsonl")), "--out", p(&o("signals.jsonl"))]))?;
    ok(&qgkit(&[
        "--config", c, "generate",
        "--examples", p(&o("examples.jsonl")),
        "--signals", p(&o("signals.jsonl")),
        "--split", p(&o("split.json")),
        "--out", p(&o("runs")),
    ]))?;
    let mut args: Vec<String> = ["--config", c, "evaluate", "--references", p(&o("examples.jsonl"))]
        .map(String::from)
        .into();
    args.push("--predictions".into());
    for s in RUN_SEEDS {
        args.push(p(&o(&format!("runs/predictions_seed{s}.jsonl"))).to_string());
    }
    args.extend(["--out".to_string(), p(&o("report.json")).to_string()]);
    ok(&qgkit(&args))
}

pub fn e2e_files() -> Vec<String> {
    let mut files = vec![
        "examples.jsonl".to_string(),
        "split.json".into(),
        "signals.jsonl".into(),
        "report.json".into(),
    ];
    for s in RUN_SEEDS {
        files.push(format!("runs/predictions_seed{s}.jsonl"));
        files.push(format!("runs/predictions_seed{s}.meta.json"));
    }
    files
}

/// Compares `out` with the committed goldens; `UPDATE_GOLDEN=1` rewrites them instead.
pub fn check_golden(out: &Path) -> Result<(), String> {
    let golden = golden_dir();
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let mut mismatched = Vec::new();
    for name in e2e_files() {
        let actual = fs::read(out.join(&name)).map_err(|e| format!("{name}: {e}"))?;
        let path = golden.join(&name);
        if update {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, &actual).unwrap();
            continue;
        }
        match fs::read(&path) {
            Ok(expected) if expected == actual => {}
            Ok(_) => mismatched.push(name),
            Err(_) => mismatched.push(format!("{name} (no golden)")),
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(format!("differs from golden: {}", mismatched.join(", ")))
    }
}
