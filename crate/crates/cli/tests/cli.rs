//! End-to-end runs of the `slip` binary on tiny settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[corpus]
num_samples = 12

[corpus.generator]
lengths = [64]

[model]
hidden_dim = 16
num_heads = 2
base_patch = 8
embedder_mlp_dim = 16
encoder_depth = 1
encoder_ffn_dim = 16
text_encoder_depth = 1
text_decoder_depth = 1
text_ffn_dim = 16
unfrozen_encoder_layers = 1
embed_dim = 8
max_text_len = 80

[train]
steps = 4
batch_size = 4
warmup_steps = 1

[probe]
epochs = 6
warmup_epochs = 1

[eval]
caption_max_len = 8
"#;

fn slip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slip"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The only run directory under `parent` whose name starts with `prefix`.
fn run_dir(parent: &Path, prefix: &str) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data",
        "-c",
        s(&cfg),
        "--out",
        s(&tmp.path().join("runs")),
        "--dest",
        s(&data),
    ]);
    (tmp, cfg, data.join("manifest.json"))
}

#[test]
fn gen_data_is_reproducible() {
    let (tmp, cfg, manifest) = setup();
    let again = tmp.path().join("again");
    ok(&[
        "gen-data",
        "-c",
        s(&cfg),
        "--out",
        s(&tmp.path().join("runs2")),
        "--dest",
        s(&again),
    ]);
    let read = |p: &Path| fs::read_to_string(p).unwrap();
    assert!(read(&manifest) == read(&again.join("manifest.json")));
    let other = tmp.path().join("other");
    ok(&[
        "gen-data",
        "-c",
        s(&cfg),
        "--set",
        "seed=99",
        "--out",
        s(&tmp.path().join("runs3")),
        "--dest",
        s(&other),
    ]);
    assert!(read(&manifest) != read(&other.join("manifest.json")));
}

#[test]
fn pretrain_then_evaluate() {
    let (tmp, cfg, data) = setup();
    let runs = tmp.path().join("pre");
    ok(&["pretrain", "-c", s(&cfg), "--out", s(&runs), "--data", s(&data)]);
    let rd = run_dir(&runs, "pretrain-");
    for f in ["config.toml", "metrics.jsonl", "report.json", "checkpoints/final.ckpt"] {
        assert!(rd.join(f).exists(), "missing {f}");
    }
    let lines = fs::read_to_string(rd.join("metrics.jsonl")).unwrap();
    assert!(
        lines.lines().filter(|l| l.contains("\"kind\":\"step\"")).count() == 4,
        "{lines}"
    );
    let ckpt = rd.join("checkpoints/final.ckpt");

    let evals = tmp.path().join("eval");
    ok(&[
        "retrieve",
        "-c",
        s(&cfg),
        "--out",
        s(&evals),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&evals, "retrieve-").join("report.json")).unwrap()).unwrap();
    let acc = report["zero_shot"]["accuracy"]
        .as_f64()
        .or(report["accuracy"].as_f64())
        .expect("accuracy field");
    assert!((0.0..=1.0).contains(&acc));

    ok(&[
        "probe",
        "-c",
        s(&cfg),
        "--out",
        s(&evals),
        "--checkpoint",
        s(&ckpt),
        "--train-data",
        s(&data),
        "--test-data",
        s(&data),
    ]);
    let probe = fs::read_to_string(run_dir(&evals, "probe-").join("report.json")).unwrap();
    assert!(probe.contains("top1_accuracy"));

    ok(&[
        "caption",
        "-c",
        s(&cfg),
        "--out",
        s(&evals),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
    ]);
    ok(&[
        "sft",
        "-c",
        s(&cfg),
        "--out",
        s(&evals),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
    ]);
    ok(&[
        "diagnose",
        "-c",
        s(&cfg),
        "--out",
        s(&evals),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--metrics",
        s(&rd.join("metrics.jsonl")),
    ]);
    assert!(run_dir(&evals, "diagnose-").join("losses.svg").exists());
}

#[test]
fn repeated_pretrain_logs_are_identical() {
    let (tmp, cfg, data) = setup();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["pretrain", "-c", s(&cfg), "--out", s(&a), "--data", s(&data)]);
    ok(&["pretrain", "-c", s(&cfg), "--out", s(&b), "--data", s(&data)]);
    let read = |p: &Path| fs::read(run_dir(p, "pretrain-").join("metrics.jsonl")).unwrap();
    assert!(read(&a) == read(&b), "metric logs differ");
}

#[test]
fn stats_test_pairs_and_rejects_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    let c = tmp.path().join("c.json");
    fs::write(&a, "1 2 3 4 5\n").unwrap();
    fs::write(&b, "0,0,0,0,0").unwrap();
    fs::write(&c, "[0, 0, 0]").unwrap();
    let out = tmp.path().join("runs");
    ok(&["stats-test", "--out", s(&out), "--a", s(&a), "--b", s(&b)]);
    let report = fs::read_to_string(run_dir(&out, "stats-test-").join("report.json")).unwrap();
    assert!(report.contains("0.0625"), "{report}");

    let bad = slip(&["stats-test", "--out", s(&out), "--a", s(&a), "--b", s(&c)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("pairing error"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(slip(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = slip(&[
        "gen-data",
        "--set",
        "train.steps=abc",
        "--out",
        s(tmp.path()),
        "--dest",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = slip(&[
        "retrieve",
        "--out",
        s(tmp.path()),
        "--checkpoint",
        s(&tmp.path().join("nope.ckpt")),
    ]);
    assert_ne!(missing.status.code(), Some(0));
}
