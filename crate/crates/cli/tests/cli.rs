use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
count = 20
image_size = 64

[model]
width = 16
heads = 2
time_dim = 8
feature_dim = 8
channels = [4, 4, 4]

[diffusion]
steps = 50
inference_ratio = 5

[train]
epochs = 1
batch_size = 8
"#;

const SMALL_SEQ: &str = r#"
[dataset]
kind = "synthetic-sequence"
count = 30
k_min = 3
k_max = 5
vocab = 64

[model]
width = 16
heads = 2
time_dim = 8
feature_dim = 8
vocab = 64

[diffusion]
steps = 50
inference_ratio = 5

[train]
epochs = 1
batch_size = 8
"#;

fn posdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posdiff")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = posdiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    posdiff(args).status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_lists_every_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &SMALL.replace("count = 20", "count = 100"));
    let data = tmp.path().join("data");
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    let first = fs::read(data.join("manifest.json")).unwrap();
    ok(&["--config", &cfg, "gen", "--out", s(&data), "--force"]);
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), first);
    let manifest: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 100);
    for e in entries {
        assert!(data.join("images").join(format!("{}.png", e["id"].as_str().unwrap())).exists());
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let bad_lr = write_config(tmp.path(), "lr.toml", "[train]\nlr = -0.5\n");
    assert_eq!(code(&["--config", &bad_lr, "gen", "--out", s(&tmp.path().join("a"))]), 2);
    let unknown = write_config(tmp.path(), "u.toml", "[train]\nwarmup = 10\n");
    assert_eq!(code(&["--config", &unknown, "gen", "--out", s(&tmp.path().join("b"))]), 2);
    // non-empty output directory without --force
    assert_eq!(code(&["gen", "--out", s(tmp.path())]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn zero_epochs_writes_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("config.toml").exists());
}

fn losses(path: &Path) -> Vec<(u64, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap(), v["loss"].to_string())
        })
        .collect()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    // 40 sequences, 80% train at batch 8 gives 4 steps per epoch
    let text = SMALL_SEQ.replace("count = 30", "count = 40");
    let full_cfg = write_config(tmp.path(), "full.toml", &text.replace("epochs = 1", "epochs = 13"));
    let part_cfg = write_config(tmp.path(), "part.toml", &text.replace("epochs = 1", "epochs = 6"));
    let data = tmp.path().join("data");
    ok(&["--config", &full_cfg, "gen", "--out", s(&data)]);
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    ok(&["--config", &full_cfg, "train", "--data", s(&data), "--out", s(&full)]);
    ok(&["--config", &part_cfg, "train", "--data", s(&data), "--out", s(&part)]);
    let ck = part.join("final.ckpt");
    ok(&["--config", &full_cfg, "train", "--data", s(&data), "--out", s(&part), "--resume", s(&ck), "--force"]);
    let a = losses(&full.join("train_log.jsonl"));
    let b = losses(&part.join("train_log.jsonl"));
    assert_eq!(a.len(), 52);
    assert_eq!(a, b);
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
}

#[test]
fn oracle_report_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = tmp.path().join("data");
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    let report = tmp.path().join("oracle.txt");
    ok(&["--config", &cfg, "eval", "--oracle", "--data", s(&data), "--out", s(&report)]);
    let golden = include_str!("golden/oracle_report.txt");
    assert_eq!(fs::read_to_string(&report).unwrap(), golden);
}

#[test]
fn frames_cover_every_visited_state() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("steps = 50\ninference_ratio = 5", "steps = 300\ninference_ratio = 10");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let (data, run, frames) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("frames"));
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    let ck = run.join("final.ckpt");
    let image = data.join("images").join("img00000.png");
    let out = ok(&[
        "--config", &cfg, "solve", "--checkpoint", s(&ck), "--input", s(&image), "--shuffle", "3", "--frames", "--out",
        s(&frames),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("->"));
    let names: Vec<String> =
        fs::read_dir(&frames).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("snapshot-")).count(), 31);
    assert_eq!(names.iter().filter(|n| n.starts_with("frame-")).count(), 31);
    assert!(names.contains(&"snapshot-000-t300.json".to_string()));
    assert!(names.contains(&"snapshot-030-t000.json".to_string()));
}

#[test]
fn sequence_input_to_a_puzzle_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    let seq = tmp.path().join("seq.txt");
    fs::write(&seq, "20 21 22\n22 23 24\n").unwrap();
    let out = posdiff(&["--config", &cfg, "solve", "--checkpoint", s(&run.join("final.ckpt")), "--input", s(&seq)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mismatch"), "{err}");
}

#[test]
fn sequence_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_SEQ);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&["--config", &cfg, "gen", "--out", s(&data)]);
    assert!(data.join("sequences.jsonl").exists());
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run)]);
    assert!(run.join("val_report.txt").exists());
    ok(&["--config", &cfg, "eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--init", "gaussian"]);
    assert!(run.join("report-test-gaussian.txt").exists());
    let seq = tmp.path().join("seq.txt");
    fs::write(&seq, "40 41 42\n20 21 22\n30 31 32\n").unwrap();
    let out = ok(&["--config", &cfg, "solve", "--checkpoint", s(&run.join("final.ckpt")), "--input", s(&seq)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("order:"));
}
