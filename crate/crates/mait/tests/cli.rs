//! End-to-end checks of the command-line binary: output content, exit
//! codes, determinism, and the zero-epoch train path.

use std::path::Path;
use std::process::{Command, Output};

fn mait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mait"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TOY_CONFIG: &str = r#"
[model]
layers = 2
heads = 2
hidden = 8
grid = { rows = 4, cols = 4 }
patch_px = 1

[scheme]
preset = "sch1"
r = 3

[train]
epochs = 1
batch = 8
val_frac = 0.25
probe_samples = 8
"#;

#[test]
fn flops_reports_pinned_stage_figures() {
    let out = mait(&["flops", "--n", "3136", "--d", "96", "--r", "3", "--m-win", "7"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("1888223232"), "mha figure missing:\n{text}");
    assert!(text.contains("29503488"), "windowed figure missing:\n{text}");
    assert!(text.contains("5419008"), "masked figure missing:\n{text}");
    assert!(text.contains("0.287"), "map ratio missing:\n{text}");
    assert!(text.contains("99.713"), "map reduction missing:\n{text}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mdat");
    let b = dir.path().join("b.mdat");
    for p in [&a, &b] {
        let out = mait(&[
            "gen-data", "--grid", "4x4", "--patch-px", "2", "--samples", "20",
            "--seed", "9", "--out", p.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    // unknown subcommand (clap handles this one)
    let out = mait(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // train requires --config
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mdat");
    let gen = mait(&[
        "gen-data", "--grid", "4x4", "--patch-px", "1", "--samples", "8",
        "--out", data.to_str().unwrap(),
    ]);
    assert!(gen.status.success());
    let out = mait(&["train", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // malformed config
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nlayers = \"many\"\n").unwrap();
    let out = mait(&[
        "train", "--config", bad.to_str().unwrap(), "--data", data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TOY_CONFIG).unwrap();
    let out = mait(&[
        "train", "--config", cfg.to_str().unwrap(),
        "--data", dir.path().join("missing.mdat").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epoch_train_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TOY_CONFIG).unwrap();
    let data = dir.path().join("d.mdat");
    let gen = mait(&[
        "gen-data", "--grid", "4x4", "--patch-px", "1", "--samples", "16",
        "--seed", "5", "--out", data.to_str().unwrap(),
    ]);
    assert!(gen.status.success());

    let run = |out_name: &str| -> std::path::PathBuf {
        let out_dir = dir.path().join(out_name);
        let out = mait(&[
            "train", "--config", cfg.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--epochs", "0", "--seed", "3",
            "--out", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let run1 = run("run1");
    let run2 = run("run2");

    // no epochs: header-only metrics, checkpoint is exactly the
    // (seeded) initial parameters, so two runs agree byte for byte
    let csv = std::fs::read_to_string(run1.join("metrics.csv")).unwrap();
    assert_eq!(csv, "epoch,loss,accuracy,als_l0,als_l1\n");
    assert_eq!(
        std::fs::read(run1.join("checkpoint.mait")).unwrap(),
        std::fs::read(run2.join("checkpoint.mait")).unwrap()
    );
    assert_initial_params(&run1.join("checkpoint.mait"), 3);

    let eval = mait(&[
        "eval",
        "--checkpoint", run1.join("checkpoint.mait").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]);
    assert!(eval.status.success());
    assert!(stdout(&eval).contains("accuracy"));
}

/// The written checkpoint must decode to exactly `init_params(config, seed)`.
fn assert_initial_params(path: &Path, seed: u64) {
    let (params, config) = mait::model::load_checkpoint(path).unwrap();
    let fresh = mait::model::init_params(&config, seed).unwrap();
    for ((name, a), (_, b)) in params.manifest().iter().zip(fresh.manifest()) {
        assert_eq!(a.data(), b.data(), "tensor {name} differs from initialization");
    }
}
