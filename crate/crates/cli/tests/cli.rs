use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hairsynth::htx;

fn hairsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hairsynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, size: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = hairsynth(&[
        "synth-data",
        "--seed",
        "3",
        "--count",
        "6",
        "--size",
        &size.to_string(),
        "--out",
        s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

const TINY: &str = r#"{
  "image_size": 16,
  "base_channels": 4,
  "disc_base_channels": 4,
  "regen_depth": 2,
  "stage_steps": { "basic": 3, "regen_gt": 2, "regen_coarse": 2, "joint": 2 }
}"#;

#[test]
fn synth_data_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let manifest = fs::read_to_string(data.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"count\": 6"), "{manifest}");
    for sub in ["gt", "sketch", "lr4", "lr8"] {
        assert_eq!(fs::read_dir(data.join(sub)).unwrap().count(), 6, "{sub}");
    }
}

#[test]
fn bad_size_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hairsynth(&[
        "synth-data",
        "--seed",
        "1",
        "--count",
        "6",
        "--size",
        "20",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&hairsynth(&["synth-data", "--seed", "x"])), 1);
    assert_eq!(code(&hairsynth(&["no-such-command"])), 1);
    assert_eq!(code(&hairsynth(&["--help"])), 0);
}

#[test]
fn extract_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 32);
    let out = dir.path().join("maps");
    let r = hairsynth(&[
        "extract",
        "--in",
        s(&data.join("gt/0000.png")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["texture", "orientation", "raw_texture", "raw_orientation"] {
        assert!(out.join(format!("{name}.png")).exists(), "{name}.png");
        let t = htx::read(out.join(format!("{name}.htx"))).unwrap();
        assert_eq!(t.shape(), &[1, 32, 32], "{name}");
    }
}

#[test]
fn extract_rejects_bad_bank_params() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let params = dir.path().join("bank.json");
    fs::write(&params, r#"{"sigma_u": -1.0}"#).unwrap();
    let r = hairsynth(&[
        "extract",
        "--in",
        s(&data.join("gt/0000.png")),
        "--out",
        s(&dir.path().join("maps")),
        "--bank-params",
        s(&params),
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn dump_kernels_writes_the_bank() {
    let dir = tempfile::tempdir().unwrap();
    let r = hairsynth(&["dump-kernels", "--out", s(dir.path())]);
    assert_eq!(code(&r), 0);
    let k = htx::read(dir.path().join("kernels.htx")).unwrap();
    assert_eq!(k.shape(), &[8, 1, 11, 11]);
    // Stored as f32, so zero mean only up to single-precision rounding.
    assert!(k
        .data()
        .chunks(121)
        .all(|c| c.iter().sum::<f64>().abs() < 1e-5));
    assert!(dir.path().join("kernel_07.png").exists());
    assert!(dir.path().join("bank.json").exists());
}

#[test]
fn train_all_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let config = dir.path().join("config.json");
    fs::write(&config, TINY).unwrap();
    let ckpt = dir.path().join("ckpt");
    let r = hairsynth(&[
        "train",
        "--task",
        "hair_sr4",
        "--stage",
        "all",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--ckpt-dir",
        s(&ckpt),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for stage in ["basic", "regen_gt", "regen_coarse", "joint"] {
        assert!(ckpt.join(stage).join("manifest.json").exists(), "{stage}");
        assert!(ckpt.join(format!("losses_{stage}.csv")).exists(), "{stage}");
    }
    let report = dir.path().join("report.json");
    let r = hairsynth(&[
        "eval",
        "--task",
        "hair_sr4",
        "--ckpt-dir",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(
        text.contains("mean_refined") && text.contains("mean_baseline"),
        "{text}"
    );
    assert!(
        fs::read_dir(dir.path().join("report_panels"))
            .unwrap()
            .count()
            > 0
    );

    // Wrong task for this checkpoint directory.
    let r = hairsynth(&[
        "eval",
        "--task",
        "sketch2hair",
        "--ckpt-dir",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn stage_order_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let config = dir.path().join("config.json");
    fs::write(&config, TINY).unwrap();
    let r = hairsynth(&[
        "train",
        "--task",
        "sketch2hair",
        "--stage",
        "regen_coarse",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--ckpt-dir",
        s(&dir.path().join("ckpt")),
    ]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("regen_coarse"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let config = dir.path().join("config.json");
    for bad in [
        r#"{"lr_base": 1e-4, "lr_finetune": 1e-3}"#,
        r#"{"unknown_field": 1}"#,
        r#"{"task": "hair_sr8"}"#,
        "not json",
    ] {
        fs::write(&config, bad).unwrap();
        let r = hairsynth(&[
            "train",
            "--task",
            "sketch2hair",
            "--stage",
            "basic",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--ckpt-dir",
            s(&dir.path().join("ckpt")),
        ]);
        assert_eq!(code(&r), 1, "{bad}");
    }
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16);
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"image_size": 16, "base_channels": 4, "disc_base_channels": 4, "regen_depth": 2,
            "lr_base": 1e300, "lr_finetune": 1e299, "optimizer": {"adaptive": false},
            "stage_steps": {"basic": 20, "regen_gt": 1, "regen_coarse": 1, "joint": 1}}"#,
    )
    .unwrap();
    let r = hairsynth(&[
        "train",
        "--task",
        "sketch2hair",
        "--stage",
        "basic",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--ckpt-dir",
        s(&dir.path().join("ckpt")),
    ]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn grad_check_flags_only_the_injected_fault() {
    let r = hairsynth(&["grad-check", "--inject-fault"]);
    assert_eq!(code(&r), 2);
    let stdout = String::from_utf8_lossy(&r.stdout);
    let failures: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert!(!failures.is_empty());
    assert!(
        failures.iter().all(|l| l.contains("corrupted_square")),
        "{failures:?}"
    );
}
