//! End-to-end checks of the `slpt` binary: artifact layout, byte-for-byte
//! determinism, config round trips, and the failure modes the commands must
//! report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slpt"))
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("slpt-cli-{}-{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small-but-real run: 6 landmarks on 32x32 synthetic images, two epochs.
fn tiny_args(out: &Path, seed: u64) -> Vec<String> {
    [
        "--dataset",
        "synthetic",
        "--landmarks",
        "6",
        "--input",
        "32",
        "--dim",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--patch-k",
        "3",
        "--stages",
        "2",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--synth-train",
        "12",
        "--synth-test",
        "6",
        "--augment",
        "0",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(["--seed".to_string(), seed.to_string()])
    .chain(["--out".to_string(), out.to_string_lossy().into_owned()])
    .collect()
}

fn run_ok(args: &[String]) -> Output {
    let out = bin().args(args).output().expect("spawn slpt");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_into(dir: &Path, seed: u64) {
    let mut args = vec!["train".to_string()];
    args.extend(tiny_args(dir, seed));
    run_ok(&args);
}

#[test]
fn train_writes_log_and_checkpoints() {
    let dir = work_dir("train");
    train_into(&dir, 7);
    let log = fs::read_to_string(dir.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch=1 loss="));
    assert!(lines[0].contains("stage1_nme=") && lines[0].contains("stage2_nme="));
    assert!(dir.join("best.ckpt").exists());
    assert!(dir.join("final.ckpt").exists());
    assert!(dir.join("config.txt").exists());
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let a = work_dir("det-a");
    let b = work_dir("det-b");
    train_into(&a, 7);
    train_into(&b, 7);
    for file in ["train.log", "final.ckpt", "best.ckpt", "config.txt"] {
        let fa = fs::read(a.join(file)).unwrap();
        let fb = fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
    // and a different seed actually changes the run
    let c = work_dir("det-c");
    train_into(&c, 8);
    assert_ne!(
        fs::read(a.join("train.log")).unwrap(),
        fs::read(c.join("train.log")).unwrap()
    );
}

#[test]
fn echoed_config_reruns_identically() {
    let a = work_dir("echo-a");
    train_into(&a, 3);
    let b = work_dir("echo-b");
    let out = bin()
        .args([
            "train",
            "--config",
            a.join("config.txt").to_str().unwrap(),
            "--out",
            b.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(a.join("train.log")).unwrap(),
        fs::read(b.join("train.log")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn defaults_mirror_the_reference_settings() {
    // dims left at defaults; tiny dataset and zero epochs keep it fast
    let dir = work_dir("defaults");
    run_ok(&[
        "train".into(),
        "--dataset".into(),
        "synthetic".into(),
        "--landmarks".into(),
        "6".into(),
        "--input".into(),
        "32".into(),
        "--epochs".into(),
        "0".into(),
        "--synth-train".into(),
        "2".into(),
        "--synth-test".into(),
        "2".into(),
        "--out".into(),
        dir.to_string_lossy().into_owned(),
    ]);
    let cfg = fs::read_to_string(dir.join("config.txt")).unwrap();
    for expected in [
        "patch_k=7",
        "layers=6",
        "stages=3",
        "lr=0.001",
        "threshold=0.1",
        "milestones=120,140",
        "heads=8",
        "dim=256",
    ] {
        assert!(cfg.contains(&format!("{expected}\n")), "missing default {expected} in:\n{cfg}");
    }
}

#[test]
fn eval_writes_report_and_rejects_mismatched_config() {
    let dir = work_dir("eval");
    train_into(&dir, 5);
    let eval_dir = work_dir("eval-out");
    let mut args = vec!["eval".to_string()];
    args.extend(tiny_args(&eval_dir, 5));
    args.push("--checkpoint".into());
    args.push(dir.join("final.ckpt").to_string_lossy().into_owned());
    run_ok(&args);

    let report = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    for key in ["nme_percent=", "fr_percent=", "auc=", "stage1_nme_percent=", "stage2_nme_percent="] {
        assert!(report.contains(key), "report missing {key}:\n{report}");
    }
    let stages = fs::read_to_string(eval_dir.join("stages.txt")).unwrap();
    assert_eq!(stages.lines().count(), 3, "header plus one row per stage:\n{stages}");
    let ced = fs::read_to_string(eval_dir.join("ced.txt")).unwrap();
    let fracs: Vec<f64> = ced
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(fracs.windows(2).all(|w| w[0] <= w[1]), "CED must be non-decreasing");

    // explicit landmark count that contradicts the checkpoint
    let bad_dir = work_dir("eval-bad");
    let mut args = vec!["eval".to_string()];
    args.extend(tiny_args(&bad_dir, 5));
    for a in &mut args {
        if a == "6" {
            *a = "12".to_string();
            break; // first "6" is the --landmarks value
        }
    }
    args.push("--checkpoint".into());
    args.push(dir.join("final.ckpt").to_string_lossy().into_owned());
    let out = bin().args(&args).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains('6') && stderr.contains("12"), "stderr: {stderr}");
}

#[test]
fn export_attention_matrices_are_row_stochastic() {
    let dir = work_dir("export");
    train_into(&dir, 9);
    let export_dir = work_dir("export-out");
    let mut args = vec!["export-attention".to_string()];
    args.extend(tiny_args(&export_dir, 9));
    args.push("--checkpoint".into());
    args.push(dir.join("final.ckpt").to_string_lossy().into_owned());
    run_ok(&args);

    for file in ["msa_layer1.txt", "mca_layer1.txt"] {
        let text = fs::read_to_string(export_dir.join(file)).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 6, "{file} should have one row per landmark");
        for row in &rows {
            assert_eq!(row.len(), 6);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{file} row sums to {sum}");
        }
    }
    let sim = fs::read_to_string(export_dir.join("encoding_similarity.txt")).unwrap();
    for (i, line) in sim.lines().enumerate() {
        let vals: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert!((vals[i] - 1.0).abs() < 1e-9, "similarity diagonal");
    }
    let connections = fs::read_to_string(export_dir.join("connections.txt")).unwrap();
    assert_eq!(connections.lines().count(), 6, "one line per exported image");
    assert!(connections.starts_with("image=0 "));
}

#[test]
fn sweep_encoding_axis_writes_two_rows_and_parallel_matches() {
    let dir = work_dir("sweep");
    let mut args = vec!["sweep".to_string(), "--axis".to_string(), "encoding".to_string()];
    args.extend(tiny_args(&dir, 4));
    run_ok(&args);
    let table = fs::read_to_string(dir.join("sweep_encoding.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "header + two rows:\n{table}");
    assert!(lines[1].starts_with("encoding=0"));
    assert!(lines[2].starts_with("encoding=1"));
    assert!(lines[0].contains("stage2_nme") && lines[0].contains("final_nme"));

    let par_dir = work_dir("sweep-par");
    let mut args = vec![
        "sweep".to_string(),
        "--axis".to_string(),
        "encoding".to_string(),
        "--parallel".to_string(),
    ];
    args.extend(tiny_args(&par_dir, 4));
    run_ok(&args);
    assert_eq!(
        fs::read(dir.join("sweep_encoding.txt")).unwrap(),
        fs::read(par_dir.join("sweep_encoding.txt")).unwrap(),
        "parallel sweep must match sequential byte-for-byte"
    );
}

#[test]
fn unknown_format_and_missing_args_fail_cleanly() {
    let out = bin()
        .args(["train", "--dataset", "/nonexistent", "--format", "bogus", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = bin().args(["eval", "--out", "/tmp/x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn file_dataset_round_trip_through_training() {
    // tiny on-disk cofw29-format dataset
    let data_dir = work_dir("filedata");
    let mut rows = String::new();
    for i in 0..4 {
        let img_name = format!("f{i}.ppm");
        // plain gradient image
        let mut ppm = format!("P6\n32 32\n255\n").into_bytes();
        for y in 0..32 {
            for x in 0..32 {
                ppm.push(((x * 8 + i) % 256) as u8);
                ppm.push(((y * 8) % 256) as u8);
                ppm.push(128);
            }
        }
        fs::write(data_dir.join(&img_name), ppm).unwrap();
        let coords: Vec<String> = (0..29)
            .map(|k| format!("{}.0,{}.0", 2 + (k * 7 + i) % 28, 2 + (k * 11) % 28))
            .collect();
        rows.push_str(&format!("{},{img_name}\n", coords.join(",")));
    }
    fs::write(data_dir.join("anno.csv"), rows).unwrap();

    let out_dir = work_dir("filedata-out");
    run_ok(&[
        "train".into(),
        "--dataset".into(),
        data_dir.join("anno.csv").to_string_lossy().into_owned(),
        "--format".into(),
        "cofw29".into(),
        "--input".into(),
        "32".into(),
        "--dim".into(),
        "8".into(),
        "--heads".into(),
        "2".into(),
        "--layers".into(),
        "1".into(),
        "--patch-k".into(),
        "3".into(),
        "--stages".into(),
        "1".into(),
        "--epochs".into(),
        "1".into(),
        "--batch".into(),
        "2".into(),
        "--augment".into(),
        "0".into(),
        "--seed".into(),
        "1".into(),
        "--out".into(),
        out_dir.to_string_lossy().into_owned(),
    ]);
    assert!(out_dir.join("final.ckpt").exists());
    let log = fs::read_to_string(out_dir.join("train.log")).unwrap();
    assert!(log.starts_with("epoch=1 "));
}
