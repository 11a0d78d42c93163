//! End-to-end runs of the `tscl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ROWS: usize = 320;

fn tscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tscl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tscl")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_ett(path: &Path) {
    let mut s = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
    for i in 0..ROWS {
        let (d, h) = (1 + i / 24, i % 24);
        s.push_str(&format!("2016-07-{d:02} {h:02}:00:00"));
        for c in 0..7 {
            let v = (std::f64::consts::TAU * i as f64 / 12.0 + c as f64).sin() * (1.0 + c as f64);
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn write_config(dir: &Path, data: &Path, extra_method: &str) -> PathBuf {
    let cfg = format!(
        r#"name = "tiny"
output_dir = "{out}"
seeds = [0, 1]
horizons = [4]

[dataset]
name = "ETTsine"
kind = "ett"
path = "{data}"
lookback = 16

[backbone]
kind = "tcn"
hidden_dim = 8
num_layers = 2
tcn_channels = 8

[train]
epochs = 2
pretrain_iters = 20
batch_size = 16
max_batches_per_epoch = 5

[erf]
enabled = false
windows = [0]
steps = [0]

[[methods]]
strategy = "end_to_end"
loss = "mse"

[[methods]]
strategy = "two_step_ridge"
sscl = "moco2"
{extra_method}"#,
        out = dir.join("runs").display(),
        data = data.display(),
    );
    let p = dir.join("tiny.toml");
    fs::write(&p, cfg).unwrap();
    p
}

fn seeds_rows(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("seeds.csv")).unwrap();
    r.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn run_table_and_erf_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ETTsine.csv");
    write_ett(&data);
    let cfg = write_config(tmp.path(), &data, "");
    let cfg_s = cfg.to_str().unwrap();

    let dry = tscl(&["run", cfg_s, "--dry-run"]);
    assert_eq!(code(&dry), 0, "{}", stderr(&dry));
    assert_eq!(String::from_utf8_lossy(&dry.stdout).lines().count(), 4);

    let a = tscl(&["run", cfg_s, "--seed", "0"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = tscl(&["run", cfg_s, "--seed", "1", "--parallel", "2"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));

    let runs = tmp.path().join("runs");
    let (d0, d1) = (runs.join("tiny_seed0"), runs.join("tiny_seed1"));
    for d in [&d0, &d1] {
        for f in ["config.toml", "results.csv", "results.txt", "cells.csv", "seeds.csv"] {
            assert!(d.join(f).exists(), "{} missing", d.join(f).display());
        }
        assert_eq!(seeds_rows(d).len(), 2);
    }

    let merged = tmp.path().join("merged");
    let t = tscl(&["table", d0.to_str().unwrap(), d1.to_str().unwrap(), "--out", merged.to_str().unwrap()]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let rows = seeds_rows(&merged);
    assert_eq!(rows.len(), 4);
    for method in ["MSE", "EC+Ridge(MoCo2)"] {
        let mses: Vec<f64> = rows.iter().filter(|r| r[0] == method).map(|r| r[4].parse().unwrap()).collect();
        assert_eq!(mses.len(), 2, "{method}");
        assert!(mses.iter().all(|v| v.is_finite()));
    }

    let ridge_mse: f64 = rows.iter().filter(|r| r[0] == "EC+Ridge(MoCo2)").map(|r| r[4].parse::<f64>().unwrap()).sum::<f64>() / 2.0;
    assert!(ridge_mse < 0.1, "ridge head on a noise-free sine: test mse {ridge_mse}");

    let same = tscl(&["table", d0.to_str().unwrap(), d0.to_str().unwrap(), "--out", merged.to_str().unwrap()]);
    assert_eq!(code(&same), 0, "identical duplicate rows merge: {}", stderr(&same));

    let model = fs::read_dir(d0.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path().join("h4").join("seed0").join("model"))
        .find(|p| p.exists())
        .expect("checkpoint");
    let erf_out = tmp.path().join("erf");
    let e = tscl(&["erf", model.to_str().unwrap(), cfg_s, "--out", erf_out.to_str().unwrap()]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let pngs = fs::read_dir(&erf_out).unwrap().filter(|f| f.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert!(pngs >= 1);
}

#[test]
fn prepare_writes_splits_and_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ETTsine.csv");
    write_ett(&data);
    let out = tmp.path().join("prepared");
    let o = tscl(&["prepare", data.to_str().unwrap(), "--kind", "ett", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let count = |n: &str| fs::read_to_string(out.join(n)).unwrap().lines().count() - 1;
    assert_eq!(count("train.csv") + count("val.csv") + count("test.csv"), ROWS);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["features"].as_array().unwrap().len(), 7);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.csv");
    let cfg = write_config(tmp.path(), &missing, "");
    let o = tscl(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "missing data: {}", stderr(&o));

    let data = tmp.path().join("ETTsine.csv");
    write_ett(&data);
    let bad = write_config(tmp.path(), &data, "\n[[methods]]\nstrategy = \"two_step_mlp\"\nloss = \"mse\"\n");
    let o = tscl(&["run", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "two-step method with an end-to-end loss: {}", stderr(&o));

    let cfg = write_config(tmp.path(), &data, "");
    let o = tscl(&["run", cfg.to_str().unwrap(), "--device", "cuda"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = tscl(&["prepare", missing.to_str().unwrap(), "--kind", "ett"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
