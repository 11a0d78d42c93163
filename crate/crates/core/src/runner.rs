//! Experiment driver behind the `tscl` binary: dataset preparation, the
//! method × horizon × seed matrix, results tables and ERF artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderSpec};
use crate::checkpoint::{load_encoder, load_model, save_encoder, save_model};
use crate::config::{DatasetConfig, ExperimentConfig, MethodSpec, StrategyKind};
use crate::data::{
    hourly_aggregate, load_csv_with, make_windows, persist_prepared, prepare, synthetic_periodic, PreparedData,
    RawSeries, SplitSpec,
};
use crate::erf::{emit_heatmap, erf_gradient, erf_stats, dominant_period, write_manifest, ErfMap, ErfStats};
use crate::eval::{evaluate_windows, Metrics, MetricsReport, ResultsTable};
use crate::loss::SsclAlgorithm;
use crate::strategy::{
    finetune, fit_frozen_ridge, pretrain_sscl, train_end_to_end, train_frozen_mlp, ForecastModel, RunStatus,
    TaskData, TrainConfig,
};
use crate::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RESULTS_CSV: &str = "results.csv";
pub const CELLS_CSV: &str = "cells.csv";
pub const SEEDS_CSV: &str = "seeds.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the configured seed list with a single seed.
    pub seed: Option<u64>,
    pub raw_scale_metrics: bool,
    /// Worker processes; values above 1 need `worker_exe`.
    pub parallel: usize,
    pub worker_exe: Option<PathBuf>,
    pub dry_run: bool,
}

/// Outcome of one `(method, horizon, seed)` job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub val_mse: Option<f64>,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub table: ResultsTable,
    pub diverged: bool,
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::MissingData(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub method: usize,
    pub horizon: usize,
    pub seed: u64,
}

pub fn load_series(ds: &DatasetConfig) -> Result<RawSeries> {
    let series = match (&ds.path, &ds.synthetic) {
        (_, Some(s)) => synthetic_periodic(s.rows, s.features, s.period, s.noise, s.seed),
        (Some(p), None) => {
            if !p.exists() {
                return Err(Error::MissingData(format!("{} not found", p.display())));
            }
            load_csv_with(p, ds.kind, ds.missing)?
        }
        (None, None) => return Err(Error::config("dataset.path", "no data source")),
    };
    if ds.hourly {
        hourly_aggregate(&series)
    } else {
        Ok(series)
    }
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let series = load_series(&cfg.dataset)?;
    let min_rows = cfg.horizons.iter().map(|&h| cfg.dataset.lookback_for(h) + h).max().unwrap_or(1);
    prepare(&cfg.dataset.name, &series, &cfg.dataset.split, min_rows)
}

/// `prepare` verb: split, normalize and persist a CSV with its metadata.
pub fn prepare_command(
    path: &Path,
    kind: crate::data::DatasetKind,
    out_dir: &Path,
    split: &SplitSpec,
    hourly: bool,
) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(Error::MissingData(format!("{} not found", path.display())));
    }
    let mut series = load_csv_with(path, kind, crate::data::MissingPolicy::Reject)?;
    if hourly {
        series = hourly_aggregate(&series)?;
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let prepared = prepare(&name, &series, split, 1)?;
    persist_prepared(&prepared, out_dir)
}

pub fn jobs(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in seeds {
        for method in 0..cfg.methods.len() {
            for &horizon in &cfg.horizons {
                out.push(Job { method, horizon, seed });
            }
        }
    }
    out
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

pub fn cell_dir(run_dir: &Path, method: &MethodSpec, horizon: usize, seed: u64) -> PathBuf {
    run_dir.join("cells").join(slug(&method.label())).join(format!("h{horizon}")).join(format!("seed{seed}"))
}

fn train_cfg(cfg: &ExperimentConfig, m: &MethodSpec, seed: u64) -> TrainConfig {
    TrainConfig { seed, scheduler: cfg.scheduler_for(m), ..cfg.train.clone() }
}

/// Pretrained encoder for `(algorithm, lookback, seed)`, reused across
/// horizons and two-step methods through the run directory.
fn pretrained_encoder(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    spec: &EncoderSpec,
    prepared: &PreparedData,
    algo: SsclAlgorithm,
    lookback: usize,
    seed: u64,
) -> Result<Encoder> {
    let dir = run_dir.join("pretrain").join(format!("{}_L{lookback}_seed{seed}", slug(algo.label())));
    if dir.join(crate::checkpoint::MANIFEST_FILE).exists() {
        if let Ok(enc) = load_encoder(&dir, DType::F32) {
            if &enc.spec == spec {
                return Ok(enc);
            }
        }
    }
    let windows = make_windows(&prepared.splits.train, lookback, 1, 1)?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let (enc, report) = pretrain_sscl(spec, algo, &windows, &tc, &cfg.loss, &cfg.augment, DType::F32)?;
    if report.status == RunStatus::Diverged {
        return Err(Error::Divergence {
            step: report.optimizer_steps,
            loss: report.steps.last().map(|s| s.total).unwrap_or(f64::NAN),
        });
    }
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    save_encoder(&tmp, &enc)?;
    fs::write(tmp.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&tmp, &dir)?;
    Ok(enc)
}

/// Trains and scores one cell, writing its artifacts under the cell dir.
pub fn run_job(cfg: &ExperimentConfig, run_dir: &Path, prepared: &PreparedData, job: Job, raw: bool) -> Result<CellResult> {
    let method = &cfg.methods[job.method];
    let lookback = cfg.dataset.lookback_for(job.horizon);
    let data = TaskData::from_prepared(prepared, lookback, job.horizon)?;
    let spec = cfg.backbone.resolve(data.n_features());
    let tc = train_cfg(cfg, method, job.seed);
    let dir = cell_dir(run_dir, method, job.horizon, job.seed);
    fs::create_dir_all(&dir)?;
    log::info!("cell {} h={} seed={}", method.label(), job.horizon, job.seed);
    let (model, report) = match method.strategy {
        StrategyKind::EndToEnd => {
            let loss = method.loss.expect("validated");
            let (m, r) = train_end_to_end(&spec, loss, &data, &tc, &cfg.loss, &cfg.augment, DType::F32)?;
            (m, Some(r))
        }
        StrategyKind::TwoStepRidge | StrategyKind::TwoStepMlp | StrategyKind::Finetune => {
            let algo = method.sscl.expect("validated");
            let enc = pretrained_encoder(cfg, run_dir, &spec, prepared, algo, lookback, job.seed)?;
            match method.strategy {
                StrategyKind::TwoStepRidge => {
                    let (m, rr) = fit_frozen_ridge(&enc, &data, &tc)?;
                    fs::write(dir.join("ridge.json"), serde_json::to_string_pretty(&rr)?)?;
                    (m, None)
                }
                StrategyKind::TwoStepMlp => {
                    let (m, r) = train_frozen_mlp(&enc, &data, &tc)?;
                    (m, Some(r))
                }
                _ => {
                    let (m, r) = finetune(&enc, Some(&spec), &data, &tc)?;
                    (m, Some(r))
                }
            }
        }
    };
    let norm = raw.then_some(&prepared.normalizer);
    let test = evaluate_windows(&model, &data.test, 256, norm)?;
    save_model(&dir.join("model"), &model)?;
    let (status, val, wall) = match &report {
        Some(r) => {
            r.write_metrics_csv(&dir.join("metrics.csv"))?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
            (r.status, r.best_val_mse, r.wall_clock_secs)
        }
        None => (RunStatus::Converged, None, 0.0),
    };
    let cell = CellResult {
        method: method.label(),
        dataset: prepared.name.clone(),
        horizon: job.horizon,
        seed: job.seed,
        mse: test.mse,
        mae: test.mae,
        val_mse: val,
        status,
        wall_clock_secs: wall,
    };
    fs::write(dir.join("cell.json"), serde_json::to_string_pretty(&cell)?)?;
    Ok(cell)
}

fn run_workers(
    config_path: &Path,
    run_dir: &Path,
    exe: &Path,
    seeds: &[u64],
    jobs: &[Job],
    opts: &RunOptions,
) -> Result<()> {
    let mut pending = jobs.iter().enumerate().collect::<Vec<_>>().into_iter();
    let mut live: Vec<std::process::Child> = Vec::new();
    loop {
        while live.len() < opts.parallel.max(1) {
            let Some((i, _)) = pending.next() else { break };
            let mut cmd = Command::new(exe);
            cmd.arg("worker").arg(config_path).arg("--job").arg(i.to_string()).arg("--run-dir").arg(run_dir);
            for s in seeds {
                cmd.arg("--seeds").arg(s.to_string());
            }
            if opts.raw_scale_metrics {
                cmd.arg("--raw-scale-metrics");
            }
            live.push(cmd.spawn()?);
        }
        if live.is_empty() {
            return Ok(());
        }
        let child = live.remove(0);
        let out = child.wait_with_output()?;
        if !out.status.success() {
            log::warn!("worker exited with {}", out.status);
        }
    }
}

/// Reads the `cell.json` files of a finished run.
fn collect_cells(cfg: &ExperimentConfig, run_dir: &Path, jobs: &[Job]) -> Result<Vec<CellResult>> {
    let mut out = Vec::new();
    for j in jobs {
        let p = cell_dir(run_dir, &cfg.methods[j.method], j.horizon, j.seed).join("cell.json");
        match fs::read_to_string(&p) {
            Ok(text) => out.push(serde_json::from_str(&text)?),
            Err(_) => log::warn!("cell missing: {}", p.display()),
        }
    }
    Ok(out)
}

/// Mean over seeds per `(dataset, horizon, method)` with the seed count.
pub fn aggregate(cells: &[CellResult]) -> BTreeMap<(String, usize, String), (Metrics, usize)> {
    let mut acc: BTreeMap<(String, usize, String), (f64, f64, usize)> = BTreeMap::new();
    for c in cells {
        let e = acc.entry((c.dataset.clone(), c.horizon, c.method.clone())).or_insert((0.0, 0.0, 0));
        e.0 += c.mse;
        e.1 += c.mae;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, a, n))| (k, (Metrics { mse: s / n as f64, mae: a / n as f64 }, n)))
        .collect()
}

/// Writes `results.csv` (wide), `cells.csv` (one row per method × cell plus
/// an average row), `seeds.csv` (per-seed values) and `results.txt`.
pub fn write_tables(out_dir: &Path, cells: &[CellResult], method_order: &[String]) -> Result<ResultsTable> {
    fs::create_dir_all(out_dir)?;
    let agg = aggregate(cells);
    let mut table = ResultsTable::default();
    for m in method_order {
        if !table.methods.contains(m) {
            table.methods.push(m.clone());
        }
    }
    for ((d, h, m), (metrics, _)) in &agg {
        table.insert((d.clone(), *h), m, *metrics);
    }
    table.write_csv(&out_dir.join(RESULTS_CSV))?;
    fs::write(out_dir.join("results.txt"), table.render_text())?;

    let mut w = csv::Writer::from_path(out_dir.join(CELLS_CSV))?;
    w.write_record(["method", "dataset", "horizon", "mse", "mae", "seeds"])?;
    let mut order: Vec<(&(String, usize, String), &(Metrics, usize))> = agg.iter().collect();
    let rank = |m: &str| table.methods.iter().position(|x| x == m).unwrap_or(usize::MAX);
    order.sort_by(|a, b| rank(&a.0 .2).cmp(&rank(&b.0 .2)).then(a.0.cmp(b.0)));
    for ((d, h, m), (metrics, n)) in &order {
        w.write_record([m.clone(), d.clone(), h.to_string(), metrics.mse.to_string(), metrics.mae.to_string(), n.to_string()])?;
    }
    if !order.is_empty() {
        let k = order.len() as f64;
        let mse = order.iter().map(|(_, (m, _))| m.mse).sum::<f64>() / k;
        let mae = order.iter().map(|(_, (m, _))| m.mae).sum::<f64>() / k;
        w.write_record(["Avg".to_string(), String::new(), String::new(), mse.to_string(), mae.to_string(), String::new()])?;
    }
    w.flush()?;

    let mut s = csv::Writer::from_path(out_dir.join(SEEDS_CSV))?;
    s.write_record(["method", "dataset", "horizon", "seed", "mse", "mae"])?;
    for c in cells {
        s.write_record([
            c.method.clone(),
            c.dataset.clone(),
            c.horizon.to_string(),
            c.seed.to_string(),
            c.mse.to_string(),
            c.mae.to_string(),
        ])?;
    }
    s.flush()?;
    Ok(table)
}

/// Per-method reports (`MetricsReport` over that method's cells).
fn write_reports(out_dir: &Path, table: &ResultsTable) -> Result<()> {
    let mut reports = BTreeMap::new();
    for m in &table.methods {
        let entries: BTreeMap<_, _> =
            table.cells.iter().filter(|((_, mm), _)| mm == m).map(|((k, _), v)| (k.clone(), *v)).collect();
        if !entries.is_empty() {
            reports.insert(m.clone(), MetricsReport::from_entries(&entries, &[])?);
        }
    }
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

/// Run directory; single-seed runs get their own folder so they can be
/// merged later with `table`.
pub fn run_dir_for(cfg: &ExperimentConfig, seed: Option<u64>) -> PathBuf {
    match seed {
        Some(s) => cfg.output_dir.join(format!("{}_seed{s}", cfg.name)),
        None => cfg.output_dir.join(&cfg.name),
    }
}

/// `run` verb. Returns the outcome; `diverged` is set when any cell hit the
/// divergence guard.
pub fn run(cfg: &ExperimentConfig, config_path: Option<&Path>, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let seeds: Vec<u64> = opts.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    let jobs = jobs(cfg, &seeds);
    let run_dir = run_dir_for(cfg, opts.seed);
    if opts.dry_run {
        return Ok(RunOutcome { run_dir, cells: Vec::new(), table: ResultsTable::default(), diverged: false });
    }
    let prepared = prepare_dataset(cfg)?;
    fs::create_dir_all(&run_dir)?;
    let mut snapshot = cfg.clone();
    snapshot.seeds = seeds.clone();
    snapshot.raw_scale_metrics = cfg.raw_scale_metrics || opts.raw_scale_metrics;
    fs::write(run_dir.join(CONFIG_SNAPSHOT), snapshot.to_toml_string()?)?;
    let raw = snapshot.raw_scale_metrics;
    let labels: Vec<String> = cfg.methods.iter().map(|m| m.label()).collect();

    let mut cells = Vec::new();
    let mut diverged = false;
    match (&opts.worker_exe, config_path) {
        (Some(exe), Some(path)) if opts.parallel > 1 => {
            run_workers(path, &run_dir, exe, &seeds, &jobs, opts)?;
            cells = collect_cells(cfg, &run_dir, &jobs)?;
        }
        _ => {
            for job in &jobs {
                match run_job(&snapshot, &run_dir, &prepared, *job, raw) {
                    Ok(c) => cells.push(c),
                    Err(Error::Divergence { step, loss }) => {
                        log::error!("pretraining diverged at step {step} (loss {loss})");
                        diverged = true;
                    }
                    Err(e) => {
                        write_tables(&run_dir, &cells, &labels)?;
                        return Err(e);
                    }
                }
                write_tables(&run_dir, &cells, &labels)?;
            }
        }
    }
    diverged |= cells.iter().any(|c| c.status == RunStatus::Diverged);
    let table = write_tables(&run_dir, &cells, &labels)?;
    write_reports(&run_dir, &table)?;
    if cfg.erf.enabled {
        emit_run_erf(&snapshot, &run_dir, &prepared, &seeds)?;
    }
    Ok(RunOutcome { run_dir, cells, table, diverged })
}

/// Entry point of a `--parallel` worker process: runs job `index`.
pub fn run_worker(cfg: &ExperimentConfig, run_dir: &Path, seeds: &[u64], index: usize, raw: bool) -> Result<CellResult> {
    let jobs = jobs(cfg, seeds);
    let job = *jobs.get(index).ok_or_else(|| Error::config("--job", format!("no job {index}")))?;
    let prepared = prepare_dataset(cfg)?;
    run_job(cfg, run_dir, &prepared, job, raw)
}

fn emit_run_erf(cfg: &ExperimentConfig, run_dir: &Path, prepared: &PreparedData, seeds: &[u64]) -> Result<()> {
    let out = run_dir.join("erf");
    let mut files = Vec::new();
    let seed = seeds[0];
    for method in &cfg.methods {
        for &h in &cfg.horizons {
            let dir = cell_dir(run_dir, method, h, seed).join("model");
            if !dir.exists() {
                continue;
            }
            let model = load_model(&dir, DType::F32)?;
            let name = format!("{}_h{h}", slug(&method.label()));
            files.extend(emit_model_erf(&model, prepared, cfg.dataset.lookback_for(h), cfg, &out, &name)?);
        }
    }
    write_manifest(&out, &files)?;
    Ok(())
}

fn emit_model_erf(
    model: &ForecastModel,
    prepared: &PreparedData,
    lookback: usize,
    cfg: &ExperimentConfig,
    out: &Path,
    name: &str,
) -> Result<Vec<PathBuf>> {
    let val = make_windows(&prepared.splits.val, lookback, model.horizon, 1)?;
    let mut maps: Vec<(String, ErfMap, ErfStats)> = Vec::new();
    for &w in &cfg.erf.windows {
        let Some(&start) = val.starts.get(w) else { continue };
        let x = val.input_rows(start).to_vec();
        let y = val.target_rows(start).to_vec();
        let period = dominant_period(&x, lookback, model.n_features);
        for &j in cfg.erf.steps.iter().filter(|&&j| j < model.horizon) {
            let map = erf_gradient(model, &x, &y, j)?;
            let stats = erf_stats(&map, period);
            maps.push((format!("{name}_{w}_{j}"), map, stats));
        }
    }
    let shared = cfg.erf.shared_scale.then(|| maps.iter().map(|(_, m, _)| m.max_abs()).fold(0.0, f64::max));
    let mut files = Vec::new();
    let mut summary = BTreeMap::new();
    for (n, map, stats) in &maps {
        files.extend(emit_heatmap(map, out, n, shared)?);
        summary.insert(n.clone(), *stats);
    }
    let sp = out.join(format!("erf_{name}_stats.json"));
    fs::write(&sp, serde_json::to_string_pretty(&summary)?)?;
    files.push(sp);
    Ok(files)
}

/// `erf` verb: maps for a saved model checkpoint on the config's
/// validation windows.
pub fn erf_command(checkpoint: &Path, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = load_model(checkpoint, DType::F32)?;
    let prepared = prepare_dataset(cfg)?;
    let name = checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| slug(&s.to_string_lossy()))
        .unwrap_or_else(|| "model".into());
    let name = if name.is_empty() { "model".to_string() } else { name };
    let files = emit_model_erf(&model, &prepared, cfg.dataset.lookback_for(model.horizon), cfg, out_dir, &name)?;
    write_manifest(out_dir, &files)?;
    Ok(files)
}

fn read_seeds_csv(path: &Path) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |e: String| Error::MalformedFile { path: path.to_path_buf(), reason: e };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 columns, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
        out.push(CellResult {
            method: rec[0].to_string(),
            dataset: rec[1].to_string(),
            horizon: rec[2].parse().map_err(|_| bad("bad horizon".into()))?,
            seed: rec[3].parse().map_err(|_| bad("bad seed".into()))?,
            mse: num(4)?,
            mae: num(5)?,
            val_mse: None,
            status: RunStatus::Converged,
            wall_clock_secs: 0.0,
        });
    }
    Ok(out)
}

/// `table` verb: merges run directories. Different seeds of one cell are
/// averaged; the same seed reported twice with different values is a
/// conflict.
pub fn table_command(dirs: &[PathBuf], out_dir: &Path) -> Result<ResultsTable> {
    let mut cells: Vec<CellResult> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for d in dirs {
        let p = d.join(SEEDS_CSV);
        if !p.exists() {
            return Err(Error::MissingData(format!("{} not found", p.display())));
        }
        for c in read_seeds_csv(&p)? {
            if !methods.contains(&c.method) {
                methods.push(c.method.clone());
            }
            if let Some(prev) = cells
                .iter()
                .find(|x| x.method == c.method && x.dataset == c.dataset && x.horizon == c.horizon && x.seed == c.seed)
            {
                if prev.mse != c.mse || prev.mae != c.mae {
                    return Err(Error::ConflictingCells(format!(
                        "{} {} h={} seed={} reported as {} and {}",
                        c.method, c.dataset, c.horizon, c.seed, prev.mse, c.mse
                    )));
                }
                continue;
            }
            cells.push(c);
        }
    }
    let table = write_tables(out_dir, &cells, &methods)?;
    for (k, m) in table.missing() {
        log::warn!("missing cell: {} h={} for {m}", k.0, k.1);
    }
    Ok(table)
}
