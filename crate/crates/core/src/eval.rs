//! Forecasting, MSE/MAE metrics and results tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, WindowSet};
use crate::nn::to_vec_f64;
use crate::strategy::ForecastModel;
use crate::{Error, Result};

/// Horizons reported for hourly ETT and ECL.
pub const HOURLY_HORIZONS: [usize; 5] = [24, 48, 168, 336, 720];
/// Horizons reported for 15-minute ETTm1.
pub const ETTM1_HORIZONS: [usize; 5] = [24, 48, 96, 288, 672];

pub fn horizons_for(dataset: &str) -> &'static [usize] {
    if dataset.eq_ignore_ascii_case("ettm1") {
        &ETTM1_HORIZONS
    } else {
        &HOURLY_HORIZONS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Streaming sums of squared and absolute errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    sq: f64,
    abs: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &[f64], gold: &[f64]) -> Result<()> {
        if pred.len() != gold.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions vs {} targets", pred.len(), gold.len())));
        }
        for (p, g) in pred.iter().zip(gold) {
            let e = p - g;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.n += pred.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::ShapeMismatch("no elements to score".into()));
        }
        Ok(Metrics { mse: self.sq / self.n as f64, mae: self.abs / self.n as f64 })
    }
}

pub fn mse_mae(pred: &[f64], gold: &[f64]) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gold)?;
    acc.finish()
}

/// `B×L×m → B×T×m`.
pub fn forecast(model: &ForecastModel, inputs: &Tensor) -> Result<Tensor> {
    match inputs.dims() {
        [_, l, m] if *m == model.n_features && *l > 0 => model.forward(inputs),
        other => Err(Error::ShapeMismatch(format!(
            "forecast expects B×L×{}, got {other:?}",
            model.n_features
        ))),
    }
}

/// Scores every window of `set`. With `raw`, predictions and targets are
/// mapped back to the original scale first.
pub fn evaluate_windows(
    model: &ForecastModel,
    set: &WindowSet,
    batch_size: usize,
    raw: Option<&Normalizer>,
) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    let dtype = model.encoder.dtype();
    for batch in set.batches(batch_size, dtype) {
        let batch = batch?;
        let mut pred = to_vec_f64(&forecast(model, &batch.inputs)?.detach())?;
        let mut gold = to_vec_f64(&batch.targets)?;
        if let Some(n) = raw {
            n.invert_in_place(&mut pred);
            n.invert_in_place(&mut gold);
        }
        acc.add(&pred, &gold)?;
    }
    acc.finish()
}

/// `(dataset, horizon)`.
pub type CellKey = (String, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Per-cell metrics plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<CellMetrics>,
    pub averages: Metrics,
}

impl MetricsReport {
    /// Fails with `MissingCell` when an expected key has no entry.
    pub fn from_entries(entries: &BTreeMap<CellKey, Metrics>, expected: &[CellKey]) -> Result<Self> {
        for (dataset, horizon) in expected {
            if !entries.contains_key(&(dataset.clone(), *horizon)) {
                return Err(Error::MissingCell { dataset: dataset.clone(), horizon: *horizon });
            }
        }
        if entries.is_empty() {
            return Err(Error::InvalidSpec("metrics report needs at least one cell".into()));
        }
        let n = entries.len() as f64;
        let averages = Metrics {
            mse: entries.values().map(|m| m.mse).sum::<f64>() / n,
            mae: entries.values().map(|m| m.mae).sum::<f64>() / n,
        };
        let entries = entries
            .iter()
            .map(|((d, h), m)| CellMetrics { dataset: d.clone(), horizon: *h, mse: m.mse, mae: m.mae })
            .collect();
        Ok(Self { entries, averages })
    }
}

/// Scores each configured cell's model on that cell's test windows.
pub fn evaluate_matrix(
    models: &BTreeMap<CellKey, ForecastModel>,
    data: &BTreeMap<CellKey, WindowSet>,
    expected: &[CellKey],
    batch_size: usize,
    raw: Option<&BTreeMap<String, Normalizer>>,
) -> Result<MetricsReport> {
    let mut entries = BTreeMap::new();
    for key in expected {
        let missing = || Error::MissingCell { dataset: key.0.clone(), horizon: key.1 };
        let model = models.get(key).ok_or_else(missing)?;
        let set = data.get(key).ok_or_else(missing)?;
        let norm = raw.and_then(|r| r.get(&key.0));
        entries.insert(key.clone(), evaluate_windows(model, set, batch_size, norm)?);
    }
    MetricsReport::from_entries(&entries, expected)
}

/// Wide results table: rows are `(dataset, horizon)`, columns are methods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub methods: Vec<String>,
    pub cells: BTreeMap<(CellKey, String), Metrics>,
}

impl ResultsTable {
    pub fn insert(&mut self, key: CellKey, method: &str, m: Metrics) {
        if !self.methods.iter().any(|x| x == method) {
            self.methods.push(method.to_string());
        }
        self.cells.insert((key, method.to_string()), m);
    }

    pub fn rows(&self) -> Vec<CellKey> {
        let set: BTreeSet<CellKey> = self.cells.keys().map(|(k, _)| k.clone()).collect();
        set.into_iter().collect()
    }

    /// Mean over the rows where the method has a value.
    pub fn average(&self, method: &str) -> Option<Metrics> {
        let vals: Vec<&Metrics> = self.cells.iter().filter(|((_, m), _)| m == method).map(|(_, v)| v).collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        Some(Metrics {
            mse: vals.iter().map(|v| v.mse).sum::<f64>() / n,
            mae: vals.iter().map(|v| v.mae).sum::<f64>() / n,
        })
    }

    /// Rows and methods lacking a value.
    pub fn missing(&self) -> Vec<(CellKey, String)> {
        let mut out = Vec::new();
        for r in self.rows() {
            for m in &self.methods {
                if !self.cells.contains_key(&(r.clone(), m.clone())) {
                    out.push((r.clone(), m.clone()));
                }
            }
        }
        out
    }

    /// `dataset,horizon,<method> MSE,<method> MAE,…` with a closing `Avg` row.
    /// Missing cells are left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dataset".to_string(), "horizon".to_string()];
        for m in &self.methods {
            header.push(format!("{m} MSE"));
            header.push(format!("{m} MAE"));
        }
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (d, h) in self.rows() {
            let mut rec = vec![d.clone(), h.to_string()];
            for m in &self.methods {
                let c = self.cells.get(&((d.clone(), h), m.clone()));
                rec.push(fmt(c.map(|c| c.mse)));
                rec.push(fmt(c.map(|c| c.mae)));
            }
            w.write_record(&rec)?;
        }
        let mut avg = vec!["Avg".to_string(), String::new()];
        for m in &self.methods {
            let a = self.average(m);
            avg.push(fmt(a.map(|a| a.mse)));
            avg.push(fmt(a.map(|a| a.mae)));
        }
        w.write_record(&avg)?;
        w.flush()?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}{:>6}", "Dataset", "T");
        for m in &self.methods {
            let _ = write!(s, " | {:^17}", m);
        }
        s.push('\n');
        let _ = write!(s, "{:<16}", "");
        for _ in &self.methods {
            let _ = write!(s, " | {:>8} {:>8}", "MSE", "MAE");
        }
        s.push('\n');
        let cell = |c: Option<&Metrics>| match c {
            Some(c) => format!(" | {:>8.3} {:>8.3}", c.mse, c.mae),
            None => format!(" | {:>8} {:>8}", "-", "-"),
        };
        for (d, h) in self.rows() {
            let _ = write!(s, "{:<10}{:>6}", d, h);
            for m in &self.methods {
                s.push_str(&cell(self.cells.get(&((d.clone(), h), m.clone()))));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<16}", "Avg");
        for m in &self.methods {
            s.push_str(&cell(self.average(m).as_ref()));
        }
        s.push('\n');
        s
    }
}

/// Reads back a table written by [`ResultsTable::write_csv`], skipping the
/// average row.
pub fn read_results_csv(path: &Path) -> Result<ResultsTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let bad = |reason: String| Error::MalformedFile { path: path.to_path_buf(), reason };
    if header.len() < 2 || header[0] != "dataset" || header[1] != "horizon" || header.len() % 2 != 0 {
        return Err(bad("unexpected results header".into()));
    }
    let methods: Vec<String> = header[2..]
        .chunks(2)
        .map(|c| c[0].strip_suffix(" MSE").unwrap_or(&c[0]).to_string())
        .collect();
    let mut table = ResultsTable { methods: methods.clone(), ..Default::default() };
    for rec in r.records() {
        let rec = rec?;
        if &rec[0] == "Avg" {
            continue;
        }
        let h: usize = rec[1].parse().map_err(|_| bad(format!("bad horizon `{}`", &rec[1])))?;
        for (i, m) in methods.iter().enumerate() {
            let (a, b) = (&rec[2 + 2 * i], &rec[3 + 2 * i]);
            if a.is_empty() {
                continue;
            }
            let mse = a.parse().map_err(|_| bad(format!("bad value `{a}`")))?;
            let mae = b.parse().map_err(|_| bad(format!("bad value `{b}`")))?;
            table.cells.insert(((rec[0].to_string(), h), m.clone()), Metrics { mse, mae });
        }
    }
    Ok(table)
}
