//! Dataset ingestion, splitting, normalization and sliding windows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const ETT_COLUMNS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];
pub const ECL_MIN_CLIENTS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Date column followed by the seven ETT features, the last being `OT`.
    Ett,
    /// Date column followed by one column per client (at least 300).
    Ecl,
    /// Date column followed by any number (≥ 1) of real columns.
    Custom,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ett" | "etth1" | "etth2" | "ettm1" | "ettm2" => Ok(DatasetKind::Ett),
            "ecl" | "electricity" => Ok(DatasetKind::Ecl),
            "custom" | "synthetic" => Ok(DatasetKind::Custom),
            other => Err(Error::config("kind", format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    ForwardFill,
}

/// Timestamped `N×m` observation matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
    pub feature_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl RawSeries {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let m = feature_names.len();
        if m == 0 {
            return Err(Error::ShapeMismatch("series needs at least one feature".into()));
        }
        if values.len() != timestamps.len() * m {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows × {m} features",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(row) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotonicTimestamps { row: row + 1 });
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
            metadata: BTreeMap::new(),
        })
    }

    /// Series with hourly timestamps starting at 2016-07-01 00:00:00.
    pub fn from_rows(rows: &[Vec<f64>], feature_names: Vec<String>) -> Result<Self> {
        let start = NaiveDateTime::parse_from_str("2016-07-01 00:00:00", TIMESTAMP_FORMAT)
            .expect("static timestamp");
        let timestamps = (0..rows.len())
            .map(|i| start + chrono::Duration::hours(i as i64))
            .collect();
        Self::new(timestamps, rows.concat(), feature_names)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_features();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[j]).collect()
    }

    /// Rows `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let m = self.n_features();
        RawSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * m..end * m].to_vec(),
            feature_names: self.feature_names.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

pub fn load_csv(path: &Path, kind: DatasetKind) -> Result<RawSeries> {
    load_csv_with(path, kind, MissingPolicy::Reject)
}

pub fn load_csv_with(path: &Path, kind: DatasetKind, missing: MissingPolicy) -> Result<RawSeries> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(malformed("header needs a date column and at least one feature".into()));
    }
    let features: Vec<String> = header[1..].to_vec();
    match kind {
        DatasetKind::Ett => {
            if features.len() != ETT_COLUMNS.len() || features.last().map(String::as_str) != Some("OT") {
                return Err(malformed(format!(
                    "ETT header must be date + 7 features ending in OT, got {}",
                    header.join(",")
                )));
            }
        }
        DatasetKind::Ecl => {
            if features.len() < ECL_MIN_CLIENTS {
                return Err(malformed(format!(
                    "ECL header must carry at least {ECL_MIN_CLIENTS} client columns, got {}",
                    features.len()
                )));
            }
        }
        DatasetKind::Custom => {}
    }
    let m = features.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut last: Option<Vec<f64>> = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != m + 1 {
            return Err(malformed(format!(
                "data row {} has {} fields, expected {}",
                i + 1,
                rec.len(),
                m + 1
            )));
        }
        let ts = NaiveDateTime::parse_from_str(rec[0].trim(), TIMESTAMP_FORMAT)
            .map_err(|e| malformed(format!("data row {}: bad timestamp `{}`: {e}", i + 1, &rec[0])))?;
        let mut row = Vec::with_capacity(m);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let field = field.trim();
            let parsed = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                None
            } else {
                Some(field.parse::<f64>().map_err(|_| {
                    malformed(format!("data row {}: column {} is not a number: `{field}`", i + 1, j + 1))
                })?)
            };
            let v = match (parsed, missing) {
                (Some(v), _) if v.is_finite() => v,
                (_, MissingPolicy::ForwardFill) => match &last {
                    Some(prev) => prev[j],
                    None => {
                        return Err(malformed(format!(
                            "data row {}: missing value with nothing to forward-fill",
                            i + 1
                        )))
                    }
                },
                _ => return Err(malformed(format!("data row {}: missing value in column {}", i + 1, j + 1))),
            };
            row.push(v);
        }
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::NonMonotonicTimestamps { row: i + 1 });
            }
        }
        timestamps.push(ts);
        values.extend_from_slice(&row);
        last = Some(row);
    }
    if timestamps.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut series = RawSeries::new(timestamps, values, features)?;
    series.metadata.insert("kind".into(), format!("{kind:?}").to_lowercase());
    series.metadata.insert("n_features".into(), m.to_string());
    if kind == DatasetKind::Ecl {
        series.metadata.insert("clients".into(), m.to_string());
    }
    series.metadata.insert("source_sha256".into(), file_sha256(path)?);
    Ok(series)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Averages rows falling into the same clock hour. Output timestamps are the
/// hour boundaries.
pub fn hourly_aggregate(series: &RawSeries) -> Result<RawSeries> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if series.len() > 1 {
        let step = (series.timestamps[1] - series.timestamps[0]).num_seconds();
        if step <= 0 || 3600 % step != 0 {
            return Err(Error::IrregularSampling(format!(
                "interval of {step}s does not divide one hour"
            )));
        }
        if let Some(i) = series
            .timestamps
            .windows(2)
            .position(|w| (w[1] - w[0]).num_seconds() != step)
        {
            return Err(Error::IrregularSampling(format!(
                "interval changes after row {}",
                i + 1
            )));
        }
    }
    let m = series.n_features();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..series.len() {
        let hour = floor_hour(series.timestamps[i]);
        if timestamps.last() != Some(&hour) {
            timestamps.push(hour);
            sums.extend(std::iter::repeat_n(0.0, m));
            counts.push(0);
        }
        let base = sums.len() - m;
        for (s, v) in sums[base..].iter_mut().zip(series.row(i)) {
            *s += v;
        }
        *counts.last_mut().unwrap() += 1;
    }
    let values = sums
        .chunks(m)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |s| s / c as f64))
        .collect();
    let mut out = RawSeries::new(timestamps, values, series.feature_names.clone())?;
    out.metadata = series.metadata.clone();
    Ok(out)
}

fn floor_hour(ts: NaiveDateTime) -> NaiveDateTime {
    ts.date().and_hms_opt(ts.hour(), 0, 0).expect("valid hour")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::config("split", "fractions must lie in (0, 1)"));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "fractions must sum to 1"));
        }
        Ok(())
    }

    /// Row counts `(train, val, test)`; train and val are floored and the
    /// remainder goes to test.
    pub fn lengths(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let train = floor(self.train_fraction).min(n);
        let val = floor(self.val_fraction).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

/// Chronological train/val/test split. `min_rows` is the `L+T` a split must
/// hold to yield at least one window.
pub fn split(series: &RawSeries, spec: &SplitSpec, min_rows: usize) -> Result<Splits> {
    spec.validate()?;
    let (a, b, c) = spec.lengths(series.len());
    for (name, rows) in [("val", b), ("test", c), ("train", a)] {
        if rows < min_rows.max(1) {
            return Err(Error::SplitTooSmall {
                split: name,
                rows,
                required: min_rows.max(1),
            });
        }
    }
    Ok(Splits {
        train: series.slice(0, a),
        val: series.slice(a, a + b),
        test: series.slice(a + b, a + b + c),
    })
}

/// Per-feature z-scoring with statistics from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Constant features get `μ = 0, σ = 1` and pass through untouched.
    pub fn fit(train: &RawSeries) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySeries);
        }
        let n = train.len() as f64;
        let m = train.n_features();
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for j in 0..m {
            let col = train.column(j);
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            if var > 0.0 && var.sqrt() > 1e-12 * mu.abs().max(1.0) {
                mean[j] = mu;
                std[j] = var.sqrt();
            } else {
                mean[j] = 0.0;
                std[j] = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &RawSeries) -> RawSeries {
        let mut out = series.clone();
        let m = self.mean.len();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let j = i % m;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn invert(&self, series: &RawSeries) -> RawSeries {
        let mut out = series.clone();
        self.invert_in_place(out.values_mut());
        out
    }

    /// Undoes `apply` on a flat row-major buffer whose last axis is the
    /// feature axis.
    pub fn invert_in_place(&self, values: &mut [f64]) {
        let m = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let j = i % m;
            *v = *v * self.std[j] + self.mean[j];
        }
    }
}

/// Lookback inputs `B×L×m` paired with the `B×T×m` rows that follow them.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub origin_indices: Vec<usize>,
}

/// All admissible windows over one split.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: RawSeries,
    pub lookback: usize,
    pub horizon: usize,
    pub starts: Vec<usize>,
}

pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config("windows", "lookback, horizon and stride must be ≥ 1"));
    }
    let need = lookback + horizon;
    if series.len() < need {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            required: need,
        });
    }
    let starts = (0..=series.len() - need).step_by(stride).collect();
    Ok(WindowSet {
        series: series.clone(),
        lookback,
        horizon,
        starts,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.series.n_features()
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    /// Input rows `[s, s+L)` as a flat row-major buffer.
    pub fn input_rows(&self, start: usize) -> &[f64] {
        let m = self.n_features();
        &self.series.values()[start * m..(start + self.lookback) * m]
    }

    pub fn target_rows(&self, start: usize) -> &[f64] {
        let m = self.n_features();
        let s = start + self.lookback;
        &self.series.values()[s * m..(s + self.horizon) * m]
    }

    /// Batch of the windows at positions `idx` (indices into `starts`).
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<WindowBatch> {
        let m = self.n_features();
        let b = idx.len();
        let mut xs = Vec::with_capacity(b * self.lookback * m);
        let mut ys = Vec::with_capacity(b * self.horizon * m);
        let mut origins = Vec::with_capacity(b);
        for &i in idx {
            let s = self.starts[i];
            xs.extend_from_slice(self.input_rows(s));
            ys.extend_from_slice(self.target_rows(s));
            origins.push(s);
        }
        let dev = Device::Cpu;
        Ok(WindowBatch {
            inputs: Tensor::from_vec(xs, (b, self.lookback, m), &dev)?.to_dtype(dtype)?,
            targets: Tensor::from_vec(ys, (b, self.horizon, m), &dev)?.to_dtype(dtype)?,
            origin_indices: origins,
        })
    }

    /// Consecutive batches covering every window once, in order.
    pub fn batches(&self, batch_size: usize, dtype: DType) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        let all: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = all.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c, dtype))
    }
}

/// Normalized splits ready for windowing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub boundaries: (usize, usize, usize),
    pub source_checksum: String,
}

/// Split + normalize with statistics from the training rows.
pub fn prepare(name: &str, series: &RawSeries, spec: &SplitSpec, min_rows: usize) -> Result<PreparedData> {
    let raw = split(series, spec, min_rows)?;
    let normalizer = Normalizer::fit(&raw.train)?;
    let splits = Splits {
        train: normalizer.apply(&raw.train),
        val: normalizer.apply(&raw.val),
        test: normalizer.apply(&raw.test),
    };
    let boundaries = (raw.train.len(), raw.val.len(), raw.test.len());
    Ok(PreparedData {
        name: name.to_string(),
        splits,
        normalizer,
        boundaries,
        source_checksum: series.metadata.get("source_sha256").cloned().unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedMetadata {
    pub dataset: String,
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    pub source_sha256: String,
    pub extra: BTreeMap<String, String>,
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `metadata.json` under `dir`.
pub fn persist_prepared(data: &PreparedData, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, s) in [
        ("train", &data.splits.train),
        ("val", &data.splits.val),
        ("test", &data.splits.test),
    ] {
        let p = dir.join(format!("{name}.csv"));
        write_series_csv(s, &p)?;
        written.push(p);
    }
    let meta = PreparedMetadata {
        dataset: data.name.clone(),
        features: data.splits.train.feature_names.clone(),
        mean: data.normalizer.mean.clone(),
        std: data.normalizer.std.clone(),
        train_rows: data.boundaries.0,
        val_rows: data.boundaries.1,
        test_rows: data.boundaries.2,
        source_sha256: data.source_checksum.clone(),
        extra: data.splits.train.metadata.clone(),
    };
    let p = dir.join("metadata.json");
    fs::write(&p, serde_json::to_string_pretty(&meta)?)?;
    written.push(p);
    Ok(written)
}

pub fn write_series_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "date")?;
    for n in &series.feature_names {
        write!(f, ",{n}")?;
    }
    writeln!(f)?;
    for i in 0..series.len() {
        write!(f, "{}", series.timestamps[i].format(TIMESTAMP_FORMAT))?;
        for v in series.row(i) {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Multivariate sum of sinusoids with noise, deterministic in `seed`.
///
/// Feature `j` carries a period-`period` sine with a feature-specific phase,
/// a slower half-frequency harmonic and Gaussian noise of std `noise`.
pub fn synthetic_periodic(n: usize, m: usize, period: usize, noise: f64, seed: u64) -> RawSeries {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w = 2.0 * std::f64::consts::PI / period as f64;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let row: Vec<f64> = (0..m)
            .map(|j| {
                let phase = j as f64 * 0.7;
                (w * t as f64 + phase).sin()
                    + 0.3 * (0.5 * w * t as f64 + 2.0 * phase).cos()
                    + noise * normal.sample(&mut rng)
            })
            .collect();
        rows.push(row);
    }
    let names = (0..m).map(|j| format!("x{j}")).collect();
    RawSeries::from_rows(&rows, names).expect("well-formed synthetic series")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const ETT_HEADER: &str = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n";

    #[test]
    fn ett_three_rows_pass_through_verbatim() {
        let body = "2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531\n\
                    2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787\n\
                    2016-07-01 02:00:00,5.157,1.741,1.279,0.355,3.777,1.218,27.787\n";
        let f = write_tmp(&format!("{ETT_HEADER}{body}"));
        let s = load_csv(f.path(), DatasetKind::Ett).unwrap();
        assert_eq!(s.n_features(), 7);
        assert_eq!(s.len(), 3);
        assert_eq!(s.row(0), &[5.827, 2.009, 1.599, 0.462, 4.203, 1.340, 30.531]);
        assert_eq!(s.row(2)[6], 27.787);
        assert_eq!(s.feature_names.last().unwrap(), "OT");
    }

    #[test]
    fn empty_file_is_empty_series() {
        let f = write_tmp(ETT_HEADER);
        assert!(matches!(load_csv(f.path(), DatasetKind::Ett), Err(Error::EmptySeries)));
    }

    #[test]
    fn bad_header_and_arity_are_malformed() {
        let f = write_tmp("date,a,b\n2016-07-01 00:00:00,1,2\n");
        assert!(matches!(
            load_csv(f.path(), DatasetKind::Ett),
            Err(Error::MalformedFile { .. })
        ));
        let f = write_tmp(&format!("{ETT_HEADER}2016-07-01 00:00:00,1,2,3\n"));
        assert!(matches!(
            load_csv(f.path(), DatasetKind::Ett),
            Err(Error::MalformedFile { .. })
        ));
        let f = write_tmp("date,a\n2016-07-01 00:00:00,\n");
        assert!(matches!(
            load_csv(f.path(), DatasetKind::Custom),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn forward_fill_policy_fills_gaps() {
        let f = write_tmp("date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,\n");
        let s = load_csv_with(f.path(), DatasetKind::Custom, MissingPolicy::ForwardFill).unwrap();
        assert_eq!(s.values(), &[1.0, 1.0]);
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let f = write_tmp("date,a\n2016-07-01 01:00:00,1\n2016-07-01 00:00:00,2\n");
        assert!(matches!(
            load_csv(f.path(), DatasetKind::Custom),
            Err(Error::NonMonotonicTimestamps { row: 2 })
        ));
    }

    #[test]
    fn ecl_requires_client_columns_and_records_count() {
        let f = write_tmp("date,c1,c2\n2016-07-01 00:00:00,1,2\n");
        assert!(load_csv(f.path(), DatasetKind::Ecl).is_err());
        let n = 321;
        let header: Vec<String> = (0..n).map(|i| format!("MT_{i:03}")).collect();
        let row: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let f = write_tmp(&format!(
            "date,{}\n2012-01-01 00:00:00,{}\n",
            header.join(","),
            row.join(",")
        ));
        let s = load_csv(f.path(), DatasetKind::Ecl).unwrap();
        assert_eq!(s.metadata["clients"], "321");
    }

    fn quarter_hour_series(values: &[f64]) -> RawSeries {
        let t0 = ts("2016-07-01 00:00:00");
        let stamps = (0..values.len())
            .map(|i| t0 + chrono::Duration::minutes(15 * i as i64))
            .collect();
        RawSeries::new(stamps, values.to_vec(), vec!["a".into()]).unwrap()
    }

    #[test]
    fn hourly_mean_of_four_quarters() {
        let s = quarter_hour_series(&[1.0, 2.0, 3.0, 4.0]);
        let h = hourly_aggregate(&s).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.values(), &[2.5]);
        assert_eq!(h.timestamps[0], ts("2016-07-01 00:00:00"));
    }

    #[test]
    fn hourly_two_buckets_match_brute_force() {
        let vals: Vec<f64> = (0..8).map(f64::from).collect();
        let h = hourly_aggregate(&quarter_hour_series(&vals)).unwrap();
        // brute force: bucket k holds rows 4k..4k+4
        let expect: Vec<f64> = (0..2)
            .map(|k| vals[4 * k..4 * k + 4].iter().sum::<f64>() / 4.0)
            .collect();
        assert_eq!(h.values(), expect.as_slice());
        assert_eq!(expect, vec![1.5, 5.5]);
    }

    #[test]
    fn hourly_identity_and_irregular() {
        let s = RawSeries::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], vec!["a".into()]).unwrap();
        assert_eq!(hourly_aggregate(&s).unwrap(), s);
        let t0 = ts("2016-07-01 00:00:00");
        let bad = RawSeries::new(
            vec![t0, t0 + chrono::Duration::minutes(7), t0 + chrono::Duration::minutes(14)],
            vec![1.0, 2.0, 3.0],
            vec!["a".into()],
        )
        .unwrap();
        assert!(matches!(hourly_aggregate(&bad), Err(Error::IrregularSampling(_))));
    }

    fn ramp(n: usize) -> RawSeries {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        RawSeries::from_rows(&rows, vec!["a".into()]).unwrap()
    }

    #[test]
    fn split_lengths() {
        let sp = SplitSpec::default();
        let s = split(&ramp(100), &sp, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        assert_eq!(sp.lengths(17420), (10452, 3484, 3484));
        assert!(matches!(
            split(&ramp(10), &sp, 9),
            Err(Error::SplitTooSmall { split: "val", .. })
        ));
    }

    #[test]
    fn split_is_chronological() {
        let s = split(&ramp(50), &SplitSpec::default(), 2).unwrap();
        assert!(s.train.timestamps.last() < s.val.timestamps.first());
        assert!(s.val.timestamps.last() < s.test.timestamps.first());
    }

    #[test]
    fn normalizer_examples() {
        let s = RawSeries::from_rows(&[vec![0.0, 5.0], vec![2.0, 5.0]], vec!["a".into(), "b".into()]).unwrap();
        let n = Normalizer::fit(&s).unwrap();
        assert_eq!(n.mean[0], 1.0);
        assert_eq!(n.std[0], 1.0);
        let z = n.apply(&s);
        assert_eq!(z.column(0), vec![-1.0, 1.0]);
        assert_eq!(z.column(1), vec![5.0, 5.0]);
    }

    #[test]
    fn normalizer_statistics_on_random_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|j| rng.random_range(-5.0..5.0) * (j + 1) as f64 + j as f64).collect())
            .collect();
        let s = RawSeries::from_rows(&rows, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let z = Normalizer::fit(&s).unwrap().apply(&s);
        for j in 0..3 {
            let c = z.column(j);
            let mu = c.iter().sum::<f64>() / 50.0;
            let sd = (c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(mu.abs() < 1e-8);
            assert!((sd - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(10), 4, 2, 1).unwrap().len(), 5);
        let w = make_windows(&ramp(6), 4, 2, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert!(matches!(
            make_windows(&ramp(5), 4, 2, 1),
            Err(Error::SeriesTooShort { len: 5, required: 6 })
        ));
        assert_eq!(make_windows(&ramp(10), 4, 2, 2).unwrap().starts, vec![0, 2, 4]);
    }

    #[test]
    fn window_targets_follow_inputs() {
        let w = make_windows(&ramp(12), 4, 3, 1).unwrap();
        let b = w.batch(&[0, 5], DType::F64).unwrap();
        assert_eq!(b.inputs.dims(), &[2, 4, 1]);
        assert_eq!(b.targets.dims(), &[2, 3, 1]);
        let x = b.inputs.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y = b.targets.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x, vec![0.0, 1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(y, vec![4.0, 5.0, 6.0, 9.0, 10.0, 11.0]);
        assert_eq!(b.origin_indices, vec![0, 5]);
    }

    #[test]
    fn persist_writes_splits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = prepare("ramp", &ramp(40), &SplitSpec::default(), 4).unwrap();
        let files = persist_prepared(&p, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let meta: PreparedMetadata =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap()).unwrap();
        assert_eq!((meta.train_rows, meta.val_rows, meta.test_rows), (24, 8, 8));
        let back = load_csv(&dir.path().join("val.csv"), DatasetKind::Custom).unwrap();
        assert_eq!(back.values(), p.splits.val.values());
    }
}
