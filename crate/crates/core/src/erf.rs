//! Empirical receptive fields: input gradients of a single-step squared
//! error, their summary statistics and heatmap rendering.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::nn::to_vec_f64;
use crate::strategy::ForecastModel;
use crate::{Error, Result};

/// Input gradients for one window and one target step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    /// Row-major `L×m`.
    pub grads: Vec<f64>,
    pub lookback: usize,
    pub n_features: usize,
    pub target_step: usize,
    /// Per-timestamp L2 norm across features.
    pub magnitude: Vec<f64>,
}

impl ErfMap {
    pub fn new(grads: Vec<f64>, lookback: usize, n_features: usize, target_step: usize) -> Result<Self> {
        if grads.len() != lookback * n_features {
            return Err(Error::ShapeMismatch(format!("{} gradients for {lookback}×{n_features}", grads.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidSpec("non-finite input gradient".into()));
        }
        let magnitude = grads.chunks(n_features).map(|r| r.iter().map(|g| g * g).sum::<f64>().sqrt()).collect();
        Ok(Self { grads, lookback, n_features, target_step, magnitude })
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().fold(0.0, |a, g| a.max(g.abs()))
    }
}

/// Gradient of `Σ_c (y[j,c] − f(x)[j,c])²` with respect to every entry of
/// `window` for an arbitrary differentiable forecaster `f: 1×L×m → 1×T×m`.
pub fn erf_gradient_with<F>(
    f: F,
    window: &[f64],
    gold: &[f64],
    lookback: usize,
    n_features: usize,
    horizon: usize,
    j: usize,
    dtype: candle_core::DType,
) -> Result<ErfMap>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if j >= horizon {
        return Err(Error::InvalidSpec(format!("target step {j} outside horizon {horizon}")));
    }
    if window.len() != lookback * n_features || gold.len() != horizon * n_features {
        return Err(Error::ShapeMismatch(format!(
            "window {} / gold {} values for L={lookback}, T={horizon}, m={n_features}",
            window.len(),
            gold.len()
        )));
    }
    let x = Var::from_tensor(
        &Tensor::from_vec(window.to_vec(), (1, lookback, n_features), &Device::Cpu)?.to_dtype(dtype)?,
    )?;
    let pred = f(x.as_tensor())?;
    if pred.dims() != [1, horizon, n_features] {
        return Err(Error::ShapeMismatch(format!("forecast shape {:?}", pred.dims())));
    }
    let y = Tensor::from_vec(gold[j * n_features..(j + 1) * n_features].to_vec(), (1, n_features), &Device::Cpu)?
        .to_dtype(dtype)?;
    let loss = (pred.narrow(1, j, 1)?.squeeze(1)? - y)?.sqr()?.sum_all()?;
    let grads = loss.backward()?;
    let g = match grads.get(x.as_tensor()) {
        Some(g) => to_vec_f64(g)?,
        None => vec![0.0; lookback * n_features],
    };
    ErfMap::new(g, lookback, n_features, j)
}

pub fn erf_gradient(model: &ForecastModel, window: &[f64], gold: &[f64], j: usize) -> Result<ErfMap> {
    let m = model.n_features;
    if window.len() % m != 0 {
        return Err(Error::ShapeMismatch(format!("window of {} values is not L×{m}", window.len())));
    }
    erf_gradient_with(
        |x| model.forward(x),
        window,
        gold,
        window.len() / m,
        m,
        model.horizon,
        j,
        model.encoder.dtype(),
    )
}

/// Scales to unit sum; an all-zero vector stays zero.
pub fn normalize_mass(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Shannon entropy (nats) of a normalized attribution vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Mean autocorrelation across features at each lag `0..L`.
pub fn autocorrelation(window: &[f64], lookback: usize, n_features: usize) -> Vec<f64> {
    let mut acf = vec![0.0; lookback];
    let mut used = 0usize;
    for c in 0..n_features {
        let x: Vec<f64> = (0..lookback).map(|t| window[t * n_features + c]).collect();
        let mu = x.iter().sum::<f64>() / lookback as f64;
        let var: f64 = x.iter().map(|v| (v - mu).powi(2)).sum();
        if var == 0.0 {
            continue;
        }
        used += 1;
        for (lag, a) in acf.iter_mut().enumerate() {
            *a += (0..lookback - lag).map(|t| (x[t] - mu) * (x[t + lag] - mu)).sum::<f64>() / var;
        }
    }
    if used > 0 {
        for a in &mut acf {
            *a /= used as f64;
        }
    }
    acf
}

/// Lag in `[2, L/2]` with the highest autocorrelation.
pub fn dominant_period(window: &[f64], lookback: usize, n_features: usize) -> Option<usize> {
    let acf = autocorrelation(window, lookback, n_features);
    (2..=lookback / 2).max_by(|&a, &b| acf[a].total_cmp(&acf[b]).then(b.cmp(&a)))
}

/// Distance of input step `s` from the predicted step `L + j`.
pub fn lag_of(lookback: usize, j: usize, s: usize) -> usize {
    lookback + j - s
}

/// Normalized mass at input steps whose lag is a positive multiple of `period`.
pub fn period_lag_mass(p: &[f64], j: usize, period: usize) -> f64 {
    let l = p.len();
    (0..l).filter(|&s| lag_of(l, j, s) % period == 0).map(|s| p[s]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErfStats {
    pub entropy: f64,
    pub period: Option<usize>,
    pub period_mass: f64,
}

pub fn erf_stats(map: &ErfMap, period: Option<usize>) -> ErfStats {
    let p = normalize_mass(&map.magnitude);
    ErfStats {
        entropy: entropy(&p),
        period,
        period_mass: period.map(|t| period_lag_mass(&p, map.target_step, t)).unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfComparison {
    pub a: ErfMap,
    pub b: ErfMap,
    pub a_stats: ErfStats,
    pub b_stats: ErfStats,
}

/// Maps of two models on the same window, summarized against the window's
/// dominant period.
pub fn erf_compare(
    model_a: &ForecastModel,
    model_b: &ForecastModel,
    window: &[f64],
    gold: &[f64],
    j: usize,
) -> Result<ErfComparison> {
    let a = erf_gradient(model_a, window, gold, j)?;
    let b = erf_gradient(model_b, window, gold, j)?;
    let period = dominant_period(window, a.lookback, a.n_features);
    Ok(ErfComparison { a_stats: erf_stats(&a, period), b_stats: erf_stats(&b, period), a, b })
}

/// Color for density `d ∈ [0, 1]`: white at 0 to dark navy at 1.
pub fn density_color(d: f64) -> [u8; 3] {
    let d = if d.is_finite() { d.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * d).round() as u8;
    [lerp(255.0, 8.0), lerp(255.0, 29.0), lerp(255.0, 88.0)]
}

const CELL_W: u32 = 8;
const CELL_H: u32 = 16;

/// Writes `erf_<name>.csv` (the raw gradients) and `erf_<name>.png`, one
/// column per input step and one row per feature. `scale` fixes the
/// gradient magnitude mapped to full density; otherwise the panel maximum
/// is used.
pub fn emit_heatmap(map: &ErfMap, out_dir: &Path, name: &str, scale: Option<f64>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("erf_{name}.csv"));
    let mut f = fs::File::create(&csv_path)?;
    let header: Vec<String> = (0..map.n_features).map(|c| format!("f{c}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in map.grads.chunks(map.n_features) {
        let cells: Vec<String> = row.iter().map(|g| g.to_string()).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    let png_path = out_dir.join(format!("erf_{name}.png"));
    let top = scale.unwrap_or_else(|| map.max_abs());
    let mut img = RgbImage::new(map.lookback as u32 * CELL_W, map.n_features as u32 * CELL_H);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let s = (px / CELL_W) as usize;
        let c = (py / CELL_H) as usize;
        let g = map.grads[s * map.n_features + c].abs();
        let d = if top > 0.0 { g / top } else { 0.0 };
        *pixel = Rgb(density_color(d));
    }
    img.save(&png_path)?;
    Ok(vec![csv_path, png_path])
}

/// Parses a gradient CSV written by [`emit_heatmap`].
pub fn read_gradient_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let bad = |r: String| Error::MalformedFile { path: path.to_path_buf(), reason: r };
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string()))).collect())
        .collect()
}

/// `manifest.txt` listing the emitted files relative to `out_dir`.
pub fn write_manifest(out_dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let p = out_dir.join("manifest.txt");
    let mut f = fs::File::create(&p)?;
    for file in files {
        let rel = file.strip_prefix(out_dir).unwrap_or(file);
        writeln!(f, "{}", rel.display())?;
    }
    Ok(p)
}
