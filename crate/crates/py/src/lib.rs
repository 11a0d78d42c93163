//! Python bindings: encoders, losses, the memory queue, metrics, ERF maps
//! and the experiment runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tscl::backbone::{Encoder, EncoderKind, EncoderSpec};
use tscl::config::ExperimentConfig;
use tscl::nn::to_vec_f64;
use tscl::runner::RunOptions;
use tscl::strategy::ForecastModel;

fn py_err(e: tscl::Error) -> PyErr {
    match e {
        tscl::Error::Io(_) | tscl::Error::MissingData(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(values: Vec<f64>, shape: &[usize], dtype: DType) -> PyResult<Tensor> {
    let t = Tensor::from_vec(values, shape, &Device::Cpu).map_err(|e| py_err(e.into()))?;
    t.to_dtype(dtype).map_err(|e| py_err(e.into()))
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok((rows.concat(), m))
}

fn unflatten(v: Vec<f64>, m: usize) -> Vec<Vec<f64>> {
    v.chunks(m).map(|c| c.to_vec()).collect()
}

/// A backbone mapping an `L×m` window to `L×d` representations.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: Encoder,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (kind, input_dim, hidden_dim=None, num_layers=None, seed=0))]
    fn new(kind: &str, input_dim: usize, hidden_dim: Option<usize>, num_layers: Option<usize>, seed: u64) -> PyResult<Self> {
        let kind: EncoderKind = kind.parse().map_err(py_err)?;
        let d = EncoderSpec::default_for(kind, input_dim);
        let spec = EncoderSpec {
            hidden_dim: hidden_dim.unwrap_or(d.hidden_dim),
            num_layers: num_layers.unwrap_or(d.num_layers),
            tcn_channels: hidden_dim.map(|h| h.min(d.tcn_channels)).unwrap_or(d.tcn_channels),
            num_heads: if hidden_dim.is_some_and(|h| h % d.num_heads != 0) { 1 } else { d.num_heads },
            ..d
        };
        Ok(Self { inner: Encoder::build(&spec, seed, DType::F32).map_err(py_err)? })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn receptive_field(&self) -> Option<usize> {
        self.inner.receptive_field()
    }

    fn checksum(&self) -> PyResult<String> {
        self.inner.params.checksum().map_err(py_err)
    }

    /// Representations of one window given as `L` rows of `m` values.
    fn encode(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (flat, m) = flatten(&window)?;
        let x = tensor(flat, &[1, window.len(), m], DType::F32)?;
        let r = self.inner.encode(&x).map_err(py_err)?;
        Ok(unflatten(to_vec_f64(&r).map_err(py_err)?, self.inner.output_dim()))
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!("Encoder({:?}, m={}, d={}, layers={}, params={})", s.kind, s.input_dim, s.hidden_dim, s.num_layers, self.inner.param_count())
    }
}

/// Fixed-capacity FIFO of unit-norm keys.
#[pyclass(name = "MemoryQueue")]
struct PyMemoryQueue {
    inner: tscl::loss::MemoryQueue,
}

#[pymethods]
impl PyMemoryQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> Self {
        Self { inner: tscl::loss::MemoryQueue::new(capacity, dim) }
    }

    fn enqueue(&mut self, key: Vec<f64>) -> PyResult<()> {
        self.inner.enqueue(&key).map_err(py_err)
    }

    /// Keys, oldest first.
    fn keys(&self) -> Vec<Vec<f64>> {
        self.inner.ordered()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained forecaster loaded from a checkpoint directory.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ForecastModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: tscl::checkpoint::load_model(&path, DType::F32).map_err(py_err)? })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    /// `T×m` forecast for an `L×m` window.
    fn forecast(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (flat, m) = flatten(&window)?;
        let x = tensor(flat, &[1, window.len(), m], self.inner.encoder.dtype())?;
        let y = self.inner.forward(&x).map_err(py_err)?;
        Ok(unflatten(to_vec_f64(&y).map_err(py_err)?, m))
    }

    /// Input-gradient map `L×m` of the squared error at forecast step `j`.
    fn erf(&self, window: Vec<Vec<f64>>, gold: Vec<Vec<f64>>, j: usize) -> PyResult<Vec<Vec<f64>>> {
        let (w, m) = flatten(&window)?;
        let (g, _) = flatten(&gold)?;
        let map = tscl::erf::erf_gradient(&self.inner, &w, &g, j).map_err(py_err)?;
        Ok(unflatten(map.grads, m))
    }
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, tau=0.1))]
fn info_nce(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    tscl::loss::info_nce(&anchor, &positive, &negatives, tau).map_err(py_err)
}

#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    tscl::loss::cosine_sim(&a, &b).map_err(py_err)
}

/// Hierarchical contrastive loss of two `B×L×d` views given as nested lists.
#[pyfunction]
#[pyo3(signature = (view_a, view_b, tau=1.0))]
fn hcl_loss(view_a: Vec<Vec<Vec<f64>>>, view_b: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<f64> {
    let shape = |v: &Vec<Vec<Vec<f64>>>| -> PyResult<(Vec<f64>, [usize; 3])> {
        let b = v.len();
        let l = v.first().map(|x| x.len()).unwrap_or(0);
        let mut flat = Vec::new();
        let mut d = 0;
        for inst in v {
            if inst.len() != l {
                return Err(PyValueError::new_err("ragged view"));
            }
            let (f, m) = flatten(inst)?;
            if d != 0 && m != d {
                return Err(PyValueError::new_err("ragged view"));
            }
            d = m;
            flat.extend(f);
        }
        Ok((flat, [b, l, d]))
    };
    let (a, sa) = shape(&view_a)?;
    let (b, sb) = shape(&view_b)?;
    let ta = tensor(a, &sa, DType::F64)?;
    let tb = tensor(b, &sb, DType::F64)?;
    let loss = tscl::loss::hcl_loss(&ta, &tb, tau).map_err(py_err)?;
    tscl::nn::scalar_f64(&loss).map_err(py_err)
}

/// `(mse, mae)` over flattened predictions and targets.
#[pyfunction]
fn mse_mae(pred: Vec<f64>, gold: Vec<f64>) -> PyResult<(f64, f64)> {
    let m = tscl::eval::mse_mae(&pred, &gold).map_err(py_err)?;
    Ok((m.mse, m.mae))
}

#[pyfunction]
fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    tscl::strategy::cosine_lr(peak, step, total)
}

/// `n×m` rows of a noisy periodic series.
#[pyfunction]
#[pyo3(signature = (rows, features, period, noise=0.1, seed=0))]
fn synthetic_series(rows: usize, features: usize, period: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    let s = tscl::data::synthetic_periodic(rows, features, period, noise, seed);
    unflatten(s.values().to_vec(), features)
}

/// Runs an experiment config; returns `{(method, dataset, horizon): (mse, mae)}`
/// averaged over seeds.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn run_experiment(config: PathBuf, seed: Option<u64>) -> PyResult<BTreeMap<(String, String, usize), (f64, f64)>> {
    let cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    let opts = RunOptions { seed, ..RunOptions::default() };
    let out = tscl::runner::run(&cfg, Some(&config), &opts).map_err(py_err)?;
    Ok(out
        .table
        .cells
        .iter()
        .map(|(((d, h), m), v)| ((m.clone(), d.clone(), *h), (v.mse, v.mae)))
        .collect())
}

#[pymodule]
fn tscl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyMemoryQueue>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(hcl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse_mae, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_series, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
