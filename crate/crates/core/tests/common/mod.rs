//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tscl::nn::{scalar_f64, to_vec_f64};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(rand_vec(n, seed), shape, &Device::Cpu).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares the autodiff gradient of `f` w.r.t. `var` with central
/// differences on up to `max_coords` coordinates.
pub fn check_var(var: &Var, f: &dyn Fn() -> Tensor, max_coords: usize, what: &str) {
    let loss = f();
    let grads = loss.backward().unwrap();
    let analytic = grads.get(var.as_tensor()).map(|g| to_vec_f64(g).unwrap()).unwrap_or_else(|| vec![0.0; var.elem_count()]);
    let base = to_vec_f64(var.as_tensor()).unwrap();
    let dims = var.dims().to_vec();
    let n = base.len();
    let stride = (n / max_coords).max(1);
    let coords: Vec<usize> = (0..n).step_by(stride).take(max_coords).collect();
    let mut numeric = Vec::new();
    let mut picked = Vec::new();
    for &i in &coords {
        let mut v = base.clone();
        v[i] = base[i] + H;
        var.set(&Tensor::from_vec(v.clone(), dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let up = scalar_f64(&f()).unwrap();
        v[i] = base[i] - H;
        var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let down = scalar_f64(&f()).unwrap();
        numeric.push((up - down) / (2.0 * H));
        picked.push(analytic[i]);
    }
    var.set(&Tensor::from_vec(base, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
    let scale = picked.iter().chain(&numeric).fold(0.0f64, |a, v| a.max(v.abs()));
    if scale < 1e-7 {
        // a vanishing gradient, e.g. key biases under softmax
        return;
    }
    let err = rel_err(&picked, &numeric);
    assert!(err < TOL, "{what}: relative error {err:e}\nanalytic {picked:?}\nnumeric  {numeric:?}");
}

pub fn var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&rand_tensor(shape, seed)).unwrap()
}

