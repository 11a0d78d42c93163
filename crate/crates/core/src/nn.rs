//! Named parameter storage and the handful of layers the encoders and heads
//! are built from.
//!
//! Parameters live in a [`ParamStore`], an ordered map from dotted names to
//! candle [`Var`]s. Layers are plain functions that look their weights up by
//! prefix, so every model is just a store plus a forward function.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a tensor drawn from `Uniform(-bound, bound)`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert_data(name, shape, data)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert_data(name, shape, vec![value; n])
    }

    pub fn insert_data(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> Result<()> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.params.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?.copy()?;
        self.params.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Copy with freshly allocated storage; updates to one side never leak
    /// into the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (k, v) in &self.params {
            out.insert_tensor(k.clone(), v.as_tensor())?;
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (k, v) in &self.params {
            out.insert_tensor(k.clone(), v.as_tensor())?;
        }
        Ok(out)
    }

    /// `self ← m·self + (1−m)·other`, parameter by parameter.
    pub fn momentum_update(&self, other: &ParamStore, m: f64) -> Result<()> {
        for (k, v) in &self.params {
            let src = other.get(k)?;
            if m == 1.0 {
                continue;
            }
            let next = if m == 0.0 {
                src.copy()?
            } else {
                ((v.as_tensor() * m)? + (src * (1.0 - m))?)?
            };
            v.set(&next)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values. Bitwise equality of two
    /// stores implies equal checksums.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .get(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Sub-store of all parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            dtype: self.dtype,
        }
    }

    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }
}

/// Registers a fan-in scaled linear map under `{prefix}.weight` (stored
/// `in×out`) and `{prefix}.bias`.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.uniform(format!("{prefix}.weight"), &[fan_in, fan_out], bound, rng)?;
    if bias {
        store.uniform(format!("{prefix}.bias"), &[fan_out], bound, rng)?;
    }
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.constant(format!("{prefix}.gamma"), &[dim], 1.0)?;
    store.constant(format!("{prefix}.beta"), &[dim], 0.0)
}

/// `x·W` for `x` of shape `…×in` and a 2-D `W` of shape `in×out`, run as
/// one 2-D product over the flattened leading axes.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let k = dims[dims.len() - 1];
    let rows = x.elem_count() / k.max(1);
    let mut out = dims.to_vec();
    *out.last_mut().expect("rank ≥ 1") = w.dim(1)?;
    Ok(x.contiguous()?.reshape((rows, k))?.matmul(w)?.reshape(out)?)
}

/// Applies `x·W + b` over the last axis of `x`.
pub fn linear(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let y = matmul_last(x, w)?;
    match store.var(&format!("{prefix}.bias")) {
        Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
        None => Ok(y),
    }
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Logistic function through `exp`; inputs are clamped to `[-40, 40]`,
/// where it is saturated in both precisions.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x.clamp(-40.0, 40.0)?.neg()?.exp()? + 1.0)?.recip())?)
}

/// `tanh(x) = 2·σ(2x) − 1`.
pub fn tanh(x: &Tensor) -> Result<Tensor> {
    Ok(((sigmoid(&(x * 2.0)?)? * 2.0)? - 1.0)?)
}

/// Softmax over the last axis with the row max subtracted first.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `log Σ exp(x)` over the last axis, max-shifted.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + max)?.squeeze(D::Minus1)?)
}

/// Scales rows of `x` to unit L2 norm over the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
