//! Forecast heads on top of encoder representations.

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Encoder;
use crate::nn::{init_linear, linear, to_vec_f64, ParamStore};
use crate::{Error, Result};

/// Which representation rows feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Concatenation of the last `min(T, L)` rows, zero-padded to `T` rows.
    LastT,
    LastRow,
}

impl Readout {
    pub fn feature_dim(self, d: usize, horizon: usize) -> usize {
        match self {
            Readout::LastT => horizon * d,
            Readout::LastRow => d,
        }
    }

    /// `B×L×d → B×F`.
    pub fn apply(self, r: &Tensor, horizon: usize) -> Result<Tensor> {
        let (b, l, d) = r.dims3()?;
        match self {
            Readout::LastRow => Ok(r.narrow(1, l - 1, 1)?.reshape((b, d))?),
            Readout::LastT => {
                let k = horizon.min(l);
                let tail = r.narrow(1, l - k, k)?;
                let tail = if k < horizon {
                    let pad = Tensor::zeros((b, horizon - k, d), r.dtype(), &Device::Cpu)?;
                    Tensor::cat(&[&pad, &tail], 1)?
                } else {
                    tail
                };
                Ok(tail.reshape((b, horizon * d))?)
            }
        }
    }
}

/// One hidden ReLU layer (`hidden > 0`) or a single linear map.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub params: ParamStore,
    pub hidden: usize,
}

impl MlpHead {
    pub fn build(in_dim: usize, hidden: usize, out_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        if hidden == 0 {
            init_linear(&mut params, "head.out", in_dim, out_dim, true, &mut rng)?;
        } else {
            init_linear(&mut params, "head.hidden", in_dim, hidden, true, &mut rng)?;
            init_linear(&mut params, "head.out", hidden, out_dim, true, &mut rng)?;
        }
        Ok(Self { params, hidden })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if self.hidden == 0 {
            linear(&self.params, "head.out", z)
        } else {
            linear(&self.params, "head.out", &linear(&self.params, "head.hidden", z)?.relu()?)
        }
    }
}

/// Closed-form linear map `Z·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeHead {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
    pub alpha: f64,
}

impl RidgeHead {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weights: DMatrix::zeros(in_dim, out_dim), bias: vec![0.0; out_dim], alpha: 0.0 }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (fi, fo) = self.weights.shape();
        let mut w = Vec::with_capacity(fi * fo);
        for i in 0..fi {
            for j in 0..fo {
                w.push(self.weights[(i, j)]);
            }
        }
        let w = Tensor::from_vec(w, (fi, fo), &Device::Cpu)?.to_dtype(z.dtype())?;
        let b = Tensor::from_vec(self.bias.clone(), (1, fo), &Device::Cpu)?.to_dtype(z.dtype())?;
        Ok(z.matmul(&w)?.broadcast_add(&b)?)
    }
}

/// Ridge solution `W = (ZᵀZ + αI)⁻¹ZᵀY`. With `fit_intercept` the columns
/// are centered first and the bias recovered from the means. Uses the dual
/// form `Zᵀ(ZZᵀ + αI)⁻¹Y` when there are fewer rows than features.
pub fn ridge_closed_form(
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    alpha: f64,
    fit_intercept: bool,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, f) = z.shape();
    if y.nrows() != n {
        return Err(Error::ShapeMismatch(format!("Z has {n} rows, Y has {}", y.nrows())));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidSpec(format!("ridge penalty {alpha} < 0")));
    }
    let (zc, yc, zm, ym) = if fit_intercept {
        let zm = z.row_mean();
        let ym = y.row_mean();
        let mut zc = z.clone();
        let mut yc = y.clone();
        for mut r in zc.row_iter_mut() {
            r -= &zm;
        }
        for mut r in yc.row_iter_mut() {
            r -= &ym;
        }
        (zc, yc, Some(zm), Some(ym))
    } else {
        (z.clone(), y.clone(), None, None)
    };
    let solve = |a: DMatrix<f64>, b: DMatrix<f64>| -> Result<DMatrix<f64>> {
        if let Some(ch) = a.clone().cholesky() {
            return Ok(ch.solve(&b));
        }
        a.lu().solve(&b).ok_or(Error::SingularSystem)
    };
    let w = if n < f {
        let mut g = &zc * zc.transpose();
        for i in 0..n {
            g[(i, i)] += alpha;
        }
        zc.transpose() * solve(g, yc)?
    } else {
        let mut g = zc.transpose() * &zc;
        for i in 0..f {
            g[(i, i)] += alpha;
        }
        solve(g, zc.transpose() * yc)?
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let bias = match (zm, ym) {
        (Some(zm), Some(ym)) => (ym - zm * &w).iter().cloned().collect(),
        _ => vec![0.0; y.ncols()],
    };
    Ok((w, bias))
}

#[derive(Debug, Clone)]
pub enum Head {
    Mlp(MlpHead),
    Ridge(RidgeHead),
}

impl Head {
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Head::Mlp(h) => h.forward(z),
            Head::Ridge(h) => h.forward(z),
        }
    }

    pub fn trainable(&self) -> Vec<candle_core::Var> {
        match self {
            Head::Mlp(h) => h.params.vars(),
            Head::Ridge(_) => Vec::new(),
        }
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(match self {
            Head::Mlp(h) => Head::Mlp(MlpHead { params: h.params.deep_clone()?, hidden: h.hidden }),
            Head::Ridge(h) => Head::Ridge(h.clone()),
        })
    }
}

/// Encoder, readout and head: maps `B×L×m` inputs to `B×T×m` forecasts.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub encoder: Encoder,
    pub head: Head,
    pub readout: Readout,
    pub horizon: usize,
    pub n_features: usize,
}

impl ForecastModel {
    /// Encoder plus a fresh MLP head of hidden width `d`.
    pub fn with_mlp_head(encoder: Encoder, readout: Readout, horizon: usize, head_seed: u64) -> Result<Self> {
        let d = encoder.output_dim();
        let m = encoder.spec.input_dim;
        let head = MlpHead::build(readout.feature_dim(d, horizon), d, horizon * m, head_seed, encoder.dtype())?;
        Ok(Self { encoder, head: Head::Mlp(head), readout, horizon, n_features: m })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.readout.apply(&self.encoder.encode(x)?, self.horizon)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.features(x)?;
        self.forward_features(&z)
    }

    pub fn forward_features(&self, z: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        Ok(self.head.forward(z)?.reshape((b, self.horizon, self.n_features))?)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            encoder: Encoder { spec: self.encoder.spec.clone(), params: self.encoder.params.deep_clone()? },
            head: self.head.deep_clone()?,
            readout: self.readout,
            horizon: self.horizon,
            n_features: self.n_features,
        })
    }
}

/// Row-major `B×F` tensor to an nalgebra matrix.
pub fn tensor_to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, &to_vec_f64(t)?))
}
