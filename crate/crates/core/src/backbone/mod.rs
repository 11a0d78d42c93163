//! Encoder backbones mapping `B×L×m` windows to `B×L×d` representations.
//!
//! Three architectures share one [`Encoder`] type: a stacked LSTM, a
//! dilated causal TCN and an Informer-style Transformer encoder with
//! ProbSparse self-attention. Each starts with a linear embedding of the
//! input features.

mod attention;
mod lstm;
mod tcn;
mod transformer;

pub use attention::{full_attention, probsparse_attention, probsparse_top_u, sparsity_scores};
pub use tcn::receptive_field;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Tcn,
    Transformer,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(EncoderKind::Lstm),
            "tcn" => Ok(EncoderKind::Tcn),
            "transformer" | "informer" => Ok(EncoderKind::Transformer),
            other => Err(Error::InvalidSpec(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Full,
    ProbSparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    /// Representation width `d` of the encoder output.
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// TCN only.
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Channel width of the TCN's inner dilated blocks; the last block maps
    /// it to `hidden_dim`.
    #[serde(default = "default_tcn_channels")]
    pub tcn_channels: usize,
    /// Transformer only.
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Transformer feed-forward width; `0` means `2·hidden_dim`.
    #[serde(default)]
    pub ff_dim: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    /// ProbSparse sampling factor `c` in `u = ceil(c·ln L)`.
    #[serde(default = "default_factor")]
    pub probsparse_factor: f64,
}

fn default_kernel() -> usize {
    3
}
fn default_tcn_channels() -> usize {
    64
}
fn default_heads() -> usize {
    8
}
fn default_attention() -> AttentionKind {
    AttentionKind::ProbSparse
}
fn default_factor() -> f64 {
    5.0
}

impl EncoderSpec {
    /// Default architecture for `kind` on `input_dim` features.
    pub fn default_for(kind: EncoderKind, input_dim: usize) -> Self {
        let base = Self {
            kind,
            input_dim,
            hidden_dim: 320,
            num_layers: 10,
            kernel_size: default_kernel(),
            tcn_channels: default_tcn_channels(),
            num_heads: default_heads(),
            ff_dim: 0,
            attention: default_attention(),
            probsparse_factor: default_factor(),
        };
        match kind {
            EncoderKind::Lstm => Self {
                hidden_dim: 128,
                num_layers: 5,
                ..base
            },
            EncoderKind::Tcn => base,
            EncoderKind::Transformer => Self {
                hidden_dim: 128,
                num_layers: 5,
                ..base
            },
        }
    }

    pub fn ff_width(&self) -> usize {
        if self.ff_dim == 0 {
            2 * self.hidden_dim
        } else {
            self.ff_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("input_dim, hidden_dim and num_layers must be ≥ 1");
        }
        match self.kind {
            EncoderKind::Tcn if self.kernel_size == 0 || self.tcn_channels == 0 => {
                bad("TCN needs kernel_size ≥ 1 and tcn_channels ≥ 1")
            }
            EncoderKind::Transformer if self.num_heads == 0 => bad("num_heads must be ≥ 1"),
            EncoderKind::Transformer if self.hidden_dim % self.num_heads != 0 => Err(Error::InvalidSpec(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ))),
            EncoderKind::Transformer if !(self.probsparse_factor > 0.0) => bad("probsparse_factor must be > 0"),
            _ => Ok(()),
        }
    }
}

/// A configured backbone with its parameters.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: ParamStore,
}

impl Encoder {
    /// Deterministic in `(spec, seed, dtype)`.
    pub fn build(spec: &EncoderSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        match spec.kind {
            EncoderKind::Lstm => lstm::init(spec, &mut params, &mut rng)?,
            EncoderKind::Tcn => tcn::init(spec, &mut params, &mut rng)?,
            EncoderKind::Transformer => transformer::init(spec, &mut params, &mut rng)?,
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn from_params(spec: EncoderSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let reference = Encoder::build(&spec, 0, params.dtype())?;
        for (name, var) in reference.params.iter() {
            let got = params
                .var(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("parameter `{name}` missing")))?;
            if got.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.dims(),
                    var.dims()
                )));
            }
        }
        if reference.params.len() != params.len() {
            return Err(Error::CheckpointMismatch("unexpected extra parameters".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn output_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// `B×L×m → B×L×d`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_masked(x, None)
    }

    /// Like [`encode`](Self::encode), with an optional `B×L` 0/1 mask that
    /// zeroes whole timestamps right after the input embedding.
    pub fn encode_masked(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 3 || dims[2] != self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects B×L×{}, got {:?}",
                self.spec.input_dim, dims
            )));
        }
        if dims[1] == 0 {
            return Err(Error::ShapeMismatch("window length must be ≥ 1".into()));
        }
        if let Some(m) = mask {
            if m.dims() != &dims[..2] {
                return Err(Error::ShapeMismatch(format!(
                    "mask shape {:?} does not match B×L {:?}",
                    m.dims(),
                    &dims[..2]
                )));
            }
        }
        let x = x.to_dtype(self.dtype())?;
        let mask = match mask {
            Some(m) => Some(m.to_dtype(self.dtype())?.unsqueeze(2)?),
            None => None,
        };
        match self.spec.kind {
            EncoderKind::Lstm => lstm::forward(&self.spec, &self.params, &x, mask.as_ref()),
            EncoderKind::Tcn => tcn::forward(&self.spec, &self.params, &x, mask.as_ref()),
            EncoderKind::Transformer => transformer::forward(&self.spec, &self.params, &x, mask.as_ref()),
        }
    }

    /// Theoretical receptive field of a TCN encoder, `None` for the others.
    pub fn receptive_field(&self) -> Option<usize> {
        (self.spec.kind == EncoderKind::Tcn).then(|| receptive_field(&self.spec))
    }
}

pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<Encoder> {
    Encoder::build(spec, seed, DType::F32)
}

pub fn param_count(encoder: &Encoder) -> usize {
    encoder.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny(kind: EncoderKind) -> EncoderSpec {
        EncoderSpec {
            hidden_dim: 8,
            num_layers: 2,
            tcn_channels: 8,
            num_heads: 2,
            ..EncoderSpec::default_for(kind, 3)
        }
    }

    #[test]
    fn default_budgets_within_two_percent() {
        for (kind, target) in [
            (EncoderKind::Lstm, 660_000.0),
            (EncoderKind::Tcn, 637_000.0),
            (EncoderKind::Transformer, 655_000.0),
        ] {
            let e = Encoder::build(&EncoderSpec::default_for(kind, 7), 0, DType::F32).unwrap();
            let n = e.param_count() as f64;
            assert!((n / target - 1.0).abs() <= 0.02, "{kind:?}: {n}");
        }
    }

    #[test]
    fn exact_default_counts() {
        let count = |k| Encoder::build(&EncoderSpec::default_for(k, 7), 0, DType::F32).unwrap().param_count();
        assert_eq!(count(EncoderKind::Lstm), 661_504);
        assert_eq!(count(EncoderKind::Tcn), 637_632);
        assert_eq!(count(EncoderKind::Transformer), 663_680);
    }

    #[test]
    fn heads_must_divide_width() {
        let spec = EncoderSpec {
            hidden_dim: 10,
            num_heads: 3,
            ..EncoderSpec::default_for(EncoderKind::Transformer, 2)
        };
        assert!(matches!(Encoder::build(&spec, 0, DType::F32), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn output_shapes() {
        for kind in [EncoderKind::Lstm, EncoderKind::Tcn, EncoderKind::Transformer] {
            let e = Encoder::build(&tiny(kind), 1, DType::F64).unwrap();
            for (b, l) in [(1, 1), (2, 5), (3, 9)] {
                let x = Tensor::randn(0.0f64, 1.0, (b, l, 3), &Device::Cpu).unwrap();
                assert_eq!(e.encode(&x).unwrap().dims(), &[b, l, 8], "{kind:?}");
            }
        }
    }

    #[test]
    fn wrong_feature_count_is_shape_mismatch() {
        let e = Encoder::build(&tiny(EncoderKind::Tcn), 1, DType::F64).unwrap();
        let x = Tensor::zeros((1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(e.encode(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::build(&tiny(EncoderKind::Transformer), 9, DType::F32).unwrap();
        let b = Encoder::build(&tiny(EncoderKind::Transformer), 9, DType::F32).unwrap();
        let c = Encoder::build(&tiny(EncoderKind::Transformer), 10, DType::F32).unwrap();
        assert_eq!(a.params.checksum().unwrap(), b.params.checksum().unwrap());
        assert_ne!(a.params.checksum().unwrap(), c.params.checksum().unwrap());
    }
}
