//! Informer-style encoder: linear embedding plus fixed sinusoidal positions,
//! then pre-norm layers of multi-head (ProbSparse) self-attention and a
//! GELU feed-forward block, closed by a final layer norm. No distilling, so
//! the output keeps all `L` steps.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::attention::{full_attention, probsparse_attention};
use super::{AttentionKind, EncoderSpec};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, ParamStore};
use crate::Result;

pub(super) fn init(spec: &EncoderSpec, p: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = spec.hidden_dim;
    let ff = spec.ff_width();
    init_linear(p, "embed", spec.input_dim, d, true, rng)?;
    for l in 0..spec.num_layers {
        let pre = format!("layer.{l}");
        for name in ["q", "k", "v", "o"] {
            init_linear(p, &format!("{pre}.attn.{name}"), d, d, true, rng)?;
        }
        init_layer_norm(p, &format!("{pre}.norm1"), d)?;
        init_linear(p, &format!("{pre}.ff1"), d, ff, true, rng)?;
        init_linear(p, &format!("{pre}.ff2"), ff, d, true, rng)?;
        init_layer_norm(p, &format!("{pre}.norm2"), d)?;
    }
    init_layer_norm(p, "final_norm", d)
}

/// `L×d` table with `sin` on even and `cos` on odd channels.
pub(super) fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    Ok(x.reshape((b, l, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * dh))?)
}

fn self_attention(spec: &EncoderSpec, p: &ParamStore, pre: &str, x: &Tensor) -> Result<Tensor> {
    let heads = spec.num_heads;
    let q = split_heads(&linear(p, &format!("{pre}.q"), x)?, heads)?;
    let k = split_heads(&linear(p, &format!("{pre}.k"), x)?, heads)?;
    let v = split_heads(&linear(p, &format!("{pre}.v"), x)?, heads)?;
    let out = match spec.attention {
        AttentionKind::Full => full_attention(&q, &k, &v)?,
        AttentionKind::ProbSparse => probsparse_attention(&q, &k, &v, spec.probsparse_factor)?,
    };
    linear(p, &format!("{pre}.o"), &merge_heads(&out)?)
}

pub(super) fn forward(spec: &EncoderSpec, p: &ParamStore, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (_, len, _) = x.dims3()?;
    let d = spec.hidden_dim;
    let mut h = linear(p, "embed", x)?;
    if let Some(m) = mask {
        h = h.broadcast_mul(m)?;
    }
    let pe = Tensor::from_vec(sinusoidal_positions(len, d), (1, len, d), &Device::Cpu)?.to_dtype(x.dtype())?;
    h = h.broadcast_add(&pe)?;
    for l in 0..spec.num_layers {
        let pre = format!("layer.{l}");
        let a = self_attention(spec, p, &format!("{pre}.attn"), &layer_norm(p, &format!("{pre}.norm1"), &h)?)?;
        h = (h + a)?;
        let f = layer_norm(p, &format!("{pre}.norm2"), &h)?;
        let f = linear(p, &format!("{pre}.ff2"), &linear(p, &format!("{pre}.ff1"), &f)?.gelu_erf()?)?;
        h = (h + f)?;
    }
    layer_norm(p, "final_norm", &h)
}
