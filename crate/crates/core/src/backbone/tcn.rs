//! Dilated causal convolution encoder.
//!
//! `num_layers` residual blocks of width `tcn_channels` with dilations
//! `1, 2, …, 2^(num_layers−1)`, followed by one output block of dilation
//! `2^num_layers` that maps to `hidden_dim` (with a 1×1 projection on the
//! residual path when the widths differ). Every block is
//! `GELU → conv → GELU → conv` plus the residual.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::EncoderSpec;
use crate::nn::{init_linear, linear, matmul_last, ParamStore};
use crate::Result;

struct Block {
    in_ch: usize,
    out_ch: usize,
    dilation: usize,
}

fn blocks(spec: &EncoderSpec) -> Vec<Block> {
    let c = spec.tcn_channels;
    let mut out: Vec<Block> = (0..spec.num_layers)
        .map(|i| Block {
            in_ch: c,
            out_ch: c,
            dilation: 1 << i,
        })
        .collect();
    out.push(Block {
        in_ch: c,
        out_ch: spec.hidden_dim,
        dilation: 1 << spec.num_layers,
    });
    out
}

/// Number of input steps that can influence one output step:
/// `1 + Σ_blocks 2·(k−1)·dilation`.
pub fn receptive_field(spec: &EncoderSpec) -> usize {
    1 + blocks(spec)
        .iter()
        .map(|b| 2 * (spec.kernel_size - 1) * b.dilation)
        .sum::<usize>()
}

pub(super) fn init(spec: &EncoderSpec, p: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = spec.kernel_size;
    init_linear(p, "embed", spec.input_dim, spec.tcn_channels, true, rng)?;
    for (i, b) in blocks(spec).iter().enumerate() {
        init_conv(p, &format!("block.{i}.conv1"), b.in_ch, b.out_ch, k, rng)?;
        init_conv(p, &format!("block.{i}.conv2"), b.out_ch, b.out_ch, k, rng)?;
        if b.in_ch != b.out_ch {
            init_linear(p, &format!("block.{i}.proj"), b.in_ch, b.out_ch, true, rng)?;
        }
    }
    Ok(())
}

fn init_conv(p: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    p.uniform(format!("{prefix}.weight"), &[k, cin, cout], bound, rng)?;
    p.uniform(format!("{prefix}.bias"), &[cout], bound, rng)
}

/// Causal dilated convolution on `B×L×C`: output step `t` sees inputs
/// `t − (k−1−j)·dilation` for taps `j = 0..k`. The taps are gathered from a
/// front-padded copy and contracted in one product with the `k·C×C'` weight.
fn causal_conv(p: &ParamStore, prefix: &str, x: &Tensor, dilation: usize) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    let (b, len, cin) = x.dims3()?;
    let k = w.dims()[0];
    let cout = w.dims()[2];
    let taps: Vec<usize> = (0..k).filter(|&j| (k - 1 - j) * dilation < len).collect();
    let pad = (k - 1 - taps[0]) * dilation;
    let xp = if pad > 0 {
        Tensor::cat(&[&Tensor::zeros((b, pad, cin), x.dtype(), x.device())?, x], 1)?
    } else {
        x.clone()
    };
    let cols: Vec<Tensor> = taps
        .iter()
        .map(|&j| xp.narrow(1, pad - (k - 1 - j) * dilation, len))
        .collect::<candle_core::Result<_>>()?;
    let unfolded = Tensor::cat(&cols, 2)?;
    let w = w.narrow(0, taps[0], taps.len())?.reshape((taps.len() * cin, cout))?;
    Ok(matmul_last(&unfolded, &w)?.broadcast_add(bias)?)
}

pub(super) fn forward(spec: &EncoderSpec, p: &ParamStore, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let mut h = linear(p, "embed", x)?;
    if let Some(m) = mask {
        h = h.broadcast_mul(m)?;
    }
    for (i, b) in blocks(spec).iter().enumerate() {
        let residual = if b.in_ch != b.out_ch {
            linear(p, &format!("block.{i}.proj"), &h)?
        } else {
            h.clone()
        };
        let y = causal_conv(p, &format!("block.{i}.conv1"), &h.gelu_erf()?, b.dilation)?;
        let y = causal_conv(p, &format!("block.{i}.conv2"), &y.gelu_erf()?, b.dilation)?;
        h = (y + residual)?;
    }
    Ok(h)
}
