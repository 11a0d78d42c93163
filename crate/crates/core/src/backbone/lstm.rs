//! Stacked uni-directional LSTM with a linear input embedding.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::EncoderSpec;
use crate::nn::{init_linear, linear, matmul_last, sigmoid, tanh, ParamStore};
use crate::Result;

pub(super) fn init(spec: &EncoderSpec, p: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let h = spec.hidden_dim;
    init_linear(p, "embed", spec.input_dim, h, true, rng)?;
    let bound = 1.0 / (h as f64).sqrt();
    for l in 0..spec.num_layers {
        // gate order i, f, g, o along the 4h axis
        p.uniform(format!("lstm.{l}.w_ih"), &[h, 4 * h], bound, rng)?;
        p.uniform(format!("lstm.{l}.w_hh"), &[h, 4 * h], bound, rng)?;
        p.uniform(format!("lstm.{l}.b_ih"), &[4 * h], bound, rng)?;
        p.uniform(format!("lstm.{l}.b_hh"), &[4 * h], bound, rng)?;
    }
    Ok(())
}

pub(super) fn forward(spec: &EncoderSpec, p: &ParamStore, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (b, len, _) = x.dims3()?;
    let h = spec.hidden_dim;
    let mut seq = linear(p, "embed", x)?;
    if let Some(m) = mask {
        seq = seq.broadcast_mul(m)?;
    }
    for l in 0..spec.num_layers {
        let w_ih = p.get(&format!("lstm.{l}.w_ih"))?;
        let w_hh = p.get(&format!("lstm.{l}.w_hh"))?;
        let bias = (p.get(&format!("lstm.{l}.b_ih"))? + p.get(&format!("lstm.{l}.b_hh"))?)?;
        // input contribution for every step at once: B×L×4h
        let xw = matmul_last(&seq, w_ih)?.broadcast_add(&bias)?;
        let mut hidden = Tensor::zeros((b, h), seq.dtype(), seq.device())?;
        let mut cell = hidden.clone();
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let gates = (xw.narrow(1, t, 1)?.squeeze(1)? + hidden.matmul(w_hh)?)?;
            let act = sigmoid(&gates)?;
            let i = act.narrow(D::Minus1, 0, h)?;
            let f = act.narrow(D::Minus1, h, h)?;
            let g = tanh(&gates.narrow(D::Minus1, 2 * h, h)?)?;
            let o = act.narrow(D::Minus1, 3 * h, h)?;
            cell = ((f * &cell)? + (i * g)?)?;
            hidden = (o * tanh(&cell)?)?;
            outputs.push(hidden.clone());
        }
        seq = Tensor::stack(&outputs, 1)?;
    }
    Ok(seq)
}
