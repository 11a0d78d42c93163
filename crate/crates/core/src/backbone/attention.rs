//! Scaled dot-product attention and its ProbSparse approximation.
//!
//! All functions take `B×H×L×dₕ` query/key/value tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::nn::softmax_last;
use crate::Result;

pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Number of active queries `u = ceil(c·ln L)`, clamped to `[1, L]`.
pub fn probsparse_top_u(len: usize, factor: f64) -> usize {
    let u = (factor * (len as f64).ln()).ceil();
    (u.max(1.0) as usize).min(len)
}

/// Query sparsity measurement `max_j s_ij − mean_j s_ij` over the scaled
/// scores, as a `B×H×L` tensor.
pub fn sparsity_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let s = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    Ok((s.max(D::Minus1)? - s.mean(D::Minus1)?)?)
}

/// ProbSparse self-attention.
///
/// The `u` queries with the largest sparsity measurement attend with a full
/// softmax over all keys; every other query position outputs the temporal
/// mean of `V`. Selection is made on detached scores, so gradients flow
/// through the chosen queries, keys and values only.
pub fn probsparse_attention(q: &Tensor, k: &Tensor, v: &Tensor, factor: f64) -> Result<Tensor> {
    let (b, h, len, _) = q.dims4()?;
    let u = probsparse_top_u(len, factor);
    if u >= len {
        return full_attention(q, k, v);
    }
    let m = sparsity_scores(&q.detach(), &k.detach())?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    // one-hot selector B×H×L×u
    let mut sel = vec![0f64; b * h * len * u];
    for bh in 0..b * h {
        let row = &m[bh * len..(bh + 1) * len];
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        let mut top = order[..u].to_vec();
        top.sort_unstable();
        for (r, &qi) in top.iter().enumerate() {
            sel[bh * len * u + qi * u + r] = 1.0;
        }
    }
    let sel = Tensor::from_vec(sel, (b, h, len, u), &Device::Cpu)?.to_dtype(q.dtype())?;
    let q_sel = sel.t()?.matmul(q)?;
    let active = full_attention(&q_sel, k, v)?;
    let mean_v = v.mean_keepdim(2)?;
    let delta = active.broadcast_sub(&mean_v)?;
    Ok(mean_v.broadcast_add(&sel.matmul(&delta)?)?)
}
