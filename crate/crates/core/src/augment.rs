//! Stochastic view construction for the contrastive objectives.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Scale,
    Shift,
    Jitter,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub mask_prob: f64,
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
    pub rng_seed: u64,
    pub order: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mask_prob: 0.1,
            jitter_sigma: 0.1,
            scale_range: (0.8, 1.2),
            shift_range: (-0.1, 0.1),
            rng_seed: 0,
            order: vec![AugmentOp::Scale, AugmentOp::Shift, AugmentOp::Jitter, AugmentOp::Mask],
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            mask_prob: 0.0,
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            shift_range: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("augment.mask_prob", "must lie in [0, 1]"));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::config("augment.jitter_sigma", "must be ≥ 0"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("augment.scale_range", "needs 0 < lo ≤ hi"));
        }
        let (lo, hi) = self.shift_range;
        if !(lo <= hi) {
            return Err(Error::config("augment.shift_range", "needs lo ≤ hi"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Zeroes each timestamp (row of `m` values) independently with probability `p`.
pub fn mask(x: &mut [f64], m: usize, p: f64, rng: &mut ChaCha8Rng) {
    for row in x.chunks_mut(m) {
        if rng.random::<f64>() < p {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Adds i.i.d. `N(0, σ²)` noise.
pub fn jitter(x: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("σ ≥ 0");
    for v in x.iter_mut() {
        *v += n.sample(rng);
    }
}

/// Multiplies each feature column of an `L×m` window by one `Uniform(lo, hi)` draw.
pub fn scale(x: &mut [f64], m: usize, range: (f64, f64), rng: &mut ChaCha8Rng) {
    if range == (1.0, 1.0) {
        return;
    }
    let factors: Vec<f64> = (0..m).map(|_| uniform(rng, range)).collect();
    for row in x.chunks_mut(m) {
        for (v, f) in row.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
}

/// Adds one `Uniform(lo, hi)` draw per feature column.
pub fn shift(x: &mut [f64], m: usize, range: (f64, f64), rng: &mut ChaCha8Rng) {
    if range == (0.0, 0.0) {
        return;
    }
    let offsets: Vec<f64> = (0..m).map(|_| uniform(rng, range)).collect();
    for row in x.chunks_mut(m) {
        for (v, o) in row.iter_mut().zip(&offsets) {
            *v += o;
        }
    }
}

/// A view generator with its own RNG stream. Call `k` of a generator with
/// seed `s` always draws from stream `(s, k)`.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub policy: AugmentPolicy,
    counter: u64,
}

impl Augmenter {
    pub fn new(policy: AugmentPolicy) -> Self {
        Self { policy, counter: 0 }
    }

    pub fn reset(&mut self) {
        self.counter = 0;
    }

    pub fn calls(&self) -> u64 {
        self.counter
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.policy.rng_seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }

    fn apply(&self, x: &mut [f64], m: usize, rng: &mut ChaCha8Rng) {
        let p = &self.policy;
        for op in &p.order {
            match op {
                AugmentOp::Scale => scale(x, m, p.scale_range, rng),
                AugmentOp::Shift => shift(x, m, p.shift_range, rng),
                AugmentOp::Jitter => jitter(x, p.jitter_sigma, rng),
                AugmentOp::Mask => mask(x, m, p.mask_prob, rng),
            }
        }
    }

    /// One augmented view of an `L×m` window given row-major.
    pub fn compose(&mut self, x: &[f64], m: usize) -> Vec<f64> {
        let mut rng = self.next_rng();
        let mut out = x.to_vec();
        self.apply(&mut out, m, &mut rng);
        out
    }

    /// Augments each window of a `B×L×m` batch independently.
    pub fn compose_batch(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, l, m) = x.dims3()?;
        let mut rng = self.next_rng();
        let mut data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for w in data.chunks_mut(l * m) {
            self.apply(w, m, &mut rng);
        }
        Ok(Tensor::from_vec(data, (b, l, m), &Device::Cpu)?.to_dtype(x.dtype())?)
    }
}

/// Two overlapping crops `[a1, a2)` and `[b1, b2)` of one segment with
/// `a1 ≤ b1 < a2 ≤ b2`; the shared span is `[b1, a2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl CropPair {
    pub fn overlap(&self) -> (usize, usize) {
        (self.b.0, self.a.1)
    }

    pub fn overlap_len(&self) -> usize {
        self.a.1 - self.b.0
    }

    /// Offset of the overlap inside crop `a` and inside crop `b`.
    pub fn overlap_offsets(&self) -> (usize, usize) {
        (self.b.0 - self.a.0, 0)
    }
}

/// Samples an overlapping crop pair over a segment of length `len`.
pub fn crop_pair(len: usize, min_overlap: usize, rng: &mut impl Rng) -> Result<CropPair> {
    if min_overlap == 0 || len < min_overlap {
        return Err(Error::SegmentTooShort { len, min_overlap });
    }
    let overlap = rng.random_range(min_overlap..=len);
    let b1 = rng.random_range(0..=len - overlap);
    let a2 = b1 + overlap;
    let a1 = rng.random_range(0..=b1);
    let b2 = rng.random_range(a2..=len);
    Ok(CropPair { a: (a1, a2), b: (b1, b2) })
}

/// `B×L` keep-mask: each entry is 0 with probability `p`, else 1.
pub fn timestamp_keep_mask(b: usize, l: usize, p: f64, dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
    let data: Vec<f64> = (0..b * l)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    Ok(Tensor::from_vec(data, (b, l), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Zeroes whole timestamp rows of an `L×d` (or `B×L×d`) latent with probability `p`.
pub fn timestamp_mask(r: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, l) = match r.dims() {
        [l, _] => (1, *l),
        [b, l, _] => (*b, *l),
        other => return Err(Error::ShapeMismatch(format!("expected L×d or B×L×d, got {other:?}"))),
    };
    let keep = timestamp_keep_mask(b, l, p, r.dtype(), rng)?;
    let keep = if r.rank() == 2 { keep.reshape((l, 1))? } else { keep.unsqueeze(2)? };
    Ok(r.broadcast_mul(&keep)?)
}
