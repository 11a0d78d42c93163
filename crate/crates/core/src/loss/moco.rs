//! Momentum contrast with a FIFO key queue.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::augment::{timestamp_keep_mask, Augmenter};
use crate::backbone::Encoder;
use crate::nn::{init_linear, l2_normalize, linear, logsumexp_last, to_vec_f64, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Linear,
    Mlp,
}

/// Maps encoder outputs to the contrastive space: one linear map, or
/// `d → d → d_proj` with a ReLU in between.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub kind: ProjectionKind,
    pub params: ParamStore,
}

impl ProjectionHead {
    pub fn build(kind: ProjectionKind, d: usize, proj_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        match kind {
            ProjectionKind::Linear => init_linear(&mut params, "proj.0", d, proj_dim, true, &mut rng)?,
            ProjectionKind::Mlp => {
                init_linear(&mut params, "proj.0", d, d, true, &mut rng)?;
                init_linear(&mut params, "proj.1", d, proj_dim, true, &mut rng)?;
            }
        }
        Ok(Self { kind, params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            ProjectionKind::Linear => linear(&self.params, "proj.0", x),
            ProjectionKind::Mlp => linear(&self.params, "proj.1", &linear(&self.params, "proj.0", x)?.relu()?),
        }
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self { kind: self.kind, params: self.params.deep_clone()? })
    }
}

/// Fixed-capacity FIFO of unit-norm keys; the oldest keys are overwritten
/// once full.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    next: usize,
    len: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, data: vec![0.0; capacity * dim], next: 0, len: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `keys` (row-major, `n×dim`), normalizing each row.
    pub fn enqueue(&mut self, keys: &[f64]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values are not rows of width {}", keys.len(), self.dim)));
        }
        for row in keys.chunks(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            let slot = &mut self.data[self.next * self.dim..(self.next + 1) * self.dim];
            for (s, v) in slot.iter_mut().zip(row) {
                *s = v / norm;
            }
            self.next = (self.next + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys from oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<f64>> {
        let start = if self.len < self.capacity { 0 } else { self.next };
        (0..self.len)
            .map(|i| {
                let s = (start + i) % self.capacity;
                self.data[s * self.dim..(s + 1) * self.dim].to_vec()
            })
            .collect()
    }

    /// `len×dim` tensor of the stored keys (storage order).
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let data = self.data[..self.len * self.dim].to_vec();
        Ok(Tensor::from_vec(data, (self.len, self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Key-side encoder and projection tracking the query side by an
/// exponential moving average, plus the trainable query projection.
#[derive(Debug, Clone)]
pub struct MomentumPair {
    pub key_encoder: Encoder,
    pub key_proj: ProjectionHead,
    pub query_proj: ProjectionHead,
    pub momentum: f64,
}

impl MomentumPair {
    /// Key side starts as an exact copy of the query side.
    pub fn new(query_encoder: &Encoder, query_proj: ProjectionHead, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidSpec(format!("momentum {momentum} outside [0, 1]")));
        }
        let key_encoder = Encoder { spec: query_encoder.spec.clone(), params: query_encoder.params.deep_clone()? };
        Ok(Self { key_encoder, key_proj: query_proj.deep_clone()?, query_proj, momentum })
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q` for encoder and projection.
    pub fn update(&self, query_encoder: &Encoder) -> Result<()> {
        self.key_encoder.params.momentum_update(&query_encoder.params, self.momentum)?;
        self.key_proj.params.momentum_update(&self.query_proj.params, self.momentum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MocoVariant {
    /// Linear projection; views differ by latent timestamp dropout only.
    V1,
    /// MLP projection; views come from the augmentation policy.
    V2,
}

/// Random choices of one MoCo step.
#[derive(Debug, Clone)]
pub struct MocoDraw {
    pub view_q: Tensor,
    pub view_k: Tensor,
    pub q_mask: Option<Tensor>,
    /// One timestamp per window.
    pub timestamps: Vec<usize>,
}

pub fn draw_views(
    x: &Tensor,
    variant: MocoVariant,
    augmenter: &mut Augmenter,
    latent_dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MocoDraw> {
    let (b, l, _) = x.dims3()?;
    let (view_q, view_k, q_mask) = match variant {
        MocoVariant::V1 => (x.clone(), x.clone(), Some(timestamp_keep_mask(b, l, latent_dropout, x.dtype(), rng)?)),
        MocoVariant::V2 => (augmenter.compose_batch(x)?, augmenter.compose_batch(x)?, None),
    };
    let timestamps = (0..b).map(|_| rng.random_range(0..l)).collect();
    Ok(MocoDraw { view_q, view_k, q_mask, timestamps })
}

/// Picks row `ts[i]` of window `i` from a `B×L×d` tensor, keeping gradients.
fn select_timestamps(r: &Tensor, ts: &[usize]) -> Result<Tensor> {
    let (b, l, _) = r.dims3()?;
    let mut onehot = vec![0f64; b * l];
    for (i, &t) in ts.iter().enumerate() {
        onehot[i * l + t] = 1.0;
    }
    let sel = Tensor::from_vec(onehot, (b, l, 1), &Device::Cpu)?.to_dtype(r.dtype())?;
    Ok(r.broadcast_mul(&sel)?.sum(1)?)
}

/// Unit-norm, detached keys `B×d_proj` for a draw.
pub fn compute_keys(pair: &MomentumPair, draw: &MocoDraw) -> Result<Tensor> {
    let r = pair.key_encoder.encode(&draw.view_k)?;
    let k = pair.key_proj.forward(&select_timestamps(&r, &draw.timestamps)?)?;
    Ok(l2_normalize(&k)?.detach())
}

/// InfoNCE of each query against its key, with the queue (and, when
/// `in_batch` is set, the other keys of the batch) as negatives.
pub fn moco_objective(
    query_encoder: &Encoder,
    query_proj: &ProjectionHead,
    draw: &MocoDraw,
    keys: &Tensor,
    queue: Option<&Tensor>,
    in_batch: bool,
    tau: f64,
) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let r = query_encoder.encode_masked(&draw.view_q, draw.q_mask.as_ref())?;
    let q = l2_normalize(&query_proj.forward(&select_timestamps(&r, &draw.timestamps)?)?)?;
    let b = q.dim(0)?;
    let keys = keys.to_dtype(q.dtype())?;
    let (pos, mut logits) = if in_batch {
        let all = (q.matmul(&keys.t()?)? / tau)?;
        let mut eye = vec![0f64; b * b];
        for i in 0..b {
            eye[i * b + i] = 1.0;
        }
        let eye = Tensor::from_vec(eye, (b, b), &Device::Cpu)?.to_dtype(q.dtype())?;
        ((&all * &eye)?.sum(D::Minus1)?, all)
    } else {
        let p = ((&q * &keys)?.sum_keepdim(D::Minus1)? / tau)?;
        (p.squeeze(D::Minus1)?, p)
    };
    if let Some(neg) = queue.filter(|n| n.dim(0).map(|k| k > 0).unwrap_or(false)) {
        let n = (q.matmul(&neg.to_dtype(q.dtype())?.t()?)? / tau)?;
        logits = Tensor::cat(&[&logits, &n], 1)?;
    }
    Ok((logsumexp_last(&logits)? - pos)?.mean_all()?)
}

/// A full momentum-contrast objective: projection heads, key encoder,
/// queue and view generator.
#[derive(Debug, Clone)]
pub struct MomentumContrast {
    pub variant: MocoVariant,
    pub pair: MomentumPair,
    pub queue: MemoryQueue,
    pub augmenter: Augmenter,
    pub tau: f64,
    pub warmup_keys: usize,
    pub latent_dropout: f64,
}

impl MomentumContrast {
    pub fn new(variant: MocoVariant, encoder: &Encoder, cfg: &LossConfig, augmenter: Augmenter, seed: u64) -> Result<Self> {
        let kind = match variant {
            MocoVariant::V1 => ProjectionKind::Linear,
            MocoVariant::V2 => ProjectionKind::Mlp,
        };
        let head = ProjectionHead::build(kind, encoder.output_dim(), cfg.proj_dim, seed ^ 0x9e37_79b9, encoder.dtype())?;
        Ok(Self {
            variant,
            pair: MomentumPair::new(encoder, head, cfg.momentum)?,
            queue: MemoryQueue::new(cfg.queue_capacity, cfg.proj_dim),
            augmenter,
            tau: cfg.tau,
            warmup_keys: cfg.warmup_keys,
            latent_dropout: cfg.moco1_latent_dropout,
        })
    }

    /// One step: refresh the key side from `encoder`, compute the loss for
    /// batch `x` and enqueue the new keys.
    pub fn step(&mut self, encoder: &Encoder, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.pair.update(encoder)?;
        let warm = self.queue.len() < self.warmup_keys;
        if self.queue.is_empty() && !warm {
            return Err(Error::EmptyQueueWithoutWarmup);
        }
        let draw = draw_views(x, self.variant, &mut self.augmenter, self.latent_dropout, rng)?;
        let keys = compute_keys(&self.pair, &draw)?;
        let queue = self.queue.to_tensor(encoder.dtype())?;
        let loss = moco_objective(encoder, &self.pair.query_proj, &draw, &keys, Some(&queue), warm, self.tau)?;
        self.queue.enqueue(&to_vec_f64(&keys)?)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentPolicy;
    use crate::backbone::{EncoderKind, EncoderSpec};
    use crate::loss::info_nce;
    use crate::nn::scalar_f64;

    fn tiny_encoder(dtype: DType) -> Encoder {
        let spec = EncoderSpec {
            hidden_dim: 8,
            num_layers: 1,
            tcn_channels: 4,
            ..EncoderSpec::default_for(EncoderKind::Tcn, 2)
        };
        Encoder::build(&spec, 3, dtype).unwrap()
    }

    #[test]
    fn queue_is_fifo_and_unit_norm() {
        let mut q = MemoryQueue::new(3, 2);
        for i in 1..=5 {
            q.enqueue(&[i as f64, 0.0]).unwrap();
        }
        assert_eq!(q.len(), 3);
        // keys are (1,0) after normalization, so check order with distinct directions
        let mut q = MemoryQueue::new(3, 2);
        let dirs = [[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0], [0.0, -4.0], [5.0, 5.0]];
        for d in &dirs {
            q.enqueue(d).unwrap();
        }
        let s = 0.5f64.sqrt();
        let want = [[-1.0, 0.0], [0.0, -1.0], [s, s]];
        for (k, w) in q.ordered().iter().zip(&want) {
            assert!(k.iter().zip(w).all(|(a, b)| (a - b).abs() < 1e-15), "{k:?} vs {w:?}");
        }
        for k in q.ordered() {
            assert!((k.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(q.enqueue(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn momentum_extremes() {
        let enc = tiny_encoder(DType::F64);
        let head = ProjectionHead::build(ProjectionKind::Mlp, 8, 4, 1, DType::F64).unwrap();
        let mut pair = MomentumPair::new(&enc, head, 1.0).unwrap();
        let other = Encoder::build(&enc.spec, 99, DType::F64).unwrap();
        let before = pair.key_encoder.params.checksum().unwrap();
        pair.update(&other).unwrap();
        assert_eq!(pair.key_encoder.params.checksum().unwrap(), before);
        pair.momentum = 0.0;
        pair.update(&other).unwrap();
        assert_eq!(pair.key_encoder.params.checksum().unwrap(), other.params.checksum().unwrap());
    }

    #[test]
    fn momentum_rule_is_convex_combination() {
        let enc = tiny_encoder(DType::F64);
        let head = ProjectionHead::build(ProjectionKind::Linear, 8, 4, 1, DType::F64).unwrap();
        let pair = MomentumPair::new(&enc, head, 0.9).unwrap();
        let other = Encoder::build(&enc.spec, 42, DType::F64).unwrap();
        let name = "embed.weight";
        let k0 = pair.key_encoder.params.values_f64(name).unwrap();
        let q = other.params.values_f64(name).unwrap();
        pair.update(&other).unwrap();
        let k1 = pair.key_encoder.params.values_f64(name).unwrap();
        for ((a, b), c) in k0.iter().zip(&q).zip(&k1) {
            assert!((0.9 * a + 0.1 * b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_matches_scalar_info_nce() {
        let enc = tiny_encoder(DType::F64);
        let head = ProjectionHead::build(ProjectionKind::Mlp, 8, 4, 5, DType::F64).unwrap();
        let pair = MomentumPair::new(&enc, head, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..3 * 6 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data, (3, 6, 2), &Device::Cpu).unwrap();
        let mut aug = Augmenter::new(AugmentPolicy::default());
        let draw = draw_views(&x, MocoVariant::V2, &mut aug, 0.0, &mut rng).unwrap();
        let keys = compute_keys(&pair, &draw).unwrap();
        let mut queue = MemoryQueue::new(8, 4);
        let qdata: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        queue.enqueue(&qdata).unwrap();
        let qt = queue.to_tensor(DType::F64).unwrap();
        let tau = 0.2;

        let r = enc.encode(&draw.view_q).unwrap();
        let qv: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let row = r.get(i).unwrap().get(draw.timestamps[i]).unwrap().unsqueeze(0).unwrap();
                to_vec_f64(&pair.query_proj.forward(&row).unwrap()).unwrap()
            })
            .collect();
        let kv: Vec<Vec<f64>> = (0..3).map(|i| to_vec_f64(&keys.get(i).unwrap()).unwrap()).collect();
        let queue_rows = queue.ordered();

        for in_batch in [false, true] {
            let got =
                scalar_f64(&moco_objective(&enc, &pair.query_proj, &draw, &keys, Some(&qt), in_batch, tau).unwrap())
                    .unwrap();
            let mut want = 0.0;
            for i in 0..3 {
                let mut negs = queue_rows.clone();
                if in_batch {
                    negs.extend((0..3).filter(|&j| j != i).map(|j| kv[j].clone()));
                }
                want += info_nce(&qv[i], &kv[i], &negs, tau).unwrap() / 3.0;
            }
            assert!((got - want).abs() < 1e-9, "in_batch={in_batch}: {got} vs {want}");
        }
    }

    #[test]
    fn empty_queue_without_warmup_errors() {
        let enc = tiny_encoder(DType::F32);
        let cfg = LossConfig { warmup_keys: 0, ..LossConfig::default() };
        let mut moco = MomentumContrast::new(MocoVariant::V1, &enc, &cfg, Augmenter::new(AugmentPolicy::identity()), 0)
            .unwrap();
        let x = Tensor::zeros((2, 4, 2), DType::F32, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(moco.step(&enc, &x, &mut rng), Err(Error::EmptyQueueWithoutWarmup)));
    }

    #[test]
    fn step_enqueues_one_key_per_window() {
        let enc = tiny_encoder(DType::F32);
        let cfg = LossConfig { queue_capacity: 5, proj_dim: 4, ..LossConfig::default() };
        let mut moco =
            MomentumContrast::new(MocoVariant::V2, &enc, &cfg, Augmenter::new(AugmentPolicy::default()), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..3 * 6 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data, (3, 6, 2), &Device::Cpu).unwrap();
        let l = scalar_f64(&moco.step(&enc, &x, &mut rng).unwrap()).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        assert_eq!(moco.queue.len(), 3);
        moco.step(&enc, &x, &mut rng).unwrap();
        assert_eq!(moco.queue.len(), 5);
    }
}
