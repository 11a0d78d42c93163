//! Training objectives: forecasting MSE, InfoNCE and the contrastive
//! algorithms built on it.

mod hcl;
mod moco;

pub use hcl::{hcl_level_count, hcl_loss, instance_contrast, max_pool_time, pairwise_contrast, temporal_contrast};
pub use moco::{
    compute_keys, draw_views, moco_objective, MemoryQueue, MocoDraw, MocoVariant, MomentumContrast, MomentumPair, ProjectionHead,
    ProjectionKind,
};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::{crop_pair, timestamp_keep_mask, AugmentPolicy, Augmenter};
use crate::backbone::Encoder;
use crate::nn::scalar_f64;
use crate::{Error, Result};

/// Mean of squared elementwise differences.
pub fn mse_loss(pred: &Tensor, gold: &Tensor) -> Result<Tensor> {
    if pred.dims() != gold.dims() {
        return Err(Error::ShapeMismatch(format!("pred {:?} vs gold {:?}", pred.dims(), gold.dims())));
    }
    Ok((pred - gold)?.sqr()?.mean_all()?)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σₙ e^{sₙ/τ}))` with cosine similarities,
/// evaluated through a max-shifted log-sum-exp.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let pos = cosine_sim(anchor, positive)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine_sim(anchor, n)? / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - pos).max(0.0))
}

/// `mse + λ·sscl`.
pub fn combined_loss(mse: &Tensor, sscl: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda == 0.0 {
        return Ok(mse.clone());
    }
    Ok((mse + (sscl * lambda)?)?)
}

/// Weighted HCL + MoCo2 mix (equal weights by default).
pub fn combine_sscl(hcl: &Tensor, moco: &Tensor, hcl_weight: f64, moco_weight: f64) -> Result<Tensor> {
    Ok(((hcl * hcl_weight)? + (moco * moco_weight)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsclAlgorithm {
    Hcl,
    Moco1,
    Moco2,
    Moco2Hcl,
}

impl SsclAlgorithm {
    pub fn uses_moco2(self) -> bool {
        matches!(self, SsclAlgorithm::Moco2 | SsclAlgorithm::Moco2Hcl)
    }

    pub fn label(self) -> &'static str {
        match self {
            SsclAlgorithm::Hcl => "HCL",
            SsclAlgorithm::Moco1 => "MoCo",
            SsclAlgorithm::Moco2 => "MoCo2",
            SsclAlgorithm::Moco2Hcl => "MoCo2+HCL",
        }
    }
}

/// End-to-end objective: MSE alone or MSE plus one SSCL auxiliary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Mse,
    MseHcl,
    MseMoco1,
    MseMoco2,
    MseMoco2Hcl,
}

impl LossChoice {
    pub fn sscl(self) -> Option<SsclAlgorithm> {
        match self {
            LossChoice::Mse => None,
            LossChoice::MseHcl => Some(SsclAlgorithm::Hcl),
            LossChoice::MseMoco1 => Some(SsclAlgorithm::Moco1),
            LossChoice::MseMoco2 => Some(SsclAlgorithm::Moco2),
            LossChoice::MseMoco2Hcl => Some(SsclAlgorithm::Moco2Hcl),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossChoice::Mse => "MSE",
            LossChoice::MseHcl => "+HCL",
            LossChoice::MseMoco1 => "+MoCo",
            LossChoice::MseMoco2 => "+MoCo2",
            LossChoice::MseMoco2Hcl => "+MoCo2+HCL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub hcl_weight: f64,
    pub moco_weight: f64,
    pub queue_capacity: usize,
    pub momentum: f64,
    pub proj_dim: usize,
    /// In-batch keys serve as negatives until the queue holds this many keys;
    /// `0` disables warm-up.
    pub warmup_keys: usize,
    /// Latent timestamp dropout on the MoCo1 query branch.
    pub moco1_latent_dropout: f64,
    /// Latent timestamp masking probability for HCL crops.
    pub hcl_mask_prob: f64,
    /// Minimum crop overlap for HCL; `0` means a quarter of the window.
    pub hcl_min_overlap: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            hcl_weight: 0.5,
            moco_weight: 0.5,
            queue_capacity: 4096,
            momentum: 0.999,
            proj_dim: 64,
            warmup_keys: 64,
            moco1_latent_dropout: 0.1,
            hcl_mask_prob: 0.5,
            hcl_min_overlap: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be > 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be ≥ 0"));
        }
        if (self.hcl_weight + self.moco_weight - 1.0).abs() > 1e-9 {
            return Err(Error::config("loss.hcl_weight", "hcl_weight + moco_weight must equal 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("loss.momentum", "must lie in [0, 1]"));
        }
        if self.queue_capacity == 0 || self.proj_dim == 0 {
            return Err(Error::config("loss.queue_capacity", "queue_capacity and proj_dim must be ≥ 1"));
        }
        Ok(())
    }
}

/// Everything an SSCL objective needs across steps: RNG, augmenter and,
/// for MoCo variants, the momentum pair and queue.
pub struct SsclState {
    pub algorithm: SsclAlgorithm,
    pub cfg: LossConfig,
    pub moco: Option<MomentumContrast>,
    rng: rand_chacha::ChaCha8Rng,
    /// Last computed components `(hcl, moco)` as scalars, for logging.
    pub last_components: (Option<f64>, Option<f64>),
}

impl SsclState {
    pub fn new(
        algorithm: SsclAlgorithm,
        cfg: &LossConfig,
        policy: &AugmentPolicy,
        encoder: &Encoder,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let moco = match algorithm {
            SsclAlgorithm::Hcl => None,
            SsclAlgorithm::Moco1 => Some(MomentumContrast::new(
                MocoVariant::V1,
                encoder,
                cfg,
                Augmenter::new(AugmentPolicy::identity()),
                seed,
            )?),
            SsclAlgorithm::Moco2 | SsclAlgorithm::Moco2Hcl => {
                let mut p = policy.clone();
                p.rng_seed = p.rng_seed.wrapping_add(seed);
                Some(MomentumContrast::new(MocoVariant::V2, encoder, cfg, Augmenter::new(p), seed)?)
            }
        };
        Ok(Self {
            algorithm,
            cfg: cfg.clone(),
            moco,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de),
            last_components: (None, None),
        })
    }

    /// Parameters that receive gradients besides the encoder's (the MoCo
    /// query projection head).
    pub fn trainable(&self) -> Vec<candle_core::Var> {
        self.moco.as_ref().map(|m| m.pair.query_proj.params.vars()).unwrap_or_default()
    }

    fn hcl_term(&mut self, encoder: &Encoder, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let min_overlap = if self.cfg.hcl_min_overlap == 0 {
            l.div_ceil(4).max(1)
        } else {
            self.cfg.hcl_min_overlap.min(l)
        };
        let crop = crop_pair(l, min_overlap, &mut self.rng)?;
        let (a1, a2) = crop.a;
        let (b1, b2) = crop.b;
        let dt = encoder.dtype();
        let ma = timestamp_keep_mask(b, a2 - a1, self.cfg.hcl_mask_prob, dt, &mut self.rng)?;
        let mb = timestamp_keep_mask(b, b2 - b1, self.cfg.hcl_mask_prob, dt, &mut self.rng)?;
        let ra = encoder.encode_masked(&x.narrow(1, a1, a2 - a1)?, Some(&ma))?;
        let rb = encoder.encode_masked(&x.narrow(1, b1, b2 - b1)?, Some(&mb))?;
        let lo = crop.overlap_len();
        let (off_a, off_b) = crop.overlap_offsets();
        hcl_loss(&ra.narrow(1, off_a, lo)?, &rb.narrow(1, off_b, lo)?, self.cfg.tau)
    }

    /// SSCL loss on a `B×L×m` batch. MoCo variants also refresh the key
    /// encoder and enqueue this batch's keys.
    pub fn loss(&mut self, encoder: &Encoder, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(encoder.dtype())?;
        let out = match self.algorithm {
            SsclAlgorithm::Hcl => {
                let h = self.hcl_term(encoder, &x)?;
                self.last_components = (Some(scalar_f64(&h)?), None);
                h
            }
            SsclAlgorithm::Moco1 | SsclAlgorithm::Moco2 => {
                let moco = self.moco.as_mut().expect("moco state");
                let m = moco.step(encoder, &x, &mut self.rng)?;
                self.last_components = (None, Some(scalar_f64(&m)?));
                m
            }
            SsclAlgorithm::Moco2Hcl => {
                let h = self.hcl_term(encoder, &x)?;
                let moco = self.moco.as_mut().expect("moco state");
                let m = moco.step(encoder, &x, &mut self.rng)?;
                self.last_components = (Some(scalar_f64(&h)?), Some(scalar_f64(&m)?));
                combine_sscl(&h, &m, self.cfg.hcl_weight, self.cfg.moco_weight)?
            }
        };
        Ok(out)
    }
}

/// Scalar helper for tests and bindings.
pub fn mse_scalar(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", pred.len(), gold.len())));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(gold).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let t = |v: Vec<f64>| Tensor::new(v, &Device::Cpu).unwrap();
        let s = |x: Tensor| x.to_scalar::<f64>().unwrap();
        assert_eq!(s(mse_loss(&t(vec![1.0, 2.0]), &t(vec![1.0, 2.0])).unwrap()), 0.0);
        assert_eq!(s(mse_loss(&t(vec![0.0]), &t(vec![2.0])).unwrap()), 4.0);
        assert_eq!(s(mse_loss(&t(vec![1.0, 2.0]), &t(vec![0.0, 4.0])).unwrap()), 2.5);
        assert!(matches!(mse_loss(&t(vec![1.0]), &t(vec![1.0, 2.0])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = [0.4, -1.3, 2.2];
        let g = [1.0, 0.5, -0.25];
        let scaled: Vec<f64> = h.iter().map(|v| v * 7.3).collect();
        assert!((cosine_sim(&scaled, &g).unwrap() - cosine_sim(&h, &g).unwrap()).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &g[..2]), Err(Error::ZeroVector)));
    }

    #[test]
    fn info_nce_examples() {
        let a = [1.0, 0.0];
        assert!(info_nce(&a, &a, &[], 1.0).unwrap().abs() < 1e-9);
        let v = info_nce(&a, &a, &[vec![0.0, 1.0]], 1.0).unwrap();
        // log(1 + e^{-1})
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-9, "{v}");
        let w = info_nce(&[100.0, 0.0], &[100.0, 0.0], &[vec![0.0, 100.0]], 1.0).unwrap();
        assert!((v - w).abs() < 1e-12);
        assert!(matches!(info_nce(&a, &a, &[], 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(info_nce(&[0.0, 0.0], &a, &[], 1.0), Err(Error::ZeroVector)));
    }

    #[test]
    fn combination_examples() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let s = |x: Tensor| x.to_scalar::<f64>().unwrap();
        assert_eq!(s(combined_loss(&t(1.25), &t(9.0), 0.0).unwrap()), 1.25);
        assert_eq!(s(combined_loss(&t(1.0), &t(2.0), 0.5).unwrap()), 2.0);
        assert_eq!(s(combine_sscl(&t(0.4), &t(0.6), 0.5, 0.5).unwrap()), 0.5);
    }

    fn unit_circle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    proptest! {
        #[test]
        fn info_nce_nonnegative_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            p in prop::collection::vec(-5.0f64..5.0, 3),
            negs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 0..6),
            scale in 0.01f64..100.0,
            tau in 0.05f64..2.0,
        ) {
            let nz = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>() > 1e-6;
            prop_assume!(nz(&a) && nz(&p) && negs.iter().all(nz));
            let base = info_nce(&a, &p, &negs, tau).unwrap();
            prop_assert!(base >= 0.0);
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sneg: Vec<Vec<f64>> = negs.iter().map(|n| n.iter().map(|x| x * scale).collect()).collect();
            let scaled = info_nce(&sa, &p, &sneg, tau).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9 * (1.0 + base));
        }

        #[test]
        fn info_nce_increases_with_negative_similarity(t1 in 0.0f64..3.1, dt in 0.001f64..0.5) {
            // negative at angle θ from the anchor: smaller θ means more similar
            let a = unit_circle(0.0);
            let far = info_nce(&a, &a, &[unit_circle(t1.min(3.1) + dt)], 0.5).unwrap();
            let near = info_nce(&a, &a, &[unit_circle(t1)], 0.5).unwrap();
            prop_assume!(t1 + dt <= std::f64::consts::PI);
            prop_assert!(near > far);
        }
    }
}
