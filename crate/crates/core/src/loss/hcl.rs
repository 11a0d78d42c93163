//! Hierarchical contrastive loss over two overlapping views.

use candle_core::{Device, Tensor, D};

use crate::nn::{l2_normalize, logsumexp_last};
use crate::{Error, Result};

/// Added to self-similarities so they drop out of the denominator.
const SELF_MASK: f64 = -1e9;

/// Contrast inside groups of paired items.
///
/// `za` and `zb` are `G×n×d`: item `i` of `za` and item `i` of `zb` form a
/// positive pair, and every other item of the same group (from either view)
/// is a negative. Each of the `2n` items per group acts as an anchor; the
/// result is the mean InfoNCE over all `G·2n` anchors.
pub fn pairwise_contrast(za: &Tensor, zb: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if za.dims() != zb.dims() || za.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("views {:?} and {:?}", za.dims(), zb.dims())));
    }
    let (_, n, _) = za.dims3()?;
    let z = l2_normalize(&Tensor::cat(&[za, zb], 1)?)?;
    let sim = (z.matmul(&z.t()?)? / tau)?;
    let two_n = 2 * n;
    let mut diag = vec![0f64; two_n * two_n];
    let mut pos = vec![0f64; two_n * two_n];
    for i in 0..two_n {
        diag[i * two_n + i] = SELF_MASK;
        pos[i * two_n + (i + n) % two_n] = 1.0;
    }
    let dt = za.dtype();
    let diag = Tensor::from_vec(diag, (1, two_n, two_n), &Device::Cpu)?.to_dtype(dt)?;
    let pos = Tensor::from_vec(pos, (1, two_n, two_n), &Device::Cpu)?.to_dtype(dt)?;
    let lse = logsumexp_last(&sim.broadcast_add(&diag)?)?;
    let positive = sim.broadcast_mul(&pos)?.sum(D::Minus1)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Timestamps of one instance contrast against each other.
pub fn temporal_contrast(ra: &Tensor, rb: &Tensor, tau: f64) -> Result<Tensor> {
    pairwise_contrast(ra, rb, tau)
}

/// Instances of one timestamp contrast against each other.
pub fn instance_contrast(ra: &Tensor, rb: &Tensor, tau: f64) -> Result<Tensor> {
    pairwise_contrast(&ra.transpose(0, 1)?.contiguous()?, &rb.transpose(0, 1)?.contiguous()?, tau)
}

/// Max-pool with kernel 2 and stride 2 along time; an odd trailing step is
/// carried over unchanged.
pub fn max_pool_time(r: &Tensor) -> Result<Tensor> {
    let (b, l, d) = r.dims3()?;
    let even = l - l % 2;
    let pooled = r.narrow(1, 0, even)?.reshape((b, even / 2, 2, d))?.max(2)?;
    if l % 2 == 1 {
        Ok(Tensor::cat(&[&pooled, &r.narrow(1, l - 1, 1)?], 1)?)
    } else {
        Ok(pooled)
    }
}

/// Levels visited for an overlap of length `lo`: `ceil(log₂ lo) + 1`.
pub fn hcl_level_count(lo: usize) -> usize {
    let mut n = 1;
    let mut l = lo;
    while l > 1 {
        l = l.div_ceil(2);
        n += 1;
    }
    n
}

/// Hierarchical contrastive loss on the overlap representations
/// `ra`, `rb` (`B×Lₒ×d`). Each level adds temporal and instance contrast
/// (instance only once a single step remains), then both views are max-pooled
/// by two; the result is the mean over levels.
pub fn hcl_loss(ra: &Tensor, rb: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if ra.dims() != rb.dims() || ra.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("views {:?} and {:?}", ra.dims(), rb.dims())));
    }
    let (_, lo, _) = ra.dims3()?;
    if lo == 0 {
        return Err(Error::ShapeMismatch("empty overlap".into()));
    }
    let mut a = ra.clone();
    let mut b = rb.clone();
    let mut total: Option<Tensor> = None;
    let mut levels = 0usize;
    loop {
        let len = a.dim(1)?;
        let mut term = instance_contrast(&a, &b, tau)?;
        if len > 1 {
            term = (term + temporal_contrast(&a, &b, tau)?)?;
        }
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
        levels += 1;
        if len == 1 {
            break;
        }
        a = max_pool_time(&a)?;
        b = max_pool_time(&b)?;
    }
    Ok((total.expect("at least one level") / levels as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::info_nce;
    use crate::nn::{scalar_f64, to_vec_f64};
    use rand::{Rng, SeedableRng};

    fn rand_vals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn tensor(v: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Per-anchor reference for one group: anchors from both views, positive
    /// is the same index in the other view, negatives are all other items.
    fn group_reference(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let n = a.len();
        let items: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
        let mut sum = 0.0;
        for i in 0..2 * n {
            let p = (i + n) % (2 * n);
            let negs: Vec<Vec<f64>> =
                (0..2 * n).filter(|&j| j != i && j != p).map(|j| items[j].clone()).collect();
            sum += info_nce(items[i], items[p], &negs, tau).unwrap();
        }
        sum / (2 * n) as f64
    }

    fn rows(v: &[f64], b: usize, l: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
        (0..b)
            .map(|i| (0..l).map(|t| v[(i * l + t) * d..(i * l + t + 1) * d].to_vec()).collect())
            .collect()
    }

    #[test]
    fn temporal_term_matches_reference_on_identical_views() {
        let (l, d) = (5, 3);
        let v = rand_vals(l * d, 1);
        let r = tensor(v.clone(), (1, l, d));
        let got = scalar_f64(&temporal_contrast(&r, &r, 0.1).unwrap()).unwrap();
        let rr = rows(&v, 1, l, d);
        let want = group_reference(&rr[0], &rr[0], 0.1);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn full_loss_matches_reference() {
        let (b, l, d, tau) = (3, 5, 4, 0.2);
        let va = rand_vals(b * l * d, 2);
        let vb = rand_vals(b * l * d, 3);
        let got = scalar_f64(&hcl_loss(&tensor(va.clone(), (b, l, d)), &tensor(vb.clone(), (b, l, d)), tau).unwrap())
            .unwrap();

        // independent pooling and level loop on nested vectors
        let pool = |x: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            x.iter()
                .map(|inst| {
                    inst.chunks(2)
                        .map(|c| (0..d).map(|k| c.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max)).collect())
                        .collect()
                })
                .collect()
        };
        let mut xa = rows(&va, b, l, d);
        let mut xb = rows(&vb, b, l, d);
        let mut total = 0.0;
        let mut levels = 0;
        loop {
            let len = xa[0].len();
            let mut term = 0.0;
            for t in 0..len {
                let ia: Vec<Vec<f64>> = xa.iter().map(|inst| inst[t].clone()).collect();
                let ib: Vec<Vec<f64>> = xb.iter().map(|inst| inst[t].clone()).collect();
                term += group_reference(&ia, &ib, tau) / len as f64;
            }
            if len > 1 {
                term += (0..b).map(|i| group_reference(&xa[i], &xb[i], tau)).sum::<f64>() / b as f64;
            }
            total += term;
            levels += 1;
            if len == 1 {
                break;
            }
            xa = pool(&xa);
            xb = pool(&xb);
        }
        assert_eq!(levels, hcl_level_count(l));
        let want = total / levels as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn level_counts() {
        assert_eq!(hcl_level_count(1), 1);
        assert_eq!(hcl_level_count(2), 2);
        assert_eq!(hcl_level_count(5), 4);
        assert_eq!(hcl_level_count(8), 4);
        assert_eq!(hcl_level_count(9), 5);
    }

    #[test]
    fn pooling_keeps_odd_tail() {
        let r = tensor(vec![1.0, 5.0, 2.0, 0.0, 7.0], (1, 5, 1));
        assert_eq!(to_vec_f64(&max_pool_time(&r).unwrap()).unwrap(), vec![5.0, 2.0, 7.0]);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let r = tensor(vec![0.3, -0.2], (1, 1, 2));
        assert!(scalar_f64(&hcl_loss(&r, &r, 0.1).unwrap()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = tensor(vec![0.0; 6], (1, 3, 2));
        let s = tensor(vec![0.0; 4], (1, 2, 2));
        assert!(matches!(hcl_loss(&r, &s, 0.1), Err(Error::ShapeMismatch(_))));
        assert!(matches!(hcl_loss(&r, &r, 0.0), Err(Error::NonPositiveTemperature(_))));
    }
}
