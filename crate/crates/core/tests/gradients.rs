//! Autodiff gradients against central finite differences in f64.

mod common;

use candle_core::{DType, Device, Tensor};
use tscl::backbone::{AttentionKind, Encoder, EncoderKind, EncoderSpec};
use tscl::erf::erf_gradient_with;
use tscl::loss::{hcl_loss, instance_contrast, moco_objective, mse_loss, temporal_contrast, MocoDraw, ProjectionHead, ProjectionKind};
use tscl::nn::{l2_normalize, to_vec_f64};
use tscl::strategy::{ForecastModel, Readout};

use common::{check_var, rand_tensor, rand_vec, rel_err, var, H, TOL};

#[test]
fn mse_gradient() {
    let p = var(&[2, 3, 2], 1);
    let y = rand_tensor(&[2, 3, 2], 2);
    check_var(&p, &|| mse_loss(p.as_tensor(), &y).unwrap(), 12, "mse");
}

#[test]
fn contrast_gradients() {
    let a = var(&[3, 5, 4], 3);
    let b = var(&[3, 5, 4], 4);
    check_var(&a, &|| temporal_contrast(a.as_tensor(), b.as_tensor(), 0.5).unwrap(), 30, "temporal");
    check_var(&b, &|| instance_contrast(a.as_tensor(), b.as_tensor(), 0.5).unwrap(), 30, "instance");
}

#[test]
fn hcl_gradient() {
    let a = var(&[3, 6, 4], 5);
    let b = var(&[3, 6, 4], 6);
    check_var(&a, &|| hcl_loss(a.as_tensor(), b.as_tensor(), 0.3).unwrap(), 40, "hcl wrt a");
    check_var(&b, &|| hcl_loss(a.as_tensor(), b.as_tensor(), 0.3).unwrap(), 40, "hcl wrt b");
}

fn spec(kind: EncoderKind, attention: AttentionKind) -> EncoderSpec {
    EncoderSpec {
        kind,
        input_dim: 3,
        hidden_dim: 8,
        num_layers: 2,
        kernel_size: 3,
        tcn_channels: 8,
        num_heads: 2,
        ff_dim: 0,
        attention,
        probsparse_factor: 1.0,
    }
}

fn all_specs() -> Vec<(&'static str, EncoderSpec)> {
    vec![
        ("lstm", spec(EncoderKind::Lstm, AttentionKind::Full)),
        ("tcn", spec(EncoderKind::Tcn, AttentionKind::Full)),
        ("transformer-full", spec(EncoderKind::Transformer, AttentionKind::Full)),
        ("transformer-probsparse", spec(EncoderKind::Transformer, AttentionKind::ProbSparse)),
    ]
}

#[test]
fn backbone_gradients_wrt_input_and_parameters() {
    for (name, s) in all_specs() {
        let enc = Encoder::build(&s, 11, DType::F64).unwrap();
        let x = var(&[2, 6, 3], 12);
        let w = rand_tensor(&[2, 6, 8], 13);
        let f = || (enc.encode(x.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        check_var(&x, &f, 36, &format!("{name} input"));
        for pname in enc.params.names() {
            let v = enc.params.var(&pname).unwrap();
            check_var(v, &f, 6, &format!("{name} {pname}"));
        }
    }
}

#[test]
fn moco_objective_gradients() {
    let s = spec(EncoderKind::Tcn, AttentionKind::Full);
    let enc = Encoder::build(&s, 21, DType::F64).unwrap();
    for (kind, in_batch) in [(ProjectionKind::Linear, false), (ProjectionKind::Mlp, true)] {
        let proj = ProjectionHead::build(kind, 8, 5, 22, DType::F64).unwrap();
        let x = var(&[3, 6, 3], 23);
        let mask = Tensor::from_vec(
            vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0],
            (3, 6),
            &Device::Cpu,
        )
        .unwrap();
        let draw = MocoDraw {
            view_q: x.as_tensor().clone(),
            view_k: x.as_tensor().clone(),
            q_mask: Some(mask),
            timestamps: vec![5, 2, 3],
        };
        let keys = l2_normalize(&rand_tensor(&[3, 5], 24)).unwrap();
        let queue = l2_normalize(&rand_tensor(&[7, 5], 25)).unwrap();
        let f = || moco_objective(&enc, &proj, &draw, &keys, Some(&queue), in_batch, 0.2).unwrap();
        check_var(&x, &f, 30, "moco input");
        for pname in proj.params.names() {
            check_var(proj.params.var(&pname).unwrap(), &f, 8, &format!("moco {pname}"));
        }
        for pname in enc.params.names().into_iter().take(4) {
            check_var(enc.params.var(&pname).unwrap(), &f, 6, &format!("moco encoder {pname}"));
        }
    }
}

fn erf_fd(model: &ForecastModel, window: &[f64], gold: &[f64], l: usize, m: usize, j: usize) -> Vec<f64> {
    let loss = |w: &[f64]| {
        let x = Tensor::from_vec(w.to_vec(), (1, l, m), &Device::Cpu).unwrap();
        let p = to_vec_f64(&model.forward(&x).unwrap()).unwrap();
        (0..m).map(|c| (gold[j * m + c] - p[j * m + c]).powi(2)).sum::<f64>()
    };
    (0..window.len())
        .map(|i| {
            let mut up = window.to_vec();
            up[i] += H;
            let mut down = window.to_vec();
            down[i] -= H;
            (loss(&up) - loss(&down)) / (2.0 * H)
        })
        .collect()
}

#[test]
fn erf_matches_finite_differences() {
    let (l, m, t) = (8, 2, 3);
    for kind in [EncoderKind::Lstm, EncoderKind::Tcn, EncoderKind::Transformer] {
        let s = EncoderSpec { input_dim: m, ..spec(kind, AttentionKind::Full) };
        let enc = Encoder::build(&s, 31, DType::F64).unwrap();
        let model = ForecastModel::with_mlp_head(enc, Readout::LastT, t, 32).unwrap();
        let window = rand_vec(l * m, 33);
        let gold = rand_vec(t * m, 34);
        for j in 0..t {
            let map = erf_gradient_with(|x| model.forward(x), &window, &gold, l, m, t, j, DType::F64).unwrap();
            let fd = erf_fd(&model, &window, &gold, l, m, j);
            let err = rel_err(&map.grads, &fd);
            assert!(err < TOL, "{kind:?} j={j}: {err:e}");
        }
    }
}

#[test]
fn tcn_is_exactly_causal() {
    let s = spec(EncoderKind::Tcn, AttentionKind::Full);
    let enc = Encoder::build(&s, 41, DType::F64).unwrap();
    let l = 10;
    let base = rand_vec(l * 3, 42);
    let out = to_vec_f64(&enc.encode(&Tensor::from_vec(base.clone(), (1, l, 3), &Device::Cpu).unwrap()).unwrap()).unwrap();
    for t in 0..l {
        let mut changed = base.clone();
        for v in &mut changed[t * 3..] {
            *v += 5.0;
        }
        let o = to_vec_f64(&enc.encode(&Tensor::from_vec(changed, (1, l, 3), &Device::Cpu).unwrap()).unwrap()).unwrap();
        assert_eq!(&o[..t * 8], &out[..t * 8], "future input at {t} leaked into the past");
        assert_ne!(&o[t * 8..(t + 1) * 8], &out[t * 8..(t + 1) * 8]);
    }
}

#[test]
fn tcn_erf_is_zero_beyond_receptive_field() {
    let s = EncoderSpec { input_dim: 2, num_layers: 1, kernel_size: 2, ..spec(EncoderKind::Tcn, AttentionKind::Full) };
    let enc = Encoder::build(&s, 51, DType::F64).unwrap();
    let r = enc.receptive_field().unwrap();
    assert_eq!(r, 1 + 2 + 4);
    let (l, m, t) = (16, 2, 1);
    let model = ForecastModel::with_mlp_head(enc, Readout::LastRow, t, 52).unwrap();
    let window = rand_vec(l * m, 53);
    let gold = rand_vec(t * m, 54);
    let map = erf_gradient_with(|x| model.forward(x), &window, &gold, l, m, t, 0, DType::F64).unwrap();
    for s in 0..l {
        let row = &map.grads[s * m..(s + 1) * m];
        if s + r <= l - 1 {
            assert!(row.iter().all(|&g| g == 0.0), "step {s} outside the receptive field has gradient {row:?}");
        }
    }
    assert!(map.grads[(l - 1) * m..].iter().any(|&g| g != 0.0));
}
