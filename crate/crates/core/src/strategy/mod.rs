//! Training drivers: end-to-end, SSCL pretraining, frozen heads and
//! fine-tuning.

mod head;
mod optim;

pub use head::{ridge_closed_form, tensor_to_matrix, ForecastModel, Head, MlpHead, Readout, RidgeHead};
pub use optim::{cosine_lr, learning_rate, Adam, AdamConfig, Scheduler};

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Var};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::backbone::{Encoder, EncoderSpec};
use crate::data::{make_windows, PreparedData, WindowSet};
use crate::eval::evaluate_windows;
use crate::loss::{combined_loss, mse_loss, LossChoice, LossConfig, SsclAlgorithm, SsclState};
use crate::nn::{scalar_f64, to_vec_f64};
use crate::{Error, Result};

const HEAD_SEED_SALT: u64 = 0x4ead_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler: Scheduler,
    pub pretrain_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub readout: Readout,
    /// Caps optimizer steps per epoch; `0` uses every training window.
    pub max_batches_per_epoch: usize,
    /// Caps the windows used to fit ridge heads; `0` uses all.
    pub max_ridge_windows: usize,
    pub ridge_alphas: Vec<f64>,
    pub divergence_factor: f64,
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            epochs: 30,
            early_stop_patience: 3,
            scheduler: Scheduler::Constant,
            pretrain_iters: 600,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            readout: Readout::LastT,
            max_batches_per_epoch: 0,
            max_ridge_windows: 0,
            ridge_alphas: vec![0.01, 0.1, 1.0, 10.0],
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("train.peak_lr", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        if self.ridge_alphas.is_empty() || self.ridge_alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("train.ridge_alphas", "need at least one penalty ≥ 0"));
        }
        Ok(())
    }

    /// The schedule actually used for an objective: MoCo2 always runs cosine.
    pub fn scheduler_for(&self, sscl: Option<SsclAlgorithm>) -> Scheduler {
        if sscl.is_some_and(|a| a.uses_moco2()) {
            Scheduler::Cosine
        } else {
            self.scheduler
        }
    }
}

/// Train/val/test windows of one `(dataset, horizon)` cell.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl TaskData {
    pub fn from_prepared(p: &PreparedData, lookback: usize, horizon: usize) -> Result<Self> {
        Ok(Self {
            train: make_windows(&p.splits.train, lookback, horizon, 1)?,
            val: make_windows(&p.splits.val, lookback, horizon, 1)?,
            test: make_windows(&p.splits.test, lookback, horizon, 1)?,
        })
    }

    pub fn horizon(&self) -> usize {
        self.train.horizon
    }

    pub fn n_features(&self) -> usize {
        self.train.n_features()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub mse: Option<f64>,
    pub sscl: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_sscl: Option<f64>,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub optimizer_steps: usize,
    pub lambda: f64,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    fn new(lambda: f64) -> Self {
        Self {
            epochs: Vec::new(),
            steps: Vec::new(),
            best_epoch: None,
            best_val_mse: None,
            optimizer_steps: 0,
            lambda,
            status: RunStatus::Converged,
            wall_clock_secs: 0.0,
            checkpoint: None,
        }
    }

    /// `epoch,train_mse,train_sscl,val_mse,lr`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mse", "train_sscl", "val_mse", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_mse.to_string(),
                e.train_sscl.map(|v| v.to_string()).unwrap_or_default(),
                e.val_mse.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aborts on a non-finite loss, or once the loss has stayed above
/// `factor ×` its first value for `window` consecutive steps.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    factor: f64,
    window: usize,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new(factor: f64, window: usize) -> Self {
        Self { initial: None, factor, window, streak: 0 }
    }

    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let init = *self.initial.get_or_insert(loss);
        if loss > self.factor * init.abs() {
            self.streak += 1;
            if self.streak >= self.window {
                return Err(Error::Divergence { step, loss });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

fn head_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(HEAD_SEED_SALT)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn batches_per_epoch(set: &WindowSet, cfg: &TrainConfig) -> usize {
    let all = set.len().div_ceil(cfg.batch_size);
    if cfg.max_batches_per_epoch == 0 {
        all
    } else {
        all.min(cfg.max_batches_per_epoch)
    }
}

/// Shared MSE training loop. With `train_encoder == false` only the head
/// receives updates and encoder features are detached.
fn supervised_loop(
    model: &mut ForecastModel,
    train_encoder: bool,
    mut sscl: Option<&mut SsclState>,
    lambda: f64,
    scheduler: Scheduler,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let dtype = model.encoder.dtype();
    let mut vars: Vec<Var> = model.head.trainable();
    if train_encoder {
        vars.extend(model.encoder.params.vars());
    }
    if let Some(s) = sscl.as_deref() {
        vars.extend(s.trainable());
    }
    let mut opt = Adam::new(vars, cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let per_epoch = batches_per_epoch(&data.train, cfg);
    let total_steps = per_epoch * cfg.epochs;
    let mut guard = DivergenceGuard::new(cfg.divergence_factor, cfg.divergence_window);
    let mut report = TrainReport::new(lambda);
    let mut best = model.deep_clone()?;
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let order = shuffled(data.train.len(), &mut rng);
        let (mut mse_sum, mut sscl_sum, mut n) = (0.0, 0.0, 0usize);
        let mut lr = cfg.peak_lr;
        for chunk in order.chunks(cfg.batch_size).take(per_epoch) {
            lr = learning_rate(scheduler, cfg.peak_lr, step, total_steps);
            let batch = data.train.batch(chunk, dtype)?;
            let pred = if train_encoder {
                model.forward(&batch.inputs)?
            } else {
                model.forward_features(&model.features(&batch.inputs)?.detach())?
            };
            let mse = mse_loss(&pred, &batch.targets)?;
            let (total, sscl_val) = match sscl.as_deref_mut() {
                Some(s) if lambda != 0.0 => {
                    let aux = s.loss(&model.encoder, &batch.inputs)?;
                    let v = scalar_f64(&aux)?;
                    (combined_loss(&mse, &aux, lambda)?, Some(v))
                }
                _ => (mse.clone(), None),
            };
            let total_val = scalar_f64(&total)?;
            let mse_val = scalar_f64(&mse)?;
            if let Err(e) = guard.check(step, total_val) {
                log::warn!("{e}; keeping the best checkpoint so far");
                report.status = RunStatus::Diverged;
                break 'epochs;
            }
            opt.step(&total.backward()?, lr)?;
            report.steps.push(StepLog { step, total: total_val, mse: Some(mse_val), sscl: sscl_val, lr });
            mse_sum += mse_val;
            sscl_sum += sscl_val.unwrap_or(0.0);
            n += 1;
            step += 1;
        }
        let val = evaluate_windows(model, &data.val, cfg.batch_size.max(64), None)?.mse;
        let train_mse = mse_sum / n.max(1) as f64;
        let train_sscl = (sscl.is_some() && lambda != 0.0).then(|| sscl_sum / n.max(1) as f64);
        log::info!("epoch {epoch}: train_mse {train_mse:.5} val_mse {val:.5} lr {lr:.2e}");
        report.epochs.push(EpochLog { epoch, train_mse, train_sscl, val_mse: val, lr });
        if val < best_val {
            best_val = val;
            best = model.deep_clone()?;
            report.best_epoch = Some(epoch);
            report.best_val_mse = Some(val);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stop_patience {
                report.status = RunStatus::EarlyStopped;
                break;
            }
        }
    }
    *model = best;
    report.optimizer_steps = opt.steps();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Joint training of encoder and MLP head on `mse + λ·sscl`.
pub fn train_end_to_end(
    spec: &EncoderSpec,
    loss: LossChoice,
    data: &TaskData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    policy: &AugmentPolicy,
    dtype: DType,
) -> Result<(ForecastModel, TrainReport)> {
    let encoder = Encoder::build(spec, cfg.seed, dtype)?;
    let mut model = ForecastModel::with_mlp_head(encoder, cfg.readout, data.horizon(), head_seed(cfg.seed))?;
    let algorithm = loss.sscl();
    let mut state = match algorithm {
        Some(a) => Some(SsclState::new(a, loss_cfg, policy, &model.encoder, cfg.seed)?),
        None => None,
    };
    let lambda = if algorithm.is_some() { loss_cfg.lambda } else { 0.0 };
    let sched = cfg.scheduler_for(algorithm);
    let report = supervised_loop(&mut model, true, state.as_mut(), lambda, sched, data, cfg)?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub algorithm: SsclAlgorithm,
    pub steps: Vec<StepLog>,
    pub optimizer_steps: usize,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

/// Exactly `cfg.pretrain_iters` optimizer steps on the SSCL objective alone,
/// cycling through reshuffled training windows.
pub fn pretrain_sscl(
    spec: &EncoderSpec,
    algorithm: SsclAlgorithm,
    train: &WindowSet,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    policy: &AugmentPolicy,
    dtype: DType,
) -> Result<(Encoder, PretrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let encoder = Encoder::build(spec, cfg.seed, dtype)?;
    let mut report = PretrainReport {
        algorithm,
        steps: Vec::new(),
        optimizer_steps: 0,
        status: RunStatus::Converged,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    if cfg.pretrain_iters == 0 {
        return Ok((encoder, report));
    }
    let mut state = SsclState::new(algorithm, loss_cfg, policy, &encoder, cfg.seed)?;
    let mut vars = encoder.params.vars();
    vars.extend(state.trainable());
    let mut opt = Adam::new(vars, cfg.adam)?;
    let sched = cfg.scheduler_for(Some(algorithm));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let mut guard = DivergenceGuard::new(cfg.divergence_factor, cfg.divergence_window);
    let mut queue: Vec<usize> = Vec::new();
    for step in 0..cfg.pretrain_iters {
        if queue.len() < cfg.batch_size.min(train.len()) {
            queue = shuffled(train.len(), &mut rng);
        }
        let take = cfg.batch_size.min(queue.len());
        let idx: Vec<usize> = queue.drain(..take).collect();
        let batch = train.batch(&idx, dtype)?;
        let lr = learning_rate(sched, cfg.peak_lr, step, cfg.pretrain_iters);
        let loss = state.loss(&encoder, &batch.inputs)?;
        let v = scalar_f64(&loss)?;
        if let Err(e) = guard.check(step, v) {
            log::warn!("{e}; stopping pretraining");
            report.status = RunStatus::Diverged;
            break;
        }
        opt.step(&loss.backward()?, lr)?;
        report.steps.push(StepLog { step, total: v, mse: None, sscl: Some(v), lr });
    }
    report.optimizer_steps = opt.steps();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((encoder, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeReport {
    pub alpha: f64,
    pub val_mse: Vec<(f64, f64)>,
}

fn ridge_design(model: &ForecastModel, set: &WindowSet, cap: usize, batch: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = set.len();
    let idx: Vec<usize> = if cap == 0 || cap >= n {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    };
    let dtype = model.encoder.dtype();
    let (mut zs, mut ys) = (Vec::new(), Vec::new());
    let (mut f, mut o) = (0, 0);
    for chunk in idx.chunks(batch.max(1)) {
        let b = set.batch(chunk, dtype)?;
        let z = model.features(&b.inputs)?.detach();
        f = z.dim(1)?;
        o = set.horizon * set.n_features();
        zs.extend(to_vec_f64(&z)?);
        ys.extend(to_vec_f64(&b.targets)?);
    }
    Ok((DMatrix::from_row_slice(idx.len(), f, &zs), DMatrix::from_row_slice(idx.len(), o, &ys)))
}

/// Closed-form ridge head on frozen encoder features, with the penalty
/// chosen by validation MSE over `cfg.ridge_alphas`.
pub fn fit_frozen_ridge(encoder: &Encoder, data: &TaskData, cfg: &TrainConfig) -> Result<(ForecastModel, RidgeReport)> {
    cfg.validate()?;
    let before = encoder.params.checksum()?;
    let horizon = data.horizon();
    let m = data.n_features();
    let f = cfg.readout.feature_dim(encoder.output_dim(), horizon);
    let mut model = ForecastModel {
        encoder: encoder.clone(),
        head: Head::Ridge(RidgeHead::zeros(f, horizon * m)),
        readout: cfg.readout,
        horizon,
        n_features: m,
    };
    let (z, y) = ridge_design(&model, &data.train, cfg.max_ridge_windows, cfg.batch_size.max(64))?;
    let (zv, yv) = ridge_design(&model, &data.val, cfg.max_ridge_windows, cfg.batch_size.max(64))?;
    let mut best: Option<(f64, RidgeHead)> = None;
    let mut scores = Vec::new();
    for &alpha in &cfg.ridge_alphas {
        let (w, b) = ridge_closed_form(&z, &y, alpha, true)?;
        let mut pred = &zv * &w;
        for mut r in pred.row_iter_mut() {
            for (v, bi) in r.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let mse = (pred - &yv).iter().map(|e| e * e).sum::<f64>() / yv.len() as f64;
        scores.push((alpha, mse));
        if best.as_ref().is_none_or(|(s, _)| mse < *s) {
            best = Some((mse, RidgeHead { weights: w, bias: b, alpha }));
        }
    }
    let (_, head) = best.expect("at least one alpha");
    let alpha = head.alpha;
    model.head = Head::Ridge(head);
    debug_assert_eq!(before, encoder.params.checksum()?);
    Ok((model, RidgeReport { alpha, val_mse: scores }))
}

/// MLP head trained with MSE on a frozen encoder.
pub fn train_frozen_mlp(encoder: &Encoder, data: &TaskData, cfg: &TrainConfig) -> Result<(ForecastModel, TrainReport)> {
    let mut model = ForecastModel::with_mlp_head(encoder.clone(), cfg.readout, data.horizon(), head_seed(cfg.seed))?;
    let report = supervised_loop(&mut model, false, None, 0.0, cfg.scheduler, data, cfg)?;
    Ok((model, report))
}

/// Fresh MLP head on a copy of `pretrained`, both trained with MSE.
pub fn finetune(
    pretrained: &Encoder,
    requested: Option<&EncoderSpec>,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    if let Some(spec) = requested {
        if spec != &pretrained.spec {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {:?} encoder (d={}, layers={}), requested {:?} (d={}, layers={})",
                pretrained.spec.kind,
                pretrained.spec.hidden_dim,
                pretrained.spec.num_layers,
                spec.kind,
                spec.hidden_dim,
                spec.num_layers
            )));
        }
    }
    let encoder = Encoder { spec: pretrained.spec.clone(), params: pretrained.params.deep_clone()? };
    let mut model = ForecastModel::with_mlp_head(encoder, cfg.readout, data.horizon(), head_seed(cfg.seed))?;
    let report = supervised_loop(&mut model, true, None, 0.0, cfg.scheduler, data, cfg)?;
    Ok((model, report))
}

/// Mean squared error of `model` on the windows of `set`.
pub fn validation_mse(model: &ForecastModel, set: &WindowSet) -> Result<f64> {
    Ok(evaluate_windows(model, set, 64, None)?.mse)
}
