//! Mini-batch Adam training over pooled per-timestep rows.

use std::collections::HashSet;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureConfig};
use crate::seed::{derive_seed, rng_from_seed};
use crate::signal_gen::Dataset;
use crate::vae::{grad_with_noise, init_params, loss_rows, Architecture, Gradients, LossBreakdown, Mode, NetworkParams, Noise};

// Stream tags for derive_seed.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta_kl: f64,
    pub batch_rows: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplies the learning rate at the end of every epoch.
    pub lr_decay: f64,
    /// Stratified holdout used by [`train`]; zero disables the holdout split.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta_kl: 1e-3,
            batch_rows: 128,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 1.0,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_rows == 0 {
            return Err(Error::config("batch_rows must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::config("beta_kl must be finite and non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config("lr_decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Architecture knobs that may differ from the defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArchOverrides {
    pub hidden_dim: Option<usize>,
    pub depth: Option<usize>,
    pub dropout_rate: Option<f64>,
}

impl ArchOverrides {
    pub fn resolve(&self, feat: &FeatureConfig) -> Architecture {
        let mut arch = Architecture::new(feat.input_dim(), feat.target_dim());
        if let Some(h) = self.hidden_dim {
            arch.hidden_dim = h;
        }
        if let Some(d) = self.depth {
            arch.depth = d;
        }
        if let Some(p) = self.dropout_rate {
            arch.dropout_rate = p;
        }
        arch
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let zeros = NetworkParams::zeros(&params.arch)?;
        Ok(Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn for_config(params: &NetworkParams, cfg: &TrainConfig) -> Result<Self> {
        Self::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut NetworkParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(ms.iter_mut())
        .zip(vs.iter_mut())
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches.
    pub train: LossBreakdown,
    /// Inference-mode loss on the holdout rows.
    pub holdout: Option<LossBreakdown>,
    pub learning_rate: f64,
}

impl EpochRecord {
    /// `epoch=<n> train=<loss> holdout=<loss>`
    pub fn progress_line(&self) -> String {
        let holdout = self
            .holdout
            .as_ref()
            .map_or_else(|| "NA".to_string(), |h| format!("{:.6}", h.total));
        format!("epoch={} train={:.6} holdout={}", self.epoch, self.train.total, holdout)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Feature rows and targets pooled over all frames, in dataset order.
pub fn extract_rows(dataset: &Dataset, feat: &FeatureConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let parts = dataset
        .frames
        .par_iter()
        .map(|f| assemble_features(f, feat))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<_> = parts.iter().map(|(x, _)| x.values.view()).collect();
    let ys: Vec<_> = parts.iter().map(|(_, y)| y.values.view()).collect();
    let x = concatenate(Axis(0), &xs).map_err(|e| Error::config(e.to_string()))?;
    let y = concatenate(Axis(0), &ys).map_err(|e| Error::config(e.to_string()))?;
    Ok((x, y))
}

/// Per-cell stratified split. Each cell of `n ≥ 2` frames sends
/// `clamp(round(fraction · n), 1, n - 1)` frames to the holdout; both parts keep
/// the original frame order.
pub fn split_holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("holdout fraction must lie strictly between 0 and 1"));
    }
    let mut held: HashSet<usize> = HashSet::new();
    for cell in dataset.cells() {
        let n = cell.frames.len();
        if n < 2 {
            return Err(Error::config(format!(
                "cell ({}, {} dB) has {n} frame(s); at least 2 are needed to split",
                cell.modulation, cell.snr_db
            )));
        }
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order = cell.frames.clone();
        let mut rng = rng_from_seed(derive_seed(
            seed,
            &[SPLIT_STREAM, cell.modulation.code() as u64, cell.snr_db.to_bits()],
        ));
        order.shuffle(&mut rng);
        held.extend(order.into_iter().take(take));
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (idx, frame) in dataset.frames.iter().enumerate() {
        if held.contains(&idx) {
            holdout.push(frame.clone());
        } else {
            train.push(frame.clone());
        }
    }
    Ok((Dataset { frames: train }, Dataset { frames: holdout }))
}

/// Trains on `train_set`, scoring `holdout` (if any) after every epoch.
pub fn train_with_holdout(
    train_set: &Dataset,
    holdout: Option<&Dataset>,
    feat: &FeatureConfig,
    arch: &Architecture,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams, TrainHistory)> {
    cfg.validate()?;
    feat.validate()?;
    arch.validate()?;
    if arch.input_dim != feat.input_dim() || arch.target_dim != feat.target_dim() {
        return Err(Error::Dimension {
            what: "architecture input width vs feature configuration",
            expected: feat.input_dim(),
            got: arch.input_dim,
        });
    }
    let (x, y) = extract_rows(train_set, feat)?;
    let held_rows = match holdout {
        Some(h) if !h.is_empty() => Some(extract_rows(h, feat)?),
        _ => None,
    };

    let rows = x.nrows();
    let batch = cfg.batch_rows.min(rows);
    let batches = rows / batch;

    let mut params = init_params(arch, derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let mut adam = AdamState::for_config(&params, cfg)?;
    let mut lr = cfg.learning_rate;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..rows).collect();

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut parts = Vec::with_capacity(batches);
        for b in 0..batches {
            let idx = &order[b * batch..(b + 1) * batch];
            let xb = x.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, &[NOISE_STREAM, epoch as u64, b as u64]));
            let noise = Noise::draw(arch, batch, &mut noise_rng);
            let (breakdown, grads) = grad_with_noise(&params, xb.view(), yb.view(), cfg.beta_kl, &noise)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;
            parts.push((breakdown, batch));
        }
        if !params.is_finite() {
            return Err(Error::config(format!("training diverged in epoch {epoch}")));
        }
        let train = LossBreakdown::weighted_mean(&parts).expect("at least one batch per epoch");
        let holdout = match &held_rows {
            Some((hx, hy)) => Some(loss_rows(
                &params,
                hx.view(),
                hy.view(),
                cfg.beta_kl,
                Mode::Infer,
                &mut rng_from_seed(0),
            )?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train,
            holdout,
            learning_rate: lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        lr *= cfg.lr_decay;
    }
    Ok((params, history))
}

/// Splits a holdout per `cfg.holdout_fraction` (when non-zero) and trains.
pub fn train(
    dataset: &Dataset,
    feat: &FeatureConfig,
    overrides: &ArchOverrides,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let arch = overrides.resolve(feat);
    if cfg.holdout_fraction > 0.0 {
        let (train_set, holdout) = split_holdout(dataset, cfg.holdout_fraction, cfg.seed)?;
        train_with_holdout(&train_set, Some(&holdout), feat, &arch, cfg, |_| {})
    } else {
        train_with_holdout(dataset, None, feat, &arch, cfg, |_| {})
    }
}
