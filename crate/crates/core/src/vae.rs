//! Per-timestep variational autoencoder with a one-dimensional latent.
//!
//! The encoder maps a feature row to `(mu, logvar)` through `depth` tanh layers;
//! the decoder maps the scalar latent through `depth` tanh layers and a linear
//! head to the predicted I/Q values at target lags `1..L`. The loss is
//!
//! ```text
//! reconstruction = mean_rows mean_lags ((î - i)² + (q̂ - q)²) / 2
//! kl             = mean_rows 0.5 (mu² + exp(logvar) - logvar - 1)
//! total          = reconstruction + beta · kl
//! ```
//!
//! Gradients are computed analytically for a fixed realization of the dropout
//! masks and reparameterization noise, which are drawn from a seeded stream in
//! a fixed order: encoder masks layer by layer (row-major), then one standard
//! normal per row, then decoder masks layer by layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSeries, TargetSeries};
use crate::seed::{rng_from_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub latent_dim: usize,
    pub target_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl Architecture {
    pub const DEFAULT_HIDDEN: usize = 256;
    pub const DEFAULT_DEPTH: usize = 3;
    pub const DEFAULT_DROPOUT: f64 = 0.2;

    /// Default architecture for the given input and target widths.
    pub fn new(input_dim: usize, target_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            depth: Self::DEFAULT_DEPTH,
            latent_dim: 1,
            target_dim,
            activation: Activation::Tanh,
            dropout_rate: Self::DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != 1 {
            return Err(Error::config("latent dimension is fixed at 1"));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.target_dim == 0 || self.depth == 0 {
            return Err(Error::config("architecture dimensions and depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_dim;
        let mut shapes = Vec::with_capacity(2 * self.depth + 3);
        shapes.push((self.input_dim, h));
        shapes.extend(std::iter::repeat_n((h, h), self.depth - 1));
        shapes.push((h, 1));
        shapes.push((h, 1));
        shapes.push((self.latent_dim, h));
        shapes.extend(std::iter::repeat_n((h, h), self.depth - 1));
        shapes.push((h, self.target_dim));
        shapes
    }
}

/// Affine layer `x · weight + bias`, with `weight` shaped fan_in × fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight);
        out += &self.bias;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub encoder: Vec<Dense>,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Vec<Dense>,
    pub output_head: Dense,
}

/// Gradients share the parameter layout.
pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect::<Vec<_>>()
            .into_iter();
        let encoder = layers.by_ref().take(arch.depth).collect();
        let mu_head = layers.next().expect("mu head");
        let logvar_head = layers.next().expect("logvar head");
        let decoder = layers.by_ref().take(arch.depth).collect();
        let output_head = layers.next().expect("output head");
        Ok(Self {
            arch: *arch,
            encoder,
            mu_head,
            logvar_head,
            decoder,
            output_head,
        })
    }

    /// Layers in parameter order: encoder, mu head, logvar head, decoder, output head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(&self.decoder)
            .chain([&self.output_head])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(self.decoder.iter_mut())
            .chain([&mut self.output_head])
    }

    /// Flat tensors in the fixed serialization order: for each layer, weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Errors unless `other` has the same architecture.
    pub fn check_congruent(&self, other: &NetworkParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::config("parameter sets have different architectures"));
        }
        for (a, b) in self.tensors().iter().zip(other.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Dimension {
                    what: "parameter tensor",
                    expected: a.len(),
                    got: b.len(),
                });
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    let mut params = NetworkParams::zeros(arch)?;
    let mut rng = rng_from_seed(seed);
    for layer in params.layers_mut() {
        let (fan_in, fan_out) = layer.weight.dim();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        layer
            .weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-limit..limit));
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One realization of the stochastic parts of a training pass.
#[derive(Debug, Clone)]
pub struct Noise {
    encoder_masks: Vec<Option<Array2<f64>>>,
    eps: Option<Array1<f64>>,
    decoder_masks: Vec<Option<Array2<f64>>>,
}

impl Noise {
    /// No dropout and `z = mu`.
    pub fn inference(arch: &Architecture) -> Self {
        Self {
            encoder_masks: vec![None; arch.depth],
            eps: None,
            decoder_masks: vec![None; arch.depth],
        }
    }

    pub fn draw<R: Rng + ?Sized>(arch: &Architecture, rows: usize, rng: &mut R) -> Self {
        let encoder_masks = (0..arch.depth).map(|_| draw_mask(arch, rows, rng)).collect();
        let eps = Array1::from_shape_fn(rows, |_| rng.sample::<f64, _>(StandardNormal));
        let decoder_masks = (0..arch.depth).map(|_| draw_mask(arch, rows, rng)).collect();
        Self {
            encoder_masks,
            eps: Some(eps),
            decoder_masks,
        }
    }

    fn encoder_only<R: Rng + ?Sized>(arch: &Architecture, rows: usize, rng: &mut R) -> Self {
        Self {
            encoder_masks: (0..arch.depth).map(|_| draw_mask(arch, rows, rng)).collect(),
            eps: None,
            decoder_masks: vec![None; arch.depth],
        }
    }

    fn decoder_only<R: Rng + ?Sized>(arch: &Architecture, rows: usize, rng: &mut R) -> Self {
        Self {
            encoder_masks: vec![None; arch.depth],
            eps: None,
            decoder_masks: (0..arch.depth).map(|_| draw_mask(arch, rows, rng)).collect(),
        }
    }
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - p)`.
fn draw_mask<R: Rng + ?Sized>(arch: &Architecture, rows: usize, rng: &mut R) -> Option<Array2<f64>> {
    let p = arch.dropout_rate;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, arch.hidden_dim), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Activations retained for the backward pass.
struct Trace {
    /// Inputs to each encoder layer (the first is the feature batch).
    enc_inputs: Vec<Array2<f64>>,
    /// `tanh` outputs of each encoder layer before dropout.
    enc_tanh: Vec<Array2<f64>>,
    enc_last: Array2<f64>,
    mu: Array1<f64>,
    logvar: Array1<f64>,
    z: Array1<f64>,
    dec_inputs: Vec<Array2<f64>>,
    dec_tanh: Vec<Array2<f64>>,
    dec_last: Array2<f64>,
    output: Array2<f64>,
}

fn hidden_stack(
    layers: &[Dense],
    masks: &[Option<Array2<f64>>],
    input: Array2<f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut tanhs = Vec::with_capacity(layers.len());
    let mut h = input;
    for (layer, mask) in layers.iter().zip(masks) {
        let mut t = layer.forward(&h.view());
        t.mapv_inplace(f64::tanh);
        let next = match mask {
            Some(m) => &t * m,
            None => t.clone(),
        };
        inputs.push(h);
        tanhs.push(t);
        h = next;
    }
    (inputs, tanhs, h)
}

fn forward(params: &NetworkParams, x: ArrayView2<f64>, noise: &Noise) -> Trace {
    let (enc_inputs, enc_tanh, enc_last) = hidden_stack(&params.encoder, &noise.encoder_masks, x.to_owned());
    let mu = params.mu_head.forward(&enc_last.view()).column(0).to_owned();
    let logvar = params.logvar_head.forward(&enc_last.view()).column(0).to_owned();
    let z = match &noise.eps {
        Some(eps) => &mu + &(logvar.mapv(|lv| (0.5 * lv).exp()) * eps),
        None => mu.clone(),
    };
    let z_col = z.clone().insert_axis(Axis(1));
    let (dec_inputs, dec_tanh, dec_last) = hidden_stack(&params.decoder, &noise.decoder_masks, z_col);
    let output = params.output_head.forward(&dec_last.view());
    Trace {
        enc_inputs,
        enc_tanh,
        enc_last,
        mu,
        logvar,
        z,
        dec_inputs,
        dec_tanh,
        dec_last,
        output,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub per_lag: Vec<f64>,
}

impl LossBreakdown {
    /// Row-weighted average of several breakdowns.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> Option<LossBreakdown> {
        let rows: usize = parts.iter().map(|(_, n)| n).sum();
        let first = parts.first()?;
        if rows == 0 {
            return None;
        }
        let w = |n: usize| n as f64 / rows as f64;
        let mut out = LossBreakdown {
            total: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
            per_lag: vec![0.0; first.0.per_lag.len()],
        };
        for (b, n) in parts {
            out.total += w(*n) * b.total;
            out.reconstruction += w(*n) * b.reconstruction;
            out.kl += w(*n) * b.kl;
            for (acc, v) in out.per_lag.iter_mut().zip(&b.per_lag) {
                *acc += w(*n) * v;
            }
        }
        Some(out)
    }
}

/// Loss for explicit decoder outputs. Exposed so callers can score arbitrary
/// predictions (for instance the targets themselves).
pub fn loss_from_outputs(
    output: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    mu: &Array1<f64>,
    logvar: &Array1<f64>,
    beta_kl: f64,
) -> Result<LossBreakdown> {
    if output.dim() != targets.dim() {
        return Err(Error::Dimension {
            what: "prediction/target rows",
            expected: targets.nrows(),
            got: output.nrows(),
        });
    }
    let rows = targets.nrows();
    if rows == 0 || mu.len() != rows || logvar.len() != rows {
        return Err(Error::Empty("loss needs at least one aligned row".into()));
    }
    let lags = targets.ncols() / 2;
    let mut per_lag = vec![0.0; lags];
    for (out_row, tgt_row) in output.rows().into_iter().zip(targets.rows()) {
        for (l, acc) in per_lag.iter_mut().enumerate() {
            let di = out_row[l] - tgt_row[l];
            let dq = out_row[lags + l] - tgt_row[lags + l];
            *acc += 0.5 * (di * di + dq * dq);
        }
    }
    per_lag.iter_mut().for_each(|v| *v /= rows as f64);
    let reconstruction = per_lag.iter().sum::<f64>() / lags as f64;
    let kl = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| kl_term(*m, *lv))
        .sum::<f64>()
        / rows as f64;
    Ok(LossBreakdown {
        total: reconstruction + beta_kl * kl,
        reconstruction,
        kl,
        per_lag,
    })
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`.
pub fn kl_term(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - logvar - 1.0)
}

fn check_batch(params: &NetworkParams, x: &ArrayView2<f64>, y: Option<&ArrayView2<f64>>) -> Result<()> {
    let arch = &params.arch;
    if x.ncols() != arch.input_dim {
        return Err(Error::Dimension {
            what: "feature width",
            expected: arch.input_dim,
            got: x.ncols(),
        });
    }
    if let Some(y) = y {
        if y.ncols() != arch.target_dim {
            return Err(Error::Dimension {
                what: "target width",
                expected: arch.target_dim,
                got: y.ncols(),
            });
        }
        if y.nrows() != x.nrows() {
            return Err(Error::Dimension {
                what: "target rows",
                expected: x.nrows(),
                got: y.nrows(),
            });
        }
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("batch has no rows".into()));
    }
    Ok(())
}

/// Encodes one feature row.
pub fn encode<R: Rng + ?Sized>(params: &NetworkParams, row: &[f64], mode: Mode, rng: &mut R) -> Result<(f64, f64)> {
    let x = ArrayView2::from_shape((1, row.len()), row).expect("row view");
    check_batch(params, &x, None)?;
    let noise = match mode {
        Mode::Train => Noise::encoder_only(&params.arch, 1, rng),
        Mode::Infer => Noise::inference(&params.arch),
    };
    let (_, _, last) = hidden_stack(&params.encoder, &noise.encoder_masks, x.to_owned());
    let mu = params.mu_head.forward(&last.view())[[0, 0]];
    let logvar = params.logvar_head.forward(&last.view())[[0, 0]];
    Ok((mu, logvar))
}

/// Deterministic encoder means for a batch of rows.
pub fn encode_mean(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_batch(params, &x, None)?;
    let noise = Noise::inference(&params.arch);
    let (_, _, last) = hidden_stack(&params.encoder, &noise.encoder_masks, x.to_owned());
    Ok(params.mu_head.forward(&last.view()).column(0).to_owned())
}

/// `z = mu + exp(logvar / 2) · ε` with `ε ~ N(0, 1)` drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(mu: f64, logvar: f64, rng: &mut R) -> f64 {
    let eps: f64 = rng.sample(StandardNormal);
    reparameterize_with(mu, logvar, eps)
}

pub fn reparameterize_with(mu: f64, logvar: f64, eps: f64) -> f64 {
    mu + (0.5 * logvar).exp() * eps
}

/// Decodes a latent value into `[î_{t+1}..î_{t+L}, q̂_{t+1}..q̂_{t+L}]`.
pub fn decode<R: Rng + ?Sized>(params: &NetworkParams, z: f64, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    if !z.is_finite() {
        return Err(Error::config("latent value must be finite"));
    }
    let noise = match mode {
        Mode::Train => Noise::decoder_only(&params.arch, 1, rng),
        Mode::Infer => Noise::inference(&params.arch),
    };
    let (_, _, last) = hidden_stack(&params.decoder, &noise.decoder_masks, Array2::from_elem((1, 1), z));
    Ok(params.output_head.forward(&last.view()).row(0).to_vec())
}

fn check_series(features: &FeatureSeries, targets: &TargetSeries) -> Result<()> {
    if features.values.nrows() != targets.values.nrows() || features.t_offset != targets.t_offset {
        return Err(Error::Dimension {
            what: "feature/target alignment",
            expected: features.values.nrows(),
            got: targets.values.nrows(),
        });
    }
    Ok(())
}

/// Loss over rows. Train mode draws dropout masks and ε from `rng`; infer mode uses `z = mu`.
pub fn loss_rows<R: Rng + ?Sized>(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    beta_kl: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<LossBreakdown> {
    check_batch(params, &x, Some(&y))?;
    check_beta(beta_kl)?;
    let noise = match mode {
        Mode::Train => Noise::draw(&params.arch, x.nrows(), rng),
        Mode::Infer => Noise::inference(&params.arch),
    };
    let trace = forward(params, x, &noise);
    loss_from_outputs(trace.output.view(), y, &trace.mu, &trace.logvar, beta_kl)
}

pub fn loss<R: Rng + ?Sized>(
    params: &NetworkParams,
    features: &FeatureSeries,
    targets: &TargetSeries,
    beta_kl: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<LossBreakdown> {
    check_series(features, targets)?;
    loss_rows(params, features.values.view(), targets.values.view(), beta_kl, mode, rng)
}

fn check_beta(beta_kl: f64) -> Result<()> {
    if !(beta_kl >= 0.0 && beta_kl.is_finite()) {
        return Err(Error::config("beta_kl must be finite and non-negative"));
    }
    Ok(())
}

/// Loss and its exact gradient for a given noise realization.
pub fn grad_with_noise(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    beta_kl: f64,
    noise: &Noise,
) -> Result<(LossBreakdown, Gradients)> {
    check_batch(params, &x, Some(&y))?;
    check_beta(beta_kl)?;
    let trace = forward(params, x, noise);
    let breakdown = loss_from_outputs(trace.output.view(), y, &trace.mu, &trace.logvar, beta_kl)?;

    let rows = x.nrows() as f64;
    let lags = (params.arch.target_dim / 2) as f64;
    let mut grads = NetworkParams::zeros(&params.arch)?;

    // d total / d output
    let d_out = (&trace.output - &y) / (lags * rows);
    let mut d_hidden = backprop_dense(&params.output_head, &mut grads.output_head, &trace.dec_last, &d_out);
    d_hidden = backprop_stack(
        &params.decoder,
        &mut grads.decoder,
        &trace.dec_inputs,
        &trace.dec_tanh,
        &noise.decoder_masks,
        d_hidden,
    );
    let d_z = d_hidden.column(0).to_owned();

    let mut d_mu = d_z.clone();
    let mut d_logvar = Array1::zeros(d_z.len());
    for r in 0..d_z.len() {
        let (mu, lv) = (trace.mu[r], trace.logvar[r]);
        d_mu[r] += beta_kl * mu / rows;
        d_logvar[r] = beta_kl * 0.5 * (lv.exp() - 1.0) / rows;
        if let Some(eps) = &noise.eps {
            d_logvar[r] += d_z[r] * eps[r] * 0.5 * (0.5 * lv).exp();
        }
    }
    let d_mu = d_mu.insert_axis(Axis(1));
    let d_logvar = d_logvar.insert_axis(Axis(1));
    let mut d_enc = backprop_dense(&params.mu_head, &mut grads.mu_head, &trace.enc_last, &d_mu);
    d_enc += &backprop_dense(&params.logvar_head, &mut grads.logvar_head, &trace.enc_last, &d_logvar);
    backprop_stack(
        &params.encoder,
        &mut grads.encoder,
        &trace.enc_inputs,
        &trace.enc_tanh,
        &noise.encoder_masks,
        d_enc,
    );
    debug_assert!(trace.z.len() == x.nrows());
    Ok((breakdown, grads))
}

/// Accumulates the parameter gradient of an affine layer and returns the input gradient.
fn backprop_dense(layer: &Dense, grad: &mut Dense, input: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    general_mat_mul(1.0, &input.t(), d_out, 0.0, &mut grad.weight);
    grad.bias.assign(&d_out.sum_axis(Axis(0)));
    d_out.dot(&layer.weight.t())
}

fn backprop_stack(
    layers: &[Dense],
    grads: &mut [Dense],
    inputs: &[Array2<f64>],
    tanhs: &[Array2<f64>],
    masks: &[Option<Array2<f64>>],
    mut d_h: Array2<f64>,
) -> Array2<f64> {
    for k in (0..layers.len()).rev() {
        if let Some(m) = &masks[k] {
            d_h *= m;
        }
        d_h.zip_mut_with(&tanhs[k], |d, &t| *d *= 1.0 - t * t);
        d_h = backprop_dense(&layers[k], &mut grads[k], &inputs[k], &d_h);
    }
    d_h
}

/// Gradient of the stochastic training loss realized by `seed`.
pub fn grad(
    params: &NetworkParams,
    features: &FeatureSeries,
    targets: &TargetSeries,
    beta_kl: f64,
    seed: u64,
) -> Result<(LossBreakdown, Gradients)> {
    check_series(features, targets)?;
    let mut rng: SeededRng = rng_from_seed(seed);
    let noise = Noise::draw(&params.arch, features.values.nrows(), &mut rng);
    grad_with_noise(params, features.values.view(), targets.values.view(), beta_kl, &noise)
}
