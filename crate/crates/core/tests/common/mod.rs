#![allow(dead_code)]

use modembed::features::{FeatureConfig, FeatureSeries, TargetSeries};
use modembed::seed::rng_from_seed;
use modembed::vae::{loss, Mode, NetworkParams};
use ndarray::Array2;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_series(rows: usize, input: usize, target: usize, seed: u64) -> (FeatureSeries, TargetSeries) {
    let mut rng = rng_from_seed(seed);
    let x = Array2::from_shape_fn((rows, input), |_| rng.random_range(-1.5..1.5));
    let y = Array2::from_shape_fn((rows, target), |_| rng.random_range(-1.5..1.5));
    (
        FeatureSeries {
            values: x,
            t_offset: 0,
            config: FeatureConfig::default(),
        },
        TargetSeries { values: y, t_offset: 0 },
    )
}

/// Central-difference gradient of the train-mode loss realized by `noise_seed`,
/// evaluated only through the public forward loss.
pub fn finite_difference(
    params: &NetworkParams,
    x: &FeatureSeries,
    y: &TargetSeries,
    beta: f64,
    noise_seed: u64,
) -> Vec<Vec<f64>> {
    let eval = |p: &NetworkParams| {
        loss(p, x, y, beta, &mut rng_from_seed(noise_seed), Mode::Train)
            .unwrap()
            .total
    };
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    let mut work = params.clone();
    for (ti, &n) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for k in 0..n {
            let orig = work.tensors()[ti][k];
            work.tensors_mut()[ti][k] = orig + FD_STEP;
            let up = eval(&work);
            work.tensors_mut()[ti][k] = orig - FD_STEP;
            let down = eval(&work);
            work.tensors_mut()[ti][k] = orig;
            g.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, FD_FLOOR)` over all parameters.
pub fn max_relative_error(analytic: &NetworkParams, numeric: &[Vec<f64>]) -> f64 {
    analytic
        .tensors()
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n.iter()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}
