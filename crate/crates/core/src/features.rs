//! Per-timestep feature vectors and multi-lag targets.
//!
//! Row layout (version [`FEATURE_LAYOUT_VERSION`]):
//!
//! ```text
//! [ i_t, q_t | i_t - i_{t-1} .. i_t - i_{t-K} | q_t - q_{t-1} .. q_t - q_{t-K}
//!            | r_i(1) .. r_i(K) | r_q(1) .. r_q(K) ]      (correlations optional)
//! ```
//!
//! Targets hold `[i_{t+1} .. i_{t+L}, q_{t+1} .. q_{t+L}]`. Valid rows are
//! `t ∈ [W-1+K, T-1-L]`; edge timesteps are dropped, never padded.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_gen::IqFrame;

pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// Window energies below this are treated as silent and give a zero correlation.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub lag_count: usize,
    pub include_correlations: bool,
    pub corr_window: usize,
    pub target_lag_count: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            lag_count: 8,
            include_correlations: true,
            corr_window: 16,
            target_lag_count: 8,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag_count < 1 {
            return Err(Error::config("lag count must be at least 1"));
        }
        if self.corr_window < 2 {
            return Err(Error::config("correlation window must be at least 2"));
        }
        if self.target_lag_count < 1 {
            return Err(Error::config("target lag count must be at least 1"));
        }
        Ok(())
    }

    /// `N = 2 + 2K (+ 2K with correlations)`.
    pub fn input_dim(&self) -> usize {
        let k = self.lag_count;
        2 + 2 * k + if self.include_correlations { 2 * k } else { 0 }
    }

    pub fn target_dim(&self) -> usize {
        2 * self.target_lag_count
    }

    /// First valid timestep, `W - 1 + K`.
    pub fn first_valid(&self) -> usize {
        self.corr_window - 1 + self.lag_count
    }

    pub fn min_frame_len(&self) -> usize {
        self.first_valid() + self.target_lag_count + 1
    }

    /// `T - (W - 1 + K) - L`, or zero when the frame is too short.
    pub fn valid_rows(&self, frame_len: usize) -> usize {
        (frame_len + 1).saturating_sub(self.min_frame_len())
    }
}

/// Rows of a per-timestep extractor; row `r` belongs to frame timestep `first_t + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedMatrix {
    pub first_t: usize,
    pub values: Array2<f64>,
}

impl LaggedMatrix {
    pub fn row_for(&self, t: usize) -> Option<ndarray::ArrayView1<'_, f64>> {
        let r = t.checked_sub(self.first_t)?;
        (r < self.values.nrows()).then(|| self.values.row(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub values: Array2<f64>,
    pub t_offset: usize,
    pub config: FeatureConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSeries {
    pub values: Array2<f64>,
    pub t_offset: usize,
}

/// Row `t` (for `t ≥ K`) holds `i_t - i_{t-l}` for `l = 1..K`, then the same for `q`.
pub fn lag_differences(frame: &IqFrame, lags: usize) -> Result<LaggedMatrix> {
    let len = frame.len();
    if lags == 0 {
        return Err(Error::config("lag count must be at least 1"));
    }
    if lags >= len {
        return Err(Error::FrameTooShort {
            len,
            min: lags + 1,
            what: "lag differences",
        });
    }
    let rows = len - lags;
    let mut values = Array2::zeros((rows, 2 * lags));
    for (r, mut row) in values.rows_mut().into_iter().enumerate() {
        let t = r + lags;
        for l in 1..=lags {
            row[l - 1] = frame.i[t] - frame.i[t - l];
            row[lags + l - 1] = frame.q[t] - frame.q[t - l];
        }
    }
    Ok(LaggedMatrix { first_t: lags, values })
}

fn window_correlation(channel: &[f64], t: usize, lag: usize, window: usize) -> f64 {
    let mut cross = 0.0;
    let mut energy_now = 0.0;
    let mut energy_lag = 0.0;
    for s in t + 1 - window..=t {
        let (a, b) = (channel[s], channel[s - lag]);
        cross += a * b;
        energy_now += a * a;
        energy_lag += b * b;
    }
    if energy_now < ENERGY_FLOOR || energy_lag < ENERGY_FLOOR {
        return 0.0;
    }
    (cross / (energy_now * energy_lag).sqrt()).clamp(-1.0, 1.0)
}

/// Trailing-window normalized lagged products, per channel, for `t ≥ W - 1 + K`.
/// Columns: lags `1..K` for `i`, then lags `1..K` for `q`.
pub fn windowed_autocorrelation(frame: &IqFrame, lags: usize, window: usize) -> Result<LaggedMatrix> {
    let len = frame.len();
    if lags == 0 || window < 2 {
        return Err(Error::config("correlation needs lag ≥ 1 and window ≥ 2"));
    }
    let first_t = window - 1 + lags;
    if len <= first_t {
        return Err(Error::FrameTooShort {
            len,
            min: window + lags,
            what: "windowed autocorrelation",
        });
    }
    let rows = len - first_t;
    let mut values = Array2::zeros((rows, 2 * lags));
    for (r, mut row) in values.rows_mut().into_iter().enumerate() {
        let t = first_t + r;
        for l in 1..=lags {
            row[l - 1] = window_correlation(&frame.i, t, l, window);
            row[lags + l - 1] = window_correlation(&frame.q, t, l, window);
        }
    }
    Ok(LaggedMatrix { first_t, values })
}

/// Builds the encoder inputs and the aligned decoder targets for one frame.
pub fn assemble_features(frame: &IqFrame, cfg: &FeatureConfig) -> Result<(FeatureSeries, TargetSeries)> {
    cfg.validate()?;
    let len = frame.len();
    let min = cfg.min_frame_len();
    if len < min {
        return Err(Error::FrameTooShort {
            len,
            min,
            what: "feature extraction",
        });
    }
    let k = cfg.lag_count;
    let horizon = cfg.target_lag_count;
    let t0 = cfg.first_valid();
    let rows = cfg.valid_rows(len);

    let diffs = lag_differences(frame, k)?;
    let diffs = diffs.values.slice(s![t0 - diffs.first_t..t0 - diffs.first_t + rows, ..]);

    let mut features = Array2::zeros((rows, cfg.input_dim()));
    for r in 0..rows {
        features[[r, 0]] = frame.i[t0 + r];
        features[[r, 1]] = frame.q[t0 + r];
    }
    features.slice_mut(s![.., 2..2 + 2 * k]).assign(&diffs);
    if cfg.include_correlations {
        let corr = windowed_autocorrelation(frame, k, cfg.corr_window)?;
        debug_assert_eq!(corr.first_t, t0);
        features
            .slice_mut(s![.., 2 + 2 * k..])
            .assign(&corr.values.slice(s![..rows, ..]));
    }

    let mut targets = Array2::zeros((rows, 2 * horizon));
    for (r, mut row) in targets.rows_mut().into_iter().enumerate() {
        let t = t0 + r;
        for l in 1..=horizon {
            row[l - 1] = frame.i[t + l];
            row[horizon + l - 1] = frame.q[t + l];
        }
    }
    Ok((
        FeatureSeries {
            values: features,
            t_offset: t0,
            config: *cfg,
        },
        TargetSeries {
            values: targets,
            t_offset: t0,
        },
    ))
}
