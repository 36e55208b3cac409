//! Latent trajectories, `(z, Δz)` histogram signatures and their distances.
//!
//! Binning is symmetric about zero so that negating an embedding maps every
//! sample to the mirrored bin exactly. With `s = v · B / (2R)`:
//!
//! * even `B`: `v > 0` goes to bin `B/2 + floor(s)`, `v < 0` to `B/2 - 1 - floor(|s|)`,
//!   and `v == 0` puts half of its weight in each of the two central bins;
//! * odd `B`: bin `(B-1)/2 ± floor(|s| + 1/2)` with the sign of `v`.
//!
//! Indices are clamped to `[0, B-1]`, so out-of-range values land in the edge
//! bins and the histogram always keeps unit mass.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureConfig};
use crate::signal_gen::IqFrame;
use crate::vae::{encode_mean, NetworkParams};

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_RANGE: f64 = 3.0;
pub const DEFAULT_CANVAS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeries {
    pub z: Vec<f64>,
    /// Frame index of `z[0]`.
    pub t_offset: usize,
}

impl EmbeddingSeries {
    pub fn negated(&self) -> Self {
        Self {
            z: self.z.iter().map(|v| -v).collect(),
            t_offset: self.t_offset,
        }
    }
}

/// Normalized `B × B` histogram; rows index `z_t`, columns index `z_{t+1} - z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub bins: Array2<f64>,
    pub range: f64,
}

impl Signature {
    pub fn size(&self) -> usize {
        self.bins.nrows()
    }

    pub fn mass(&self) -> f64 {
        self.bins.sum()
    }

    /// Negated latent: bin `(i, j)` moves to `(B-1-i, B-1-j)`.
    pub fn flipped(&self) -> Signature {
        let b = self.size();
        Signature {
            bins: Array2::from_shape_fn((b, b), |(i, j)| self.bins[[b - 1 - i, b - 1 - j]]),
            range: self.range,
        }
    }

    fn check_compatible(&self, other: &Signature) -> Result<()> {
        if self.bins.dim() != other.bins.dim() {
            return Err(Error::Dimension {
                what: "signature bins",
                expected: self.size(),
                got: other.size(),
            });
        }
        if self.range.to_bits() != other.range.to_bits() {
            return Err(Error::config(format!(
                "signature ranges differ: {} vs {}",
                self.range, other.range
            )));
        }
        Ok(())
    }

    /// Row-major CSV preceded by `# B=<B> R=<R>`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# B={} R={}\n", self.size(), self.range);
        for row in self.bins.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Signature> {
        let bad = |detail: String| Error::Format {
            what: "signature CSV",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header
            .strip_prefix("# B=")
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let (b, r) = rest
            .split_once(" R=")
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let b: usize = b.parse().map_err(|_| bad(format!("bad bin count {b:?}")))?;
        let range: f64 = r.parse().map_err(|_| bad(format!("bad range {r:?}")))?;
        let mut values = Vec::with_capacity(b * b);
        for (n, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            if row.len() != b {
                return Err(bad(format!("line {} has {} values, expected {b}", n + 2, row.len())));
            }
            values.extend(row);
        }
        let bins = Array2::from_shape_vec((b, b), values).map_err(|e| bad(e.to_string()))?;
        Ok(Signature { bins, range })
    }

    /// Grayscale heat map scaled to the largest bin. Image rows run from the
    /// largest `Δz` (top) to the smallest; columns from the smallest `z` to the largest.
    pub fn to_pgm(&self) -> Vec<u8> {
        let b = self.size();
        let peak = self.bins.iter().copied().fold(0.0, f64::max);
        let pixels = Array2::from_shape_fn((b, b), |(y, x)| {
            let v = self.bins[[x, b - 1 - y]];
            if peak > 0.0 {
                (255.0 * v / peak).round() as u8
            } else {
                0
            }
        });
        encode_pgm(&pixels)
    }
}

/// Binary PGM (P5) with maxval 255.
pub fn encode_pgm(pixels: &Array2<u8>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    out
}

/// Binary PPM (P6) with maxval 255; `pixels` is height × width.
pub fn encode_ppm(pixels: &Array2<[u8; 3]>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in pixels.iter() {
        out.extend_from_slice(px);
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io("create", path, e))?;
    f.write_all(bytes).map_err(|e| Error::io("write", path, e))
}

/// Latent means for every valid timestep of `frame`.
pub fn embed_frame(params: &NetworkParams, frame: &IqFrame, feat: &FeatureConfig) -> Result<EmbeddingSeries> {
    if params.arch.input_dim != feat.input_dim() {
        return Err(Error::Dimension {
            what: "checkpoint input width vs feature configuration",
            expected: params.arch.input_dim,
            got: feat.input_dim(),
        });
    }
    let (x, _) = assemble_features(frame, feat)?;
    let z = encode_mean(params, x.values.view())?;
    Ok(EmbeddingSeries {
        z: z.to_vec(),
        t_offset: x.t_offset,
    })
}

/// Bin weights for one value: one or two `(bin, weight)` pairs.
pub(crate) fn bin_of(v: f64, bins: usize, range: f64) -> [(usize, f64); 2] {
    let s = v * bins as f64 / (2.0 * range);
    let top = (bins - 1) as f64;
    let half = (bins / 2) as f64;
    let place = |idx: f64| idx.clamp(0.0, top) as usize;
    if bins.is_multiple_of(2) {
        if s > 0.0 {
            [(place(half + s.floor()), 1.0), (0, 0.0)]
        } else if s < 0.0 {
            [(place(half - 1.0 - (-s).floor()), 1.0), (0, 0.0)]
        } else {
            [(bins / 2, 0.5), (bins / 2 - 1, 0.5)]
        }
    } else {
        let center = ((bins - 1) / 2) as f64;
        let offset = (s.abs() + 0.5).floor();
        let idx = if s >= 0.0 { center + offset } else { center - offset };
        [(place(idx), 1.0), (0, 0.0)]
    }
}

/// Normalized histogram of `(z_t, z_{t+1} - z_t)` for `t = 0..len-2`.
pub fn histogram2d(emb: &EmbeddingSeries, bins: usize, range: f64) -> Result<Signature> {
    if emb.z.len() < 2 {
        return Err(Error::FrameTooShort {
            len: emb.z.len(),
            min: 2,
            what: "signature histogram",
        });
    }
    if bins < 2 {
        return Err(Error::config("signature needs at least 2 bins per axis"));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::config("signature range must be positive"));
    }
    if emb.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("embedding contains non-finite values"));
    }
    let mut hist = Array2::<f64>::zeros((bins, bins));
    let pairs = emb.z.len() - 1;
    for w in emb.z.windows(2) {
        let (z, dz) = (w[0], w[1] - w[0]);
        for (bz, wz) in bin_of(z, bins, range) {
            for (bd, wd) in bin_of(dz, bins, range) {
                if wz * wd > 0.0 {
                    hist[[bz, bd]] += wz * wd;
                }
            }
        }
    }
    hist /= pairs as f64;
    Ok(Signature { bins: hist, range })
}

fn total_variation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Total-variation distance, minimized over the sign of the latent.
pub fn signature_distance(a: &Signature, b: &Signature) -> Result<f64> {
    a.check_compatible(b)?;
    let direct = total_variation(&a.bins, &b.bins);
    let flipped = total_variation(&a.bins, &b.flipped().bins);
    Ok(direct.min(flipped).clamp(0.0, 1.0))
}

/// Bin-wise mean of several signatures.
pub fn mean_signature(sigs: &[Signature]) -> Result<Signature> {
    let first = sigs.first().ok_or_else(|| Error::Empty("signature group".into()))?;
    let mut acc = Array2::<f64>::zeros(first.bins.dim());
    for s in sigs {
        first.check_compatible(s)?;
        acc += &s.bins;
    }
    acc /= sigs.len() as f64;
    Ok(Signature {
        bins: acc,
        range: first.range,
    })
}

/// Pairwise distances between group-mean signatures; symmetric with a zero diagonal.
pub fn distance_matrix(groups: &[(String, Vec<Signature>)]) -> Result<Array2<f64>> {
    if groups.is_empty() {
        return Err(Error::Empty("distance matrix needs at least one group".into()));
    }
    let means = groups
        .iter()
        .map(|(label, sigs)| {
            if sigs.is_empty() {
                Err(Error::Empty(format!("group {label:?}")))
            } else {
                mean_signature(sigs)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = means.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| signature_distance(&means[i], &means[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((n, n));
    for (&(i, j), d) in pairs.iter().zip(dists) {
        out[[i, j]] = d;
        out[[j, i]] = d;
    }
    Ok(out)
}

/// CSV with a `label` header row and one labeled row per group.
pub fn distance_matrix_csv(labels: &[String], matrix: &Array2<f64>) -> String {
    let mut out = String::from("label");
    for l in labels {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(matrix.rows()) {
        out.push_str(l);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Heat map of values in `[0, 1]`, one block of `scale × scale` pixels per entry.
pub fn heatmap_pgm(matrix: &Array2<f64>, scale: usize) -> Vec<u8> {
    let (r, c) = matrix.dim();
    let scale = scale.max(1);
    let pixels = Array2::from_shape_fn((r * scale, c * scale), |(y, x)| {
        let v = matrix[[y / scale, x / scale]];
        if v.is_finite() {
            (255.0 * v.clamp(0.0, 1.0)).round() as u8
        } else {
            0
        }
    });
    encode_pgm(&pixels)
}

/// 256-entry colormap running blue → cyan → green → yellow → red.
pub fn colormap(index: u8) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let pos = index as f64 / 255.0 * (STOPS.len() - 1) as f64;
    let k = (pos.floor() as usize).min(STOPS.len() - 2);
    let frac = pos - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[k][c] + frac * (STOPS[k + 1][c] - STOPS[k][c])).round() as u8;
    }
    out
}

/// Colormap index of a latent value clipped to `[-range, range]`.
pub fn color_index(z: f64, range: f64) -> u8 {
    let u = (z.clamp(-range, range) + range) / (2.0 * range);
    (u * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Half-width of the plotted I/Q square.
    pub extent: f64,
    pub range: f64,
}

impl Canvas {
    /// Square canvas whose extent covers every plotted sample with a 5% margin.
    pub fn fit(frame: &IqFrame, emb: &EmbeddingSeries, size: usize, range: f64) -> Self {
        let end = (emb.t_offset + emb.z.len()).min(frame.len());
        let peak = (emb.t_offset..end)
            .map(|t| frame.i[t].abs().max(frame.q[t].abs()))
            .fold(0.0, f64::max);
        Self {
            width: size,
            height: size,
            extent: if peak > 0.0 { 1.05 * peak } else { 1.0 },
            range,
        }
    }

    /// Pixel `(row, col)` of an I/Q point; `q` grows upward.
    pub fn pixel(&self, i: f64, q: f64) -> (usize, usize) {
        let to = |v: f64, n: usize| {
            let u = (v + self.extent) / (2.0 * self.extent);
            ((u * n as f64).floor()).clamp(0.0, (n - 1) as f64) as usize
        };
        (self.height - 1 - to(q, self.height), to(i, self.width))
    }
}

/// Scatter of `(i_t, q_t)` over the embedded timesteps, colored by `z_t`.
/// Points are drawn in time order on a black background.
pub fn colorize_trajectory(frame: &IqFrame, emb: &EmbeddingSeries, canvas: &Canvas) -> Result<Array2<[u8; 3]>> {
    if emb.t_offset + emb.z.len() > frame.len() {
        return Err(Error::Dimension {
            what: "embedding alignment",
            expected: frame.len(),
            got: emb.t_offset + emb.z.len(),
        });
    }
    if canvas.width == 0 || canvas.height == 0 {
        return Err(Error::config("canvas must be non-empty"));
    }
    let mut img = Array2::from_elem((canvas.height, canvas.width), [0u8; 3]);
    for (k, &z) in emb.z.iter().enumerate() {
        let t = emb.t_offset + k;
        let (r, c) = canvas.pixel(frame.i[t], frame.q[t]);
        img[[r, c]] = colormap(color_index(z, canvas.range));
    }
    Ok(img)
}
