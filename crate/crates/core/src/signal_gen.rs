//! Synthetic eleven-modulation I/Q dataset.
//!
//! Linear modulations are raised-cosine shaped at [`SAMPLES_PER_SYMBOL`]
//! samples per symbol, frequency-shift keyed signals use modulation index 0.5,
//! and the analog modulations are driven by low-passed Gaussian noise. Every
//! clean frame is scaled to unit empirical power before AWGN is added.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

pub const SAMPLES_PER_SYMBOL: usize = 8;
pub const PULSE_ROLLOFF: f64 = 0.35;
/// Pulse length in symbols.
pub const PULSE_SPAN: usize = 4;
pub const FSK_INDEX: f64 = 0.5;
pub const GFSK_BT: f64 = 0.35;
/// Cutoff of the message low-pass, as a fraction of the sample rate.
pub const MESSAGE_CUTOFF: f64 = 0.15;
/// Peak FM frequency deviation per unit-RMS message, in cycles per sample.
pub const FM_DEVIATION: f64 = 0.1;
pub const AM_INDEX: f64 = 0.5;
pub const MIN_FRAME_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ModulationKind {
    Bpsk = 0,
    Qpsk = 1,
    Psk8 = 2,
    Qam16 = 3,
    Qam64 = 4,
    Pam4 = 5,
    Gfsk = 6,
    Cpfsk = 7,
    Wbfm = 8,
    AmSsb = 9,
    AmDsb = 10,
}

impl ModulationKind {
    pub const ALL: [ModulationKind; 11] = [
        ModulationKind::Bpsk,
        ModulationKind::Qpsk,
        ModulationKind::Psk8,
        ModulationKind::Qam16,
        ModulationKind::Qam64,
        ModulationKind::Pam4,
        ModulationKind::Gfsk,
        ModulationKind::Cpfsk,
        ModulationKind::Wbfm,
        ModulationKind::AmSsb,
        ModulationKind::AmDsb,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationKind::Bpsk => "BPSK",
            ModulationKind::Qpsk => "QPSK",
            ModulationKind::Psk8 => "8PSK",
            ModulationKind::Qam16 => "QAM16",
            ModulationKind::Qam64 => "QAM64",
            ModulationKind::Pam4 => "PAM4",
            ModulationKind::Gfsk => "GFSK",
            ModulationKind::Cpfsk => "CPFSK",
            ModulationKind::Wbfm => "WBFM",
            ModulationKind::AmSsb => "AM-SSB",
            ModulationKind::AmDsb => "AM-DSB",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(
            self,
            ModulationKind::Bpsk
                | ModulationKind::Qpsk
                | ModulationKind::Psk8
                | ModulationKind::Qam16
                | ModulationKind::Qam64
                | ModulationKind::Pam4
        )
    }

    /// Nominal (unnormalized) constellation of a linear modulation.
    pub fn constellation(self) -> Option<Vec<(f64, f64)>> {
        let points = match self {
            ModulationKind::Bpsk => vec![(-1.0, 0.0), (1.0, 0.0)],
            ModulationKind::Qpsk => (0..4)
                .map(|k| {
                    let a = PI / 4.0 + k as f64 * PI / 2.0;
                    (a.cos(), a.sin())
                })
                .collect(),
            ModulationKind::Psk8 => (0..8)
                .map(|k| {
                    let a = k as f64 * PI / 4.0;
                    (a.cos(), a.sin())
                })
                .collect(),
            ModulationKind::Qam16 => square_qam(4),
            ModulationKind::Qam64 => square_qam(8),
            ModulationKind::Pam4 => [-3.0, -1.0, 1.0, 3.0].iter().map(|&a| (a, 0.0)).collect(),
            _ => return None,
        };
        Some(points)
    }
}

fn square_qam(side: usize) -> Vec<(f64, f64)> {
    let level = |k: usize| 2.0 * k as f64 - (side as f64 - 1.0);
    (0..side)
        .flat_map(|a| (0..side).map(move |b| (level(a), level(b))))
        .collect()
}

impl From<ModulationKind> for u8 {
    fn from(kind: ModulationKind) -> u8 {
        kind.code()
    }
}

impl TryFrom<u8> for ModulationKind {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        ModulationKind::from_code(code).ok_or_else(|| format!("unknown modulation code {code}"))
    }
}

impl fmt::Display for ModulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_uppercase())
            .collect();
        let kind = match key.as_str() {
            "BPSK" => ModulationKind::Bpsk,
            "QPSK" => ModulationKind::Qpsk,
            "8PSK" | "PSK8" => ModulationKind::Psk8,
            "QAM16" => ModulationKind::Qam16,
            "QAM64" => ModulationKind::Qam64,
            "PAM4" => ModulationKind::Pam4,
            "GFSK" => ModulationKind::Gfsk,
            "CPFSK" => ModulationKind::Cpfsk,
            "WBFM" => ModulationKind::Wbfm,
            "AMSSB" => ModulationKind::AmSsb,
            "AMDSB" => ModulationKind::AmDsb,
            _ => return Err(format!("unknown modulation {s:?}")),
        };
        Ok(kind)
    }
}

/// One measurement: paired I/Q samples with optional ground-truth metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    pub i: Vec<f64>,
    pub q: Vec<f64>,
    pub label: Option<ModulationKind>,
    pub snr_db: Option<f64>,
}

impl IqFrame {
    pub fn new(i: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if i.len() != q.len() {
            return Err(Error::Dimension {
                what: "I/Q channel lengths",
                expected: i.len(),
                got: q.len(),
            });
        }
        if i.is_empty() {
            return Err(Error::Empty("I/Q frame".into()));
        }
        if let Some(pos) = i.iter().chain(&q).position(|v| !v.is_finite()) {
            return Err(Error::Format {
                what: "I/Q frame",
                detail: format!("non-finite sample at flat position {pos}"),
            });
        }
        Ok(Self {
            i,
            q,
            label: None,
            snr_db: None,
        })
    }

    pub fn with_meta(mut self, label: Option<ModulationKind>, snr_db: Option<f64>) -> Self {
        self.label = label;
        self.snr_db = snr_db;
        self
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    /// Empirical mean of `i² + q²`.
    pub fn power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.i.iter().zip(&self.q).map(|(a, b)| a * a + b * b).sum();
        sum / self.len() as f64
    }
}

/// Symbol-instant bookkeeping for a linear modulation: frame sample
/// `first + k * step` equals `gain * symbols[k]` in the noiseless signal.
#[derive(Debug, Clone)]
pub struct SymbolInstants {
    pub first: usize,
    pub step: usize,
    pub symbols: Vec<(f64, f64)>,
}

/// A noiseless, unit-power frame plus what is needed to audit it.
#[derive(Debug, Clone)]
pub struct CleanSignal {
    pub frame: IqFrame,
    /// Scale applied to reach unit power.
    pub gain: f64,
    pub instants: Option<SymbolInstants>,
}

fn check_len(len: usize) -> Result<()> {
    if len < MIN_FRAME_LEN {
        return Err(Error::FrameTooShort {
            len,
            min: MIN_FRAME_LEN,
            what: "signal generation",
        });
    }
    Ok(())
}

/// Generates the clean unit-power waveform of `kind`.
pub fn synthesize<R: Rng + ?Sized>(kind: ModulationKind, len: usize, rng: &mut R) -> Result<CleanSignal> {
    check_len(len)?;
    let (i, q, instants) = match kind {
        k if k.is_linear() => {
            let (i, q, inst) = linear_waveform(k, len, rng);
            (i, q, Some(inst))
        }
        ModulationKind::Gfsk => {
            let (i, q) = fsk_waveform(len, true, rng);
            (i, q, None)
        }
        ModulationKind::Cpfsk => {
            let (i, q) = fsk_waveform(len, false, rng);
            (i, q, None)
        }
        ModulationKind::Wbfm => {
            let m = message(len, rng);
            let mut phase = rng.random::<f64>() * 2.0 * PI;
            let (mut i, mut q) = (Vec::with_capacity(len), Vec::with_capacity(len));
            for v in m {
                phase += 2.0 * PI * FM_DEVIATION * v;
                i.push(phase.cos());
                q.push(phase.sin());
            }
            (i, q, None)
        }
        ModulationKind::AmDsb => {
            let m = message(len, rng);
            let i = m.iter().map(|v| 1.0 + AM_INDEX * v).collect();
            (i, vec![0.0; len], None)
        }
        ModulationKind::AmSsb => {
            let (i, q) = ssb_waveform(len, rng);
            (i, q, None)
        }
        _ => unreachable!("all linear kinds handled above"),
    };
    let mut frame = IqFrame::new(i, q)?;
    let power = frame.power();
    if power <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let gain = 1.0 / power.sqrt();
    frame.i.iter_mut().chain(frame.q.iter_mut()).for_each(|v| *v *= gain);
    frame.label = Some(kind);
    Ok(CleanSignal {
        frame,
        gain,
        instants,
    })
}

/// Raised-cosine impulse response at `t` symbol periods.
fn raised_cosine(t: f64, rolloff: f64) -> f64 {
    let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
    let denom = 1.0 - (2.0 * rolloff * t).powi(2);
    if denom.abs() < 1e-12 {
        PI / 4.0 * sinc
    } else {
        sinc * (PI * rolloff * t).cos() / denom
    }
}

fn linear_waveform<R: Rng + ?Sized>(
    kind: ModulationKind,
    len: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, SymbolInstants) {
    let sps = SAMPLES_PER_SYMBOL;
    let half = PULSE_SPAN * sps / 2;
    let taps: Vec<f64> = (0..=2 * half)
        .map(|k| raised_cosine((k as f64 - half as f64) / sps as f64, PULSE_ROLLOFF))
        .collect();
    let points = kind.constellation().expect("linear modulation");
    // Enough leading symbols that the first frame sample sees a full pulse history.
    let lead_symbols = half.div_ceil(sps) + 1;
    let start = lead_symbols * sps;
    let n_symbols = (start + len + half).div_ceil(sps) + 1;
    let symbols: Vec<(f64, f64)> = (0..n_symbols)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect();

    let (mut i, mut q) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for n in start..start + len {
        let (mut si, mut sq) = (0.0, 0.0);
        let k_lo = (n.saturating_sub(half)).div_ceil(sps);
        let k_hi = ((n + half) / sps).min(n_symbols - 1);
        for (k, &(a, b)) in symbols.iter().enumerate().take(k_hi + 1).skip(k_lo) {
            let h = taps[n + half - k * sps];
            si += a * h;
            sq += b * h;
        }
        i.push(si);
        q.push(sq);
    }
    let first_symbol = start / sps;
    let instants = SymbolInstants {
        first: 0,
        step: sps,
        symbols: symbols[first_symbol..first_symbol + len.div_ceil(sps)].to_vec(),
    };
    (i, q, instants)
}

fn fsk_waveform<R: Rng + ?Sized>(len: usize, gaussian: bool, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let sps = SAMPLES_PER_SYMBOL;
    let warmup = PULSE_SPAN * sps;
    let total = len + 2 * warmup;
    let n_symbols = total.div_ceil(sps);
    let nrz: Vec<f64> = (0..n_symbols)
        .flat_map(|_| {
            let bit = if rng.random::<bool>() { 1.0 } else { -1.0 };
            std::iter::repeat_n(bit, sps)
        })
        .take(total)
        .collect();
    let freq = if gaussian {
        let half = PULSE_SPAN * sps / 2;
        let scale = 2.0 * PI * PI * GFSK_BT * GFSK_BT / 2f64.ln();
        let mut g: Vec<f64> = (0..=2 * half)
            .map(|k| {
                let t = (k as f64 - half as f64) / sps as f64;
                (-scale * t * t).exp()
            })
            .collect();
        let norm: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= norm);
        (0..total)
            .map(|n| {
                g.iter()
                    .enumerate()
                    .filter_map(|(k, w)| (n + k).checked_sub(half).and_then(|m| nrz.get(m)).map(|x| x * w))
                    .sum()
            })
            .collect()
    } else {
        nrz
    };
    let mut phase = rng.random::<f64>() * 2.0 * PI;
    let step = PI * FSK_INDEX / sps as f64;
    let (mut i, mut q) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for (n, f) in freq.iter().enumerate() {
        phase += step * f;
        if n >= warmup && i.len() < len {
            i.push(phase.cos());
            q.push(phase.sin());
        }
    }
    (i, q)
}

/// Unit-RMS Gaussian noise through a 2-pole Butterworth low-pass.
fn message<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let warmup = 64;
    let k = (PI * MESSAGE_CUTOFF).tan();
    let sqrt2 = std::f64::consts::SQRT_2;
    let norm = 1.0 / (1.0 + sqrt2 * k + k * k);
    let b0 = k * k * norm;
    let (b1, b2) = (2.0 * b0, b0);
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - sqrt2 * k + k * k) * norm;

    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(len);
    for n in 0..len + warmup {
        let x: f64 = rng.sample(StandardNormal);
        let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        if n >= warmup {
            out.push(y);
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Upper-sideband analytic signal `m + j·H{m}` with a windowed FIR Hilbert transformer.
fn ssb_waveform<R: Rng + ?Sized>(len: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    const TAPS: usize = 31;
    let half = TAPS / 2;
    let hilbert: Vec<f64> = (0..TAPS)
        .map(|k| {
            let m = k as isize - half as isize;
            if m % 2 == 0 {
                0.0
            } else {
                let window = 0.54 - 0.46 * (2.0 * PI * k as f64 / (TAPS - 1) as f64).cos();
                2.0 / (PI * m as f64) * window
            }
        })
        .collect();
    let m = message(len + 2 * half, rng);
    let i = m[half..half + len].to_vec();
    let q = (half..half + len)
        .map(|n| (0..TAPS).map(|k| hilbert[k] * m[n + half - k]).sum())
        .collect();
    (i, q)
}

/// Adds white Gaussian noise so that `10·log10(P_frame / P_noise) = snr_db`,
/// with `P_frame` the frame's empirical power.
pub fn apply_awgn<R: Rng + ?Sized>(frame: &IqFrame, snr_db: f64, rng: &mut R) -> Result<IqFrame> {
    if frame.is_empty() {
        return Err(Error::Empty("frame passed to apply_awgn".into()));
    }
    if frame.i.iter().chain(&frame.q).any(|v| !v.is_finite()) || snr_db.is_nan() {
        return Err(Error::config("apply_awgn requires finite samples and a numeric SNR"));
    }
    let power = frame.power();
    if power == 0.0 {
        return Err(Error::ZeroPower);
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let mut out = frame.clone();
    for (a, b) in out.i.iter_mut().zip(out.q.iter_mut()) {
        let ni: f64 = rng.sample(StandardNormal);
        let nq: f64 = rng.sample(StandardNormal);
        *a += sigma * ni;
        *b += sigma * nq;
    }
    out.snr_db = Some(snr_db);
    Ok(out)
}

/// Generates one labeled frame. `snr_db = f64::INFINITY` yields the noiseless signal.
pub fn generate_frame<R: Rng + ?Sized>(
    kind: ModulationKind,
    snr_db: f64,
    len: usize,
    rng: &mut R,
) -> Result<IqFrame> {
    let clean = synthesize(kind, len, rng)?;
    let frame = if snr_db == f64::INFINITY {
        clean.frame
    } else {
        apply_awgn(&clean.frame, snr_db, rng)?
    };
    Ok(frame.with_meta(Some(kind), Some(snr_db)))
}

/// `10·log10(P_clean / P_noise)` where the noise is `noisy − clean`.
/// Returns `f64::INFINITY` when the two frames are identical.
pub fn measure_snr(clean: &IqFrame, noisy: &IqFrame) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::Dimension {
            what: "measure_snr frame lengths",
            expected: clean.len(),
            got: noisy.len(),
        });
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::ZeroPower);
    }
    let noise: f64 = clean
        .i
        .iter()
        .zip(&clean.q)
        .zip(noisy.i.iter().zip(&noisy.q))
        .map(|((ci, cq), (ni, nq))| (ni - ci).powi(2) + (nq - cq).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p_clean / noise).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub modulations: Vec<ModulationKind>,
    pub snrs_db: Vec<f64>,
    pub frames_per_cell: usize,
    pub frame_len: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modulations.is_empty() {
            return Err(Error::Empty("modulation list".into()));
        }
        if self.snrs_db.is_empty() {
            return Err(Error::Empty("SNR list".into()));
        }
        if self.frames_per_cell == 0 {
            return Err(Error::config("frames_per_cell must be at least 1"));
        }
        if self.snrs_db.iter().any(|s| s.is_nan()) {
            return Err(Error::config("SNR values must be numeric"));
        }
        let mut seen = self.modulations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modulations.len() {
            return Err(Error::config("duplicate modulation in dataset spec"));
        }
        check_len(self.frame_len)
    }
}

/// Sub-seed of frame `index` in cell (`kind`, `snr_db`):
/// `derive_seed(seed, [kind code, snr_db bit pattern, index])`.
pub fn frame_seed(seed: u64, kind: ModulationKind, snr_db: f64, index: usize) -> u64 {
    derive_seed(seed, &[kind.code() as u64, snr_db.to_bits(), index as u64])
}

/// One (modulation, SNR) grid cell and the indices of its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub modulation: ModulationKind,
    pub snr_db: f64,
    pub frames: Vec<usize>,
}

/// Labeled frames, stored cell by cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub frames: Vec<IqFrame>,
}

impl Dataset {
    pub fn new(frames: Vec<IqFrame>) -> Result<Self> {
        if let Some(pos) = frames.iter().position(|f| f.label.is_none() || f.snr_db.is_none()) {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("frame {pos} lacks a modulation label or SNR"),
            });
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Cells in order of first appearance.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = Vec::new();
        for (idx, frame) in self.frames.iter().enumerate() {
            let (Some(modulation), Some(snr_db)) = (frame.label, frame.snr_db) else {
                continue;
            };
            match cells
                .iter_mut()
                .find(|c| c.modulation == modulation && c.snr_db.to_bits() == snr_db.to_bits())
            {
                Some(cell) => cell.frames.push(idx),
                None => cells.push(Cell {
                    modulation,
                    snr_db,
                    frames: vec![idx],
                }),
            }
        }
        cells
    }

    pub fn modulations(&self) -> Vec<ModulationKind> {
        let mut mods: Vec<_> = self.frames.iter().filter_map(|f| f.label).collect();
        mods.sort();
        mods.dedup();
        mods
    }

    pub fn snrs(&self) -> Vec<f64> {
        let mut snrs: Vec<f64> = self.frames.iter().filter_map(|f| f.snr_db).collect();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup_by(|a, b| a.to_bits() == b.to_bits());
        snrs
    }

    pub fn filter(&self, mut keep: impl FnMut(&IqFrame) -> bool) -> Dataset {
        Dataset {
            frames: self.frames.iter().filter(|f| keep(f)).cloned().collect(),
        }
    }
}

/// Generates the full grid. Cells are laid out modulation-major, then SNR,
/// then frame index; generation runs in parallel but the result only depends
/// on the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(ModulationKind, f64, usize)> = spec
        .modulations
        .iter()
        .flat_map(|&m| {
            spec.snrs_db
                .iter()
                .flat_map(move |&s| (0..spec.frames_per_cell).map(move |k| (m, s, k)))
        })
        .collect();
    let frames = jobs
        .par_iter()
        .map(|&(kind, snr, k)| {
            let mut rng = rng_from_seed(frame_seed(spec.seed, kind, snr, k));
            generate_frame(kind, snr, spec.frame_len, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(frames)
}
