//! Mismatch experiments and the modulation discrimination score.
//!
//! Every experiment trains two pipelines (conditions A and B) from the same
//! seed, embeds one shared evaluation split under both, and compares the
//! per-cell mean signatures with the flip-aware signature distance. Latent
//! spaces from separate trainings are not aligned, so the comparison happens
//! in signature space.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::seed::{derive_seed, rng_from_seed};
use crate::signal_gen::{Dataset, ModulationKind};
use crate::signature::{
    embed_frame, heatmap_pgm, histogram2d, mean_signature, signature_distance, Signature, DEFAULT_BINS,
    DEFAULT_RANGE,
};
use crate::training::{split_holdout, train_with_holdout, ArchOverrides, TrainConfig};
use crate::vae::NetworkParams;

const EVAL_SPLIT_STREAM: u64 = 5;
const PERMUTATION_STREAM: u64 = 6;

/// Below this the intra-class spread counts as zero and the ratio is undefined.
pub const INTRA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MismatchKind {
    /// K = 8 against K = 16, lag differences only.
    LagChange,
    /// K = 8 with correlations against K = 16 without; both have N = 34.
    FeatureSetChange,
    LeaveOneModulationOut { held: ModulationKind },
    LeaveOneSnrOut { held_db: f64 },
}

impl MismatchKind {
    pub fn label(&self) -> String {
        match self {
            MismatchKind::LagChange => "lag-change".into(),
            MismatchKind::FeatureSetChange => "feature-set".into(),
            MismatchKind::LeaveOneModulationOut { held } => format!("leave-mod-{}", held.name()),
            MismatchKind::LeaveOneSnrOut { held_db } => format!("leave-snr-{held_db}dB"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exclusion {
    Modulation(ModulationKind),
    Snr(f64),
}

impl Exclusion {
    fn excludes(&self, modulation: ModulationKind, snr_db: f64) -> bool {
        match *self {
            Exclusion::Modulation(m) => m == modulation,
            Exclusion::Snr(s) => s.to_bits() == snr_db.to_bits(),
        }
    }
}

/// One trained pipeline: a feature configuration and an optional training exclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: String,
    pub features: FeatureConfig,
    pub exclude: Option<Exclusion>,
}

impl Condition {
    pub fn new(name: impl Into<String>, features: FeatureConfig) -> Self {
        Self {
            name: name.into(),
            features,
            exclude: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub overrides: ArchOverrides,
    /// Fraction of every cell reserved for evaluation.
    pub eval_fraction: f64,
    pub bins: usize,
    pub range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            overrides: ArchOverrides::default(),
            eval_fraction: 0.2,
            bins: DEFAULT_BINS,
            range: DEFAULT_RANGE,
        }
    }
}

/// Cells a pipeline was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingAudit {
    pub condition: String,
    pub cells: Vec<(ModulationKind, f64)>,
    pub frames: usize,
}

impl TrainingAudit {
    pub fn trained_on_modulation(&self, m: ModulationKind) -> bool {
        self.cells.iter().any(|(c, _)| *c == m)
    }

    pub fn trained_on_snr(&self, snr_db: f64) -> bool {
        self.cells.iter().any(|(_, s)| s.to_bits() == snr_db.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellDistance {
    pub modulation: ModulationKind,
    pub snr_db: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    pub experiment: String,
    pub seed: u64,
    pub condition_a: Condition,
    pub condition_b: Condition,
    pub cells: Vec<CellDistance>,
    pub audit: [TrainingAudit; 2],
    pub eval_frames: usize,
    pub wall_time: Duration,
}

impl MismatchReport {
    /// `modulation,snr_db,distance`, one line per evaluated cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modulation,snr_db,distance\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.modulation.name(), c.snr_db, c.distance);
        }
        out
    }

    /// Modulations as rows (code order), SNRs as columns (ascending);
    /// cells not evaluated stay zero.
    pub fn grid(&self) -> (Vec<ModulationKind>, Vec<f64>, Array2<f64>) {
        let mut mods: Vec<ModulationKind> = self.cells.iter().map(|c| c.modulation).collect();
        mods.sort();
        mods.dedup();
        let mut snrs: Vec<f64> = self.cells.iter().map(|c| c.snr_db).collect();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let mut grid = Array2::zeros((mods.len(), snrs.len()));
        for c in &self.cells {
            let r = mods.iter().position(|m| *m == c.modulation).expect("listed");
            let s = snrs.iter().position(|s| s.to_bits() == c.snr_db.to_bits()).expect("listed");
            grid[[r, s]] = c.distance;
        }
        (mods, snrs, grid)
    }

    pub fn heatmap_pgm(&self) -> Vec<u8> {
        heatmap_pgm(&self.grid().2, 16)
    }

    pub fn max_distance(&self) -> f64 {
        self.cells.iter().map(|c| c.distance).fold(0.0, f64::max)
    }
}

/// Histogram signature of every frame, in dataset order.
pub fn frame_signatures(
    params: &NetworkParams,
    feat: &FeatureConfig,
    dataset: &Dataset,
    bins: usize,
    range: f64,
) -> Result<Vec<Signature>> {
    dataset
        .frames
        .par_iter()
        .map(|f| histogram2d(&embed_frame(params, f, feat)?, bins, range))
        .collect()
}

fn train_condition(
    cond: &Condition,
    pool: &Dataset,
    cfg: &EvalConfig,
) -> Result<(NetworkParams, TrainingAudit)> {
    let train_set = match cond.exclude {
        Some(ex) => pool.filter(|f| !ex.excludes(f.label.expect("labeled"), f.snr_db.expect("labeled"))),
        None => pool.clone(),
    };
    if train_set.is_empty() {
        return Err(Error::Empty(format!("training set of condition {:?}", cond.name)));
    }
    let audit = TrainingAudit {
        condition: cond.name.clone(),
        cells: train_set.cells().iter().map(|c| (c.modulation, c.snr_db)).collect(),
        frames: train_set.len(),
    };
    let arch = cfg.overrides.resolve(&cond.features);
    let (params, _) = train_with_holdout(&train_set, None, &cond.features, &arch, &cfg.train, |_| {})?;
    Ok((params, audit))
}

/// Trains both conditions from `cfg.train.seed` and compares them cell by cell
/// on the shared evaluation split.
pub fn run_conditions(
    experiment: &str,
    a: &Condition,
    b: &Condition,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<MismatchReport> {
    let started = Instant::now();
    cfg.train.validate()?;
    let (pool, eval_set) = split_holdout(
        dataset,
        cfg.eval_fraction,
        derive_seed(cfg.train.seed, &[EVAL_SPLIT_STREAM]),
    )?;
    let (ra, rb) = rayon::join(|| train_condition(a, &pool, cfg), || train_condition(b, &pool, cfg));
    let ((pa, audit_a), (pb, audit_b)) = (ra?, rb?);

    let sig_a = frame_signatures(&pa, &a.features, &eval_set, cfg.bins, cfg.range)?;
    let sig_b = frame_signatures(&pb, &b.features, &eval_set, cfg.bins, cfg.range)?;
    let cells = eval_set
        .cells()
        .iter()
        .map(|cell| {
            let pick = |sigs: &[Signature]| cell.frames.iter().map(|&k| sigs[k].clone()).collect::<Vec<_>>();
            let ma = mean_signature(&pick(&sig_a))?;
            let mb = mean_signature(&pick(&sig_b))?;
            Ok(CellDistance {
                modulation: cell.modulation,
                snr_db: cell.snr_db,
                distance: signature_distance(&ma, &mb)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MismatchReport {
        experiment: experiment.to_string(),
        seed: cfg.train.seed,
        condition_a: a.clone(),
        condition_b: b.clone(),
        cells,
        audit: [audit_a, audit_b],
        eval_frames: eval_set.len(),
        wall_time: started.elapsed(),
    })
}

/// The two conditions of a mismatch experiment, derived from `base` features.
pub fn conditions_for(kind: &MismatchKind, base: &FeatureConfig) -> (Condition, Condition) {
    let lags = |k: usize, corr: bool| FeatureConfig {
        lag_count: k,
        include_correlations: corr,
        ..*base
    };
    match *kind {
        MismatchKind::LagChange => (
            Condition::new("K=8", lags(8, false)),
            Condition::new("K=16", lags(16, false)),
        ),
        MismatchKind::FeatureSetChange => (
            Condition::new("diff8+corr8", lags(8, true)),
            Condition::new("diff16", lags(16, false)),
        ),
        MismatchKind::LeaveOneModulationOut { held } => (
            Condition::new("all", *base),
            Condition {
                name: format!("without {}", held.name()),
                features: *base,
                exclude: Some(Exclusion::Modulation(held)),
            },
        ),
        MismatchKind::LeaveOneSnrOut { held_db } => (
            Condition::new("all", *base),
            Condition {
                name: format!("without {held_db} dB"),
                features: *base,
                exclude: Some(Exclusion::Snr(held_db)),
            },
        ),
    }
}

pub fn run_mismatch(
    kind: &MismatchKind,
    dataset: &Dataset,
    base: &FeatureConfig,
    cfg: &EvalConfig,
) -> Result<MismatchReport> {
    match *kind {
        MismatchKind::LeaveOneModulationOut { held } if !dataset.modulations().contains(&held) => {
            return Err(Error::config(format!("held modulation {held} is not in the dataset")));
        }
        MismatchKind::LeaveOneSnrOut { held_db } if !dataset.snrs().iter().any(|s| s.to_bits() == held_db.to_bits()) => {
            return Err(Error::config(format!("held SNR {held_db} dB is not in the dataset")));
        }
        _ => {}
    }
    let (a, b) = conditions_for(kind, base);
    run_conditions(&kind.label(), &a, &b, dataset, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminationScore {
    pub inter: f64,
    pub intra: f64,
    /// `None` when `intra` is below [`INTRA_FLOOR`].
    pub ratio: Option<f64>,
}

/// Inter-class against intra-class signature spread.
///
/// `intra` averages, over classes, the distance between the mean signatures of
/// the even- and odd-indexed members. `inter` averages the distance between
/// class mean signatures over all class pairs.
pub fn discrimination_score<L: PartialEq + Clone>(signatures: &[(L, Signature)]) -> Result<DiscriminationScore> {
    let mut groups: Vec<(L, Vec<&Signature>)> = Vec::new();
    for (label, sig) in signatures {
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, g)) => g.push(sig),
            None => groups.push((label.clone(), vec![sig])),
        }
    }
    if groups.len() < 2 {
        return Err(Error::config("discrimination needs at least 2 classes"));
    }
    if groups.iter().any(|(_, g)| g.len() < 2) {
        return Err(Error::config("discrimination needs at least 2 signatures per class"));
    }
    let mean_of = |sigs: Vec<&Signature>| mean_signature(&sigs.into_iter().cloned().collect::<Vec<_>>());

    let mut intra = 0.0;
    let mut means = Vec::with_capacity(groups.len());
    for (_, g) in &groups {
        let even = mean_of(g.iter().step_by(2).copied().collect())?;
        let odd = mean_of(g.iter().skip(1).step_by(2).copied().collect())?;
        intra += signature_distance(&even, &odd)?;
        means.push(mean_of(g.clone())?);
    }
    intra /= groups.len() as f64;

    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            inter += signature_distance(&means[i], &means[j])?;
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let ratio = (intra >= INTRA_FLOOR).then(|| inter / intra);
    Ok(DiscriminationScore { inter, intra, ratio })
}

/// Scores after randomly permuting the labels (class sizes are preserved).
pub fn permutation_control<L: PartialEq + Clone + Send + Sync>(
    signatures: &[(L, Signature)],
    shuffles: usize,
    seed: u64,
) -> Result<Vec<DiscriminationScore>> {
    (0..shuffles)
        .into_par_iter()
        .map(|s| {
            let mut labels: Vec<L> = signatures.iter().map(|(l, _)| l.clone()).collect();
            labels.shuffle(&mut rng_from_seed(derive_seed(seed, &[PERMUTATION_STREAM, s as u64])));
            let relabeled: Vec<(L, Signature)> = labels
                .into_iter()
                .zip(signatures.iter().map(|(_, sig)| sig.clone()))
                .collect();
            discrimination_score(&relabeled)
        })
        .collect()
}
