//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::eval::{run_mismatch, EvalConfig, MismatchKind};
use crate::features::FeatureConfig;
use crate::io_stream::{
    embeddings_csv, load_checkpoint, load_dataset, save_checkpoint, save_dataset, stream_frames, Checkpoint,
    RollingWindow,
};
use crate::signal_gen::{generate_dataset, DatasetSpec, ModulationKind, MIN_FRAME_LEN};
use crate::signature::{
    colorize_trajectory, distance_matrix, distance_matrix_csv, embed_frame, encode_ppm, heatmap_pgm, histogram2d,
    mean_signature, write_file, Canvas, Signature,
};
use crate::training::{split_holdout, train_with_holdout, ArchOverrides, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "modembed", version, about = "Unsupervised 1-D embeddings and signatures of radio I/Q signals")]
pub struct Cli {
    /// Seed for every random choice (data, initialization, shuffling, dropout).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest + cf32 files).
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Write per-frame latent trajectories as CSV.
    Embed(EmbedArgs),
    /// Write per-cell signatures (CSV, PGM) and colored trajectories (PPM).
    Sign(SignArgs),
    /// Write the distance matrix between cell signatures (CSV, PGM).
    Dist(DistArgs),
    /// Run a mismatch experiment end to end.
    Eval(EvalArgs),
    /// Embed frames from a live cf32 TCP stream.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Comma-separated modulation names, or "all".
    #[arg(long, default_value = "all")]
    pub mods: String,
    /// Comma-separated SNRs in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snrs: String,
    /// Frames per (modulation, SNR) cell.
    #[arg(long)]
    pub frames: usize,
    /// Samples per frame.
    #[arg(long, default_value_t = 125)]
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Lag count K.
    #[arg(long, default_value_t = 8)]
    pub lags: usize,
    /// Include windowed lagged correlations.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub corr: Switch,
    /// Correlation window W.
    #[arg(long, default_value_t = 16)]
    pub corr_window: usize,
    /// Future lags predicted by the decoder.
    #[arg(long, default_value_t = 8)]
    pub target_lags: usize,
}

impl FeatureArgs {
    fn config(&self) -> FeatureConfig {
        FeatureConfig {
            lag_count: self.lags,
            include_correlations: self.corr == Switch::On,
            corr_window: self.corr_window,
            target_lag_count: self.target_lags,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub beta_kl: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Rows per mini-batch.
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Learning-rate factor applied after every epoch.
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
}

impl TrainingArgs {
    fn config(&self, seed: u64, holdout_fraction: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            beta_kl: self.beta_kl,
            batch_rows: self.batch,
            epochs: self.epochs,
            seed,
            lr_decay: self.lr_decay,
            holdout_fraction,
            ..TrainConfig::default()
        }
    }

    fn overrides(&self) -> ArchOverrides {
        ArchOverrides {
            hidden_dim: Some(self.hidden),
            depth: Some(self.depth),
            dropout_rate: Some(self.dropout),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Fraction of every cell held out for validation; 0 disables.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

/// Feature flags that, when given, must agree with the checkpoint.
#[derive(Debug, Args)]
pub struct FeatureCheck {
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long, value_enum)]
    pub corr: Option<Switch>,
}

impl FeatureCheck {
    fn requested(&self, ckpt: &FeatureConfig) -> FeatureConfig {
        FeatureConfig {
            lag_count: self.lags.unwrap_or(ckpt.lag_count),
            include_correlations: self.corr.map_or(ckpt.include_correlations, |c| c == Switch::On),
            ..*ckpt
        }
    }
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub check: FeatureCheck,
}

#[derive(Debug, Args)]
pub struct SignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Histogram bins per axis.
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    /// Histogram half-range R on both axes.
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    /// Trajectory image side in pixels.
    #[arg(long, default_value_t = 256)]
    pub canvas: usize,
    #[command(flatten)]
    pub check: FeatureCheck,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[command(flatten)]
    pub check: FeatureCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Lag,
    FeatureSet,
    LeaveMod,
    LeaveSnr,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: EvalKind,
    /// Held-out modulation (leave-mod) or SNR in dB (leave-snr).
    #[arg(long, allow_hyphen_values = true)]
    pub held: Option<String>,
    /// Fraction of every cell reserved for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Server address, host:port.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub model: PathBuf,
    /// Samples per frame.
    #[arg(long, default_value_t = 125)]
    pub len: usize,
    /// Write a signature snapshot every n frames.
    #[arg(long, default_value_t = 10)]
    pub every: usize,
    /// Frames aggregated per snapshot (defaults to --every).
    #[arg(long)]
    pub window: Option<usize>,
    /// Frame queue capacity; the oldest frame is dropped when full.
    #[arg(long, default_value_t = 16)]
    pub queue: usize,
    /// Stop after this many frames.
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Stop after this many seconds without a frame.
    #[arg(long)]
    pub idle_timeout: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[command(flatten)]
    pub check: FeatureCheck,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn usage_from(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.workers {
        Some(0) => Err(usage("--workers must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Runtime(e.into())),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Ctx<'a> {
    seed: u64,
    out: &'a Path,
    quiet: bool,
}

impl Ctx<'_> {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn prepare_out(&self) -> CmdResult {
        std::fs::create_dir_all(self.out).map_err(|e| Error::io("create directory", self.out, e))?;
        Ok(())
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CmdResult {
        write_file(&self.out.join(name), bytes)?;
        Ok(())
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let ctx = Ctx {
        seed: cli.seed,
        out: &cli.out,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Embed(a) => cmd_embed(&ctx, a),
        Command::Sign(a) => cmd_sign(&ctx, a),
        Command::Dist(a) => cmd_dist(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Stream(a) => cmd_stream(&ctx, a),
    }
}

fn parse_mods(text: &str) -> std::result::Result<Vec<ModulationKind>, Failure> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(ModulationKind::ALL.to_vec());
    }
    text.split(',')
        .map(|m| m.trim().parse::<ModulationKind>().map_err(|e| usage(format!("--mods: {e}"))))
        .collect()
}

fn parse_snrs(text: &str) -> std::result::Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(format!("--snrs: {s:?} is not a finite number")))
        })
        .collect()
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> CmdResult {
    let spec = DatasetSpec {
        modulations: parse_mods(&a.mods)?,
        snrs_db: parse_snrs(&a.snrs)?,
        frames_per_cell: a.frames,
        frame_len: a.len,
        seed: ctx.seed,
    };
    if a.len < MIN_FRAME_LEN {
        return Err(usage(format!("--len {} is below the minimum frame length {MIN_FRAME_LEN}", a.len)));
    }
    spec.validate().map_err(usage_from)?;
    let data = generate_dataset(&spec)?;
    let manifest = save_dataset(ctx.out, &data)?;
    for e in &manifest.entries {
        ctx.say(format!("{} {} dB: {} frames", e.modulation.name(), e.snr_db, e.frame_count));
    }
    ctx.say(format!("wrote {} frames in {} cells to {}", data.len(), manifest.entries.len(), ctx.out.display()));
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let feat = a.features.config();
    let cfg = a.training.config(ctx.seed, a.holdout);
    let arch = a.training.overrides().resolve(&feat);
    feat.validate().map_err(usage_from)?;
    cfg.validate().map_err(usage_from)?;
    arch.validate().map_err(usage_from)?;

    let data = load_dataset(&a.data)?;
    ctx.prepare_out()?;
    ctx.say(format!(
        "input_dim={} target_dim={} hidden={} depth={} dropout={} lr={} frames={}",
        feat.input_dim(),
        feat.target_dim(),
        arch.hidden_dim,
        arch.depth,
        arch.dropout_rate,
        cfg.learning_rate,
        data.len()
    ));
    let (train_set, holdout) = if cfg.holdout_fraction > 0.0 {
        let (t, h) = split_holdout(&data, cfg.holdout_fraction, cfg.seed)?;
        (t, Some(h))
    } else {
        (data, None)
    };
    let mut history = String::from("epoch,train,holdout\n");
    let (params, _) = train_with_holdout(&train_set, holdout.as_ref(), &feat, &arch, &cfg, |rec| {
        ctx.say(rec.progress_line());
        let held = rec.holdout.as_ref().map_or(String::new(), |h| format!("{}", h.total));
        let _ = writeln!(history, "{},{},{held}", rec.epoch, rec.train.total);
    })?;
    let path = ctx.out.join("model.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            params,
            features: feat,
            training: cfg,
        },
    )?;
    ctx.write("train_history.csv", history.as_bytes())?;
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn load_model(path: &Path, check: &FeatureCheck) -> std::result::Result<Checkpoint, Failure> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_features(&check.requested(&ckpt.features))?;
    Ok(ckpt)
}

fn cmd_embed(ctx: &Ctx, a: &EmbedArgs) -> CmdResult {
    let ckpt = load_model(&a.model, &a.check)?;
    let data = load_dataset(&a.data)?;
    ctx.prepare_out()?;
    let rows = data
        .frames
        .iter()
        .map(|f| Ok((f, embed_frame(&ckpt.params, f, &ckpt.features)?)))
        .collect::<crate::Result<Vec<_>>>()?;
    ctx.write("embeddings.csv", embeddings_csv(&rows).as_bytes())?;
    ctx.say(format!("embedded {} frames", rows.len()));
    Ok(())
}

fn check_histogram_flags(bins: usize, range: f64) -> CmdResult {
    if bins < 2 {
        return Err(usage("--bins must be at least 2"));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(usage("--range must be positive"));
    }
    Ok(())
}

fn cell_tag(m: ModulationKind, snr_db: f64) -> String {
    format!("{}_{snr_db}dB", m.name())
}

/// Per-cell label and member signatures, in dataset cell order.
fn cell_signatures(ckpt: &Checkpoint, data: &crate::signal_gen::Dataset, bins: usize, range: f64)
    -> crate::Result<Vec<(String, Vec<Signature>)>>
{
    let sigs = crate::eval::frame_signatures(&ckpt.params, &ckpt.features, data, bins, range)?;
    Ok(data
        .cells()
        .into_iter()
        .map(|c| (cell_tag(c.modulation, c.snr_db), c.frames.iter().map(|&k| sigs[k].clone()).collect()))
        .collect())
}

fn cmd_sign(ctx: &Ctx, a: &SignArgs) -> CmdResult {
    check_histogram_flags(a.bins, a.range)?;
    if a.canvas == 0 {
        return Err(usage("--canvas must be at least 1"));
    }
    let ckpt = load_model(&a.model, &a.check)?;
    let data = load_dataset(&a.data)?;
    ctx.prepare_out()?;
    let groups = cell_signatures(&ckpt, &data, a.bins, a.range)?;
    for ((tag, sigs), cell) in groups.iter().zip(data.cells()) {
        let mean = mean_signature(sigs)?;
        ctx.write(&format!("sig_{tag}.csv"), mean.to_csv().as_bytes())?;
        ctx.write(&format!("sig_{tag}.pgm"), &mean.to_pgm())?;
        let frame = &data.frames[cell.frames[0]];
        let emb = embed_frame(&ckpt.params, frame, &ckpt.features)?;
        let canvas = Canvas::fit(frame, &emb, a.canvas, a.range);
        ctx.write(&format!("traj_{tag}.ppm"), &encode_ppm(&colorize_trajectory(frame, &emb, &canvas)?))?;
        ctx.say(format!("{tag}: {} frames", sigs.len()));
    }
    Ok(())
}

fn cmd_dist(ctx: &Ctx, a: &DistArgs) -> CmdResult {
    check_histogram_flags(a.bins, a.range)?;
    let ckpt = load_model(&a.model, &a.check)?;
    let data = load_dataset(&a.data)?;
    ctx.prepare_out()?;
    let groups = cell_signatures(&ckpt, &data, a.bins, a.range)?;
    let matrix = distance_matrix(&groups)?;
    let labels: Vec<String> = groups.into_iter().map(|(l, _)| l).collect();
    ctx.write("distance_matrix.csv", distance_matrix_csv(&labels, &matrix).as_bytes())?;
    ctx.write("distance_matrix.pgm", &heatmap_pgm(&matrix, 8))?;
    ctx.say(format!("{} x {} distance matrix", labels.len(), labels.len()));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    let kind = match (a.kind, a.held.as_deref()) {
        (EvalKind::Lag, None) => MismatchKind::LagChange,
        (EvalKind::FeatureSet, None) => MismatchKind::FeatureSetChange,
        (EvalKind::LeaveMod, Some(h)) => MismatchKind::LeaveOneModulationOut {
            held: h.parse().map_err(|e| usage(format!("--held: {e}")))?,
        },
        (EvalKind::LeaveSnr, Some(h)) => MismatchKind::LeaveOneSnrOut {
            held_db: h
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(format!("--held: {h:?} is not a finite SNR")))?,
        },
        (EvalKind::LeaveMod | EvalKind::LeaveSnr, None) => return Err(usage("--held is required for this --kind")),
        (_, Some(_)) => return Err(usage("--held only applies to leave-mod and leave-snr")),
    };
    let base = a.features.config();
    let cfg = EvalConfig {
        train: a.training.config(ctx.seed, 0.0),
        overrides: a.training.overrides(),
        eval_fraction: a.eval_fraction,
        bins: a.bins,
        range: a.range,
    };
    base.validate().map_err(usage_from)?;
    cfg.train.validate().map_err(usage_from)?;
    cfg.overrides.resolve(&base).validate().map_err(usage_from)?;
    check_histogram_flags(a.bins, a.range)?;
    if !(a.eval_fraction > 0.0 && a.eval_fraction < 1.0) {
        return Err(usage("--eval-fraction must lie strictly between 0 and 1"));
    }

    let data = load_dataset(&a.data)?;
    ctx.prepare_out()?;
    let report = run_mismatch(&kind, &data, &base, &cfg)?;
    let name = kind.label();
    ctx.write(&format!("eval_{name}.csv"), report.to_csv().as_bytes())?;
    ctx.write(&format!("eval_{name}.pgm"), &report.heatmap_pgm())?;
    for audit in &report.audit {
        ctx.say(format!("trained {:?} on {} frames in {} cells", audit.condition, audit.frames, audit.cells.len()));
    }
    ctx.say(format!(
        "{name}: {} cells, max distance {:.4}, {:.1} s",
        report.cells.len(),
        report.max_distance(),
        report.wall_time.as_secs_f64()
    ));
    Ok(())
}

fn cmd_stream(ctx: &Ctx, a: &StreamArgs) -> CmdResult {
    check_histogram_flags(a.bins, a.range)?;
    if a.every == 0 {
        return Err(usage("--every must be at least 1"));
    }
    if a.queue == 0 {
        return Err(usage("--queue must be at least 1"));
    }
    if a.window == Some(0) {
        return Err(usage("--window must be at least 1"));
    }
    let idle = match a.idle_timeout {
        Some(s) if !(s > 0.0 && s.is_finite()) => return Err(usage("--idle-timeout must be positive")),
        Some(s) => Some(Duration::from_secs_f64(s)),
        None => None,
    };
    let ckpt = load_model(&a.model, &a.check)?;
    if a.len < ckpt.features.min_frame_len() {
        return Err(usage(format!(
            "--len {} is shorter than the model's minimum frame length {}",
            a.len,
            ckpt.features.min_frame_len()
        )));
    }
    ctx.prepare_out()?;
    let stream = stream_frames(&a.endpoint, a.len, a.queue)?;
    let mut window = RollingWindow::new(a.window.unwrap_or(a.every));
    let mut seen = 0usize;
    let mut snapshots = 0usize;
    let mut last_frame = Instant::now();
    loop {
        if a.max_frames.is_some_and(|m| seen >= m) {
            break;
        }
        if idle.is_some_and(|d| last_frame.elapsed() >= d) {
            ctx.say("idle timeout reached");
            break;
        }
        let Some(frame) = stream.recv_timeout(Duration::from_millis(100)) else {
            continue;
        };
        last_frame = Instant::now();
        seen += 1;
        let emb = embed_frame(&ckpt.params, &frame, &ckpt.features)?;
        window.push(histogram2d(&emb, a.bins, a.range)?);
        if seen.is_multiple_of(a.every) {
            let sigs: Vec<Signature> = window.items().cloned().collect();
            let snap = mean_signature(&sigs)?;
            ctx.write(&format!("stream_{snapshots:05}.csv"), snap.to_csv().as_bytes())?;
            ctx.write(&format!("stream_{snapshots:05}.pgm"), &snap.to_pgm())?;
            snapshots += 1;
            ctx.say(format!("frames={seen} snapshots={snapshots} dropped={}", stream.dropped()));
        }
    }
    ctx.say(format!("received {seen} frames, wrote {snapshots} snapshots, dropped {}", stream.dropped()));
    Ok(())
}
