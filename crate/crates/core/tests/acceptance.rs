//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr.
//! The tests share a lock so that timed criteria run without competition.

mod common;

use std::io::Write as _;
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{finite_difference, max_relative_error, random_series};
use modembed::eval::{
    discrimination_score, frame_signatures, permutation_control, run_conditions, run_mismatch, Condition,
    EvalConfig, MismatchKind,
};
use modembed::features::{assemble_features, lag_differences, windowed_autocorrelation, FeatureConfig};
use modembed::io_stream::{
    decode_checkpoint, encode_cf32, encode_checkpoint, read_cf32, stream_frames, write_cf32, Checkpoint,
};
use modembed::seed::rng_from_seed;
use modembed::signal_gen::{generate_dataset, Dataset, DatasetSpec, IqFrame, ModulationKind};
use modembed::signature::{histogram2d, signature_distance, EmbeddingSeries};
use modembed::training::{adam_step, split_holdout, train, AdamState, ArchOverrides, TrainConfig, TrainHistory};
use modembed::vae::{grad, init_params, Activation, Architecture, NetworkParams};
use ndarray::Array2;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2}: {verdict} {detail}");
}

fn toy_grid() -> Dataset {
    generate_dataset(&DatasetSpec {
        modulations: vec![ModulationKind::Bpsk, ModulationKind::Qam16, ModulationKind::Wbfm, ModulationKind::Gfsk],
        snrs_db: vec![10.0],
        frames_per_cell: 50,
        frame_len: 125,
        seed: 2024,
    })
    .unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let started = Instant::now();
    let arch = Architecture {
        input_dim: 6,
        hidden_dim: 8,
        depth: 2,
        latent_dim: 1,
        target_dim: 4,
        activation: Activation::Tanh,
        dropout_rate: 0.2,
    };
    let mut worst = 0.0f64;
    for seed in [11u64, 12, 13] {
        let params = init_params(&arch, seed).unwrap();
        let (x, y) = random_series(10, 6, 4, seed + 50);
        let (_, analytic) = grad(&params, &x, &y, 0.1, seed).unwrap();
        let numeric = finite_difference(&params, &x, &y, 0.1, seed);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && secs < 10.0;
    report(1, ok, &format!("max relative error {worst:.2e} (< 1e-4), {secs:.2} s (< 10 s)"));
    assert!(ok);
}

#[test]
fn criterion_02_architecture_fidelity() {
    let _g = serial();
    let feat = FeatureConfig::default();
    let arch = ArchOverrides::default().resolve(&feat);
    let cfg = TrainConfig::default();
    let ok = arch.hidden_dim == 256
        && arch.depth == 3
        && arch.latent_dim == 1
        && arch.dropout_rate == 0.2
        && cfg.learning_rate == 1e-3
        && arch.validate().is_ok();
    report(
        2,
        ok,
        &format!(
            "hidden {} depth {} M {} dropout {} lr {}",
            arch.hidden_dim, arch.depth, arch.latent_dim, arch.dropout_rate, cfg.learning_rate
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_feature_dimension_pairing() {
    let _g = serial();
    let with_corr = FeatureConfig::default();
    let wide = FeatureConfig {
        lag_count: 16,
        include_correlations: false,
        ..with_corr
    };
    let mut rng = rng_from_seed(3);
    let frame = IqFrame::new(
        (0..125).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..125).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let cols_a = assemble_features(&frame, &with_corr).unwrap().0.values.ncols();
    let cols_b = assemble_features(&frame, &wide).unwrap().0.values.ncols();
    let ok = with_corr.input_dim() == 34 && wide.input_dim() == 34 && cols_a == 34 && cols_b == 34;
    report(3, ok, &format!("N(K=8, corr) = {cols_a}, N(K=16, no corr) = {cols_b}"));
    assert!(ok);
}

struct Trained {
    seed: u64,
    params: NetworkParams,
    history: TrainHistory,
}

struct ToyTraining {
    dataset: Dataset,
    runs: Vec<Trained>,
    seconds: f64,
}

const TOY_SEEDS: [u64; 2] = [1, 2];

fn toy_training() -> &'static ToyTraining {
    static CELL: OnceLock<ToyTraining> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = toy_grid();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let started = Instant::now();
        let runs = TOY_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    epochs: 30,
                    seed,
                    ..TrainConfig::default()
                };
                let (params, history) = pool
                    .install(|| train(&dataset, &FeatureConfig::default(), &ArchOverrides::default(), &cfg))
                    .unwrap();
                Trained { seed, params, history }
            })
            .collect();
        ToyTraining {
            dataset,
            runs,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_04_training_progress() {
    let _g = serial();
    let toy = toy_training();
    let mut ok = toy.seconds < 300.0;
    let mut detail = Vec::new();
    for run in &toy.runs {
        let first = run.history.epochs[0].train.total;
        let last = run.history.epochs.last().unwrap().train.total;
        let ratio = last / first;
        ok &= ratio < 0.5;
        detail.push(format!("seed {}: {first:.4} -> {last:.4} (ratio {ratio:.3}, need < 0.5)", run.seed));
    }
    detail.push(format!("{:.0} s for both seeds (< 300 s)", toy.seconds));
    report(4, ok, &detail.join("; "));
    assert!(ok);
}

#[test]
fn criterion_05_discrimination() {
    let _g = serial();
    let toy = toy_training();
    let feat = FeatureConfig::default();
    let mut ok = true;
    let mut detail = Vec::new();
    for run in &toy.runs {
        let (_, holdout) = split_holdout(&toy.dataset, TrainConfig::default().holdout_fraction, run.seed).unwrap();
        let sigs = frame_signatures(&run.params, &feat, &holdout, 64, 3.0).unwrap();
        let labeled: Vec<(ModulationKind, _)> = holdout
            .frames
            .iter()
            .map(|f| f.label.unwrap())
            .zip(sigs)
            .collect();
        let score = discrimination_score(&labeled).unwrap();
        let control = permutation_control(&labeled, 20, run.seed).unwrap();
        let ratios: Vec<f64> = control.iter().filter_map(|d| d.ratio).collect();
        let control_mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
        let ratio = score.ratio.unwrap_or(f64::NAN);
        ok &= ratio > 1.2 && ratios.len() == 20 && (0.5..=2.0).contains(&control_mean);
        detail.push(format!(
            "seed {}: inter {:.3} intra {:.3} ratio {ratio:.3} (> 1.2), permuted mean {control_mean:.3} in [0.5, 2]",
            run.seed, score.inter, score.intra
        ));
    }
    report(5, ok, &detail.join("; "));
    assert!(ok);
}

#[test]
fn criterion_06_flip_invariance() {
    let _g = serial();
    let mut rng = rng_from_seed(6);
    let mut nonzero = 0;
    for k in 0..100 {
        let len = rng.random_range(2..400);
        let scale = rng.random_range(0.1..4.0);
        let mut z: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        if k % 10 == 0 {
            // Repeated values put exact zeros on the difference axis.
            z = z.iter().map(|v| (v * 2.0).round() / 2.0).collect();
        }
        let e = EmbeddingSeries { z, t_offset: 0 };
        let neg = EmbeddingSeries {
            z: e.z.iter().map(|v| -v).collect(),
            t_offset: 0,
        };
        let d = signature_distance(&histogram2d(&e, 64, 3.0).unwrap(), &histogram2d(&neg, 64, 3.0).unwrap()).unwrap();
        if d != 0.0 {
            nonzero += 1;
        }
    }
    report(6, nonzero == 0, &format!("{nonzero} of 100 negated embeddings at nonzero distance"));
    assert_eq!(nonzero, 0);
}

#[test]
fn criterion_07_mismatch_harness() {
    let _g = serial();
    let data = toy_grid();
    let cfg = EvalConfig {
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        ..EvalConfig::default()
    };
    let held = ModulationKind::Wbfm;
    let report_b = run_mismatch(&MismatchKind::LeaveOneModulationOut { held }, &data, &FeatureConfig::default(), &cfg)
        .unwrap();
    let audited = report_b.audit[0].trained_on_modulation(held) && !report_b.audit[1].trained_on_modulation(held);
    let wbfm: Vec<f64> = report_b
        .cells
        .iter()
        .filter(|c| c.modulation == held)
        .map(|c| c.distance)
        .collect();
    let wbfm_ok = wbfm.len() == 1 && wbfm.iter().all(|d| d.is_finite() && (0.0..=1.0).contains(d));

    let null_cfg = EvalConfig {
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        ..EvalConfig::default()
    };
    let same = Condition::new("default", FeatureConfig::default());
    let null = run_conditions("null", &same, &same, &data, &null_cfg).unwrap();
    let null_ok = null.cells.len() == 4 && null.cells.iter().all(|c| c.distance == 0.0);

    let ok = audited && wbfm_ok && null_ok;
    report(
        7,
        ok,
        &format!(
            "held WBFM absent from B training: {audited}; WBFM distance {:?}; null report all zero: {null_ok}",
            wbfm
        ),
    );
    assert!(ok);
}

fn brute_bin(v: f64, b: usize, r: f64) -> usize {
    let width = 2.0 * r / b as f64;
    let mut k = 0;
    while k + 1 < b && v >= -r + (k + 1) as f64 * width {
        k += 1;
    }
    k
}

#[test]
fn criterion_08_oracle_equivalences() {
    let _g = serial();
    let mut rng = rng_from_seed(8);
    let len = 125;
    let i: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let q: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let frame = IqFrame::new(i.clone(), q.clone()).unwrap();
    let (k, w) = (8, 16);

    let diffs = lag_differences(&frame, k).unwrap();
    let mut diff_err = 0.0f64;
    for t in k..len {
        let row = diffs.row_for(t).unwrap();
        for l in 1..=k {
            diff_err = diff_err.max((row[l - 1] - (i[t] - i[t - l])).abs());
            diff_err = diff_err.max((row[k + l - 1] - (q[t] - q[t - l])).abs());
        }
    }

    let corr = windowed_autocorrelation(&frame, k, w).unwrap();
    let mut corr_err = 0.0f64;
    for t in (w - 1 + k)..len {
        let row = corr.row_for(t).unwrap();
        for (c, x) in [&i, &q].into_iter().enumerate() {
            for l in 1..=k {
                let now = &x[t + 1 - w..=t];
                let lagged = &x[t + 1 - w - l..=t - l];
                let dot: f64 = now.iter().zip(lagged).map(|(a, b)| a * b).sum();
                let norm = (now.iter().map(|a| a * a).sum::<f64>() * lagged.iter().map(|b| b * b).sum::<f64>()).sqrt();
                corr_err = corr_err.max((row[c * k + l - 1] - dot / norm).abs());
            }
        }
    }

    let z: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.5..3.5)).collect();
    let sig = histogram2d(&EmbeddingSeries { z: z.clone(), t_offset: 0 }, 64, 3.0).unwrap();
    let mut counts = Array2::<f64>::zeros((64, 64));
    for t in 0..999 {
        counts[[brute_bin(z[t], 64, 3.0), brute_bin(z[t + 1] - z[t], 64, 3.0)]] += 1.0;
    }
    let bin_err = sig
        .bins
        .iter()
        .zip(counts.iter())
        .map(|(a, c)| (a - c / 999.0).abs())
        .fold(0.0, f64::max);

    // Adam against a scalar recurrence written out per parameter.
    let arch = Architecture {
        input_dim: 2,
        hidden_dim: 3,
        depth: 1,
        latent_dim: 1,
        target_dim: 2,
        activation: Activation::Tanh,
        dropout_rate: 0.0,
    };
    let mut params = init_params(&arch, 8).unwrap();
    let start: Vec<f64> = params.tensors().concat();
    let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8).unwrap();
    let grads_at = |step: usize, k: usize| ((step * 7 + k * 3) % 11) as f64 / 5.0 - 1.0;
    let (mut m, mut v, mut p) = (vec![0.0; start.len()], vec![0.0; start.len()], start.clone());
    for step in 1..=25 {
        let mut g = NetworkParams::zeros(&arch).unwrap();
        let mut idx = 0;
        for t in g.tensors_mut() {
            for slot in t.iter_mut() {
                *slot = grads_at(step, idx);
                idx += 1;
            }
        }
        adam_step(&mut params, &g, &mut state, 1e-2).unwrap();
        for j in 0..p.len() {
            let gj = grads_at(step, j);
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let mh = m[j] / (1.0 - 0.9f64.powi(step as i32));
            let vh = v[j] / (1.0 - 0.999f64.powi(step as i32));
            p[j] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
    }
    let adam_err = params
        .tensors()
        .concat()
        .iter()
        .zip(&p)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let ok = diff_err <= 1e-12 && corr_err <= 1e-12 && bin_err <= 1e-12 && adam_err <= 1e-12;
    report(
        8,
        ok,
        &format!(
            "max abs error: lag diff {diff_err:.1e}, autocorr {corr_err:.1e}, binning {bin_err:.1e}, Adam {adam_err:.1e} (each <= 1e-12)"
        ),
    );
    assert!(ok);
}

fn loopback_frames(samples: usize, frame_len: usize) -> (usize, usize) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let (release, wait) = std::sync::mpsc::channel::<()>();
    let server = std::thread::spawn(move || {
        let (mut sock, _) = listener.accept().unwrap();
        let i: Vec<f64> = (0..samples).map(|k| k as f64).collect();
        sock.write_all(&encode_cf32(&[IqFrame::new(i.clone(), i).unwrap()])).unwrap();
        let _ = wait.recv_timeout(Duration::from_secs(20));
    });
    let stream = stream_frames(&addr, frame_len, 8).unwrap();
    let mut got = 0;
    let deadline = Instant::now() + Duration::from_secs(3);
    while Instant::now() < deadline {
        if stream.recv_timeout(Duration::from_millis(100)).is_some() {
            got += 1;
        } else if got * frame_len + stream.buffered_samples() == samples {
            break;
        }
    }
    let buffered = stream.buffered_samples();
    release.send(()).unwrap();
    server.join().unwrap();
    (got, buffered)
}

#[test]
fn criterion_09_io_round_trips() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(9);
    let frames: Vec<IqFrame> = (0..3)
        .map(|_| {
            IqFrame::new(
                (0..125).map(|_| rng.random_range(-3.0..3.0) as f32 as f64).collect(),
                (0..125).map(|_| rng.random_range(-3.0..3.0) as f32 as f64).collect(),
            )
            .unwrap()
        })
        .collect();
    let path = dir.path().join("f.cf32");
    write_cf32(&path, &frames).unwrap();
    let cf32_ok = read_cf32(&path, 125).unwrap() == frames;

    let features = FeatureConfig::default();
    let ckpt = Checkpoint {
        params: init_params(&Architecture::new(features.input_dim(), features.target_dim()), 9).unwrap(),
        features,
        training: TrainConfig::default(),
    };
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).unwrap();
    let ckpt_ok = back == ckpt
        && back
            .params
            .tensors()
            .concat()
            .iter()
            .zip(ckpt.params.tensors().concat())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut corrupt = bytes.clone();
    let at = bytes.len() - 100;
    corrupt[at] ^= 0x40;
    let corrupt_ok = decode_checkpoint(&corrupt).is_err();

    let (two, rest_two) = loopback_frames(250, 125);
    let (one, rest_one) = loopback_frames(130, 125);
    let stream_ok = (two, rest_two) == (2, 0) && (one, rest_one) == (1, 5);

    let ok = cf32_ok && ckpt_ok && corrupt_ok && stream_ok;
    report(
        9,
        ok,
        &format!(
            "cf32 {cf32_ok}, checkpoint {ckpt_ok}, corruption detected {corrupt_ok}, \
             250 samples -> {two} frames, 130 samples -> {one} frame + {rest_one} buffered"
        ),
    );
    assert!(ok);
}

fn pipeline(root: &Path, workers: &str) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_modembed");
    let run = |out: &Path, args: &[&str]| {
        let status = Command::new(bin)
            .args(["--seed", "77", "--quiet", "--workers", workers, "--out", out.to_str().unwrap()])
            .args(args)
            .status()
            .unwrap();
        assert!(status.success(), "{args:?}");
    };
    let (data, model, sig, dist) = (root.join("data"), root.join("model"), root.join("sig"), root.join("dist"));
    run(&data, &["gen", "--mods", "BPSK,QAM16,WBFM", "--snrs", "0,10", "--frames", "6"]);
    let d = data.to_str().unwrap();
    run(&model, &["train", "--data", d, "--epochs", "2", "--hidden", "32"]);
    let ckpt = model.join("model.ckpt");
    let m = ckpt.to_str().unwrap();
    run(&sig, &["sign", "--model", m, "--data", d]);
    run(&dist, &["dist", "--model", m, "--data", d]);

    let mut files = Vec::new();
    for dir in [&model, &sig, &dist] {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        for p in names {
            files.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    files
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), "1");
    let second = pipeline(b.path(), "4");
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let ok = first.len() == second.len() && first.len() >= 8 && differing.is_empty();
    report(
        10,
        ok,
        &format!("{} CSV files compared across --workers 1 and 4, {} differ", first.len(), differing.len()),
    );
    assert!(ok);
}
