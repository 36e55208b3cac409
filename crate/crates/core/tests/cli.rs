use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;
use std::time::Duration;

use clap::Parser;
use modembed::cli::{Cli, Command as Sub};
use modembed::features::FeatureConfig;
use modembed::io_stream::{encode_cf32, load_checkpoint, load_manifest, save_checkpoint, Checkpoint};
use modembed::signal_gen::{generate_frame, ModulationKind};
use modembed::seed::rng_from_seed;
use modembed::training::TrainConfig;
use modembed::vae::{Architecture, NetworkParams};

fn modembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modembed")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_writes_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = modembed(&["--out", p(dir.path()), "--quiet", "gen", "--mods", "all", "--snrs", "0,6,10", "--frames", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = load_manifest(dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 33);
    assert_eq!(manifest.entries.iter().map(|e| e.frame_count).sum::<usize>(), 660);
    assert!(manifest.entries.iter().all(|e| e.frame_len == 125));
}

#[test]
fn gen_accepts_large_cells_and_rejects_short_frames() {
    let dir = tempfile::tempdir().unwrap();
    let ok = modembed(&["--out", p(dir.path()), "--quiet", "gen", "--mods", "WBFM", "--snrs", "6", "--frames", "1000"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(load_manifest(dir.path()).unwrap().entries[0].frame_count, 1000);

    let short = modembed(&["--out", p(dir.path()), "gen", "--mods", "WBFM", "--snrs", "10", "--frames", "1", "--len", "16"]);
    assert_eq!(short.status.code(), Some(2));
    let bad_mod = modembed(&["--out", p(dir.path()), "gen", "--mods", "OOK", "--snrs", "10", "--frames", "1"]);
    assert_eq!(bad_mod.status.code(), Some(2));
    let negative = modembed(&["--out", p(&dir.path().join("neg")), "--quiet", "gen", "--mods", "BPSK", "--snrs", "-4", "--frames", "2"]);
    assert_eq!(negative.status.code(), Some(0));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(modembed(&["gen", "--snrs", "1", "--frames", "1", "--bogus"]).status.code(), Some(2));
    assert_eq!(modembed(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = modembed(&["--out", p(dir.path()), "train", "--data", p(&dir.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_lr = modembed(&["--out", p(dir.path()), "train", "--data", p(&dir.path().join("nope")), "--lr", "0"]);
    assert_eq!(bad_lr.status.code(), Some(2));
    let help = modembed(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    for flag in ["--data", "--lags", "--corr", "--target-lags", "--hidden", "--depth", "--dropout", "--lr", "--beta-kl", "--epochs", "--seed", "--out", "--quiet"] {
        assert!(stdout(&help).contains(flag), "missing {flag} in help");
    }
}

#[test]
fn train_defaults_match_the_reference_architecture() {
    let cli = Cli::try_parse_from(["modembed", "train", "--data", "d"]).unwrap();
    let Sub::Train(args) = cli.command else { panic!("not train") };
    assert_eq!(args.training.hidden, 256);
    assert_eq!(args.training.depth, 3);
    assert_eq!(args.training.dropout, 0.2);
    assert_eq!(args.training.lr, 1e-3);
    assert_eq!(args.training.beta_kl, 1e-3);
    assert_eq!(args.training.epochs, 50);
    assert_eq!((args.features.lags, args.features.target_lags), (8, 8));
}

fn small_dataset(dir: &Path, mods: &str) {
    let out = modembed(&["--out", p(dir), "--quiet", "gen", "--mods", mods, "--snrs", "10", "--frames", "5", "--len", "96"]);
    assert!(out.status.success());
}

#[test]
fn train_one_epoch_and_feature_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "BPSK,QPSK");
    let model = dir.path().join("m16");
    let out = modembed(&[
        "--out", p(&model), "train", "--data", p(&data), "--lags", "16", "--corr", "off", "--epochs", "1", "--hidden", "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = stdout(&out);
    assert!(log.contains("input_dim=34"), "{log}");
    assert!(log.contains("epoch=1 train="));
    let ckpt = load_checkpoint(&model.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.params.arch.input_dim, 34);
    assert!(!ckpt.features.include_correlations);

    let default = modembed(&["--out", p(&dir.path().join("m8")), "train", "--data", p(&data), "--epochs", "1", "--hidden", "16"]);
    assert!(stdout(&default).contains("input_dim=34"));

    let embed = modembed(&["--out", p(&dir.path().join("e")), "embed", "--model", p(&model.join("model.ckpt")), "--data", p(&data)]);
    assert!(embed.status.success());
    let csv = std::fs::read_to_string(dir.path().join("e/embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().nth(1).unwrap().starts_with("BPSK,10,31,"));

    let mismatch = modembed(&["--out", p(&dir.path().join("e")), "embed", "--model", p(&model.join("model.ckpt")), "--data", p(&data), "--corr", "on"]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("feature configuration mismatch"));
}

/// Network whose latent mean is the constant 1.0.
fn constant_latent_checkpoint(path: &Path) {
    let features = FeatureConfig::default();
    let mut arch = Architecture::new(features.input_dim(), features.target_dim());
    arch.hidden_dim = 4;
    let mut params = NetworkParams::zeros(&arch).unwrap();
    params.mu_head.bias[0] = 1.0;
    save_checkpoint(path, &Checkpoint { params, features, training: TrainConfig::default() }).unwrap();
}

#[test]
fn sign_on_constant_latent_gives_single_bin() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "BPSK");
    let model = dir.path().join("const.ckpt");
    constant_latent_checkpoint(&model);
    let out_dir = dir.path().join("sig");
    let out = modembed(&["--out", p(&out_dir), "sign", "--model", p(&model), "--data", p(&data), "--bins", "63"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = std::fs::read(out_dir.join("sig_BPSK_10dB.pgm")).unwrap();
    let header = b"P5\n63 63\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let lit: Vec<u8> = pgm[header.len()..].iter().copied().filter(|&v| v > 0).collect();
    assert_eq!(lit, vec![255]);
    let ppm = std::fs::read(out_dir.join("traj_BPSK_10dB.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n256 256\n255\n"));
    let csv = std::fs::read_to_string(out_dir.join("sig_BPSK_10dB.csv")).unwrap();
    assert!(csv.starts_with("# B=63 R=3\n"));
}

#[test]
fn eval_leave_mod_reports_the_held_modulation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "BPSK,QAM16,WBFM");
    let out_dir = dir.path().join("eval");
    let out = modembed(&[
        "--out", p(&out_dir), "eval", "--data", p(&data), "--kind", "leave-mod", "--held", "WBFM", "--epochs", "1",
        "--hidden", "16", "--depth", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("eval_leave-mod-WBFM.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("modulation,snr_db,distance"));
    let wbfm = csv.lines().find(|l| l.starts_with("WBFM,")).expect("WBFM row");
    let d: f64 = wbfm.rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&d));
    assert!(out_dir.join("eval_leave-mod-WBFM.pgm").exists());

    let no_held = modembed(&["--out", p(&out_dir), "eval", "--data", p(&data), "--kind", "leave-mod"]);
    assert_eq!(no_held.status.code(), Some(2));
    let absent = modembed(&[
        "--out", p(&out_dir), "eval", "--data", p(&data), "--kind", "leave-mod", "--held", "GFSK", "--epochs", "1", "--hidden", "8",
    ]);
    assert_eq!(absent.status.code(), Some(1));
}

#[test]
fn stream_against_loopback_writes_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("const.ckpt");
    constant_latent_checkpoint(&model);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (mut sock, _) = listener.accept().unwrap();
        let mut rng = rng_from_seed(4);
        let frames: Vec<_> = (0..4)
            .map(|_| generate_frame(ModulationKind::Wbfm, 10.0, 125, &mut rng).unwrap())
            .collect();
        sock.write_all(&encode_cf32(&frames)).unwrap();
        thread::sleep(Duration::from_secs(3));
    });
    let out_dir = dir.path().join("live");
    let out = modembed(&[
        "--out", p(&out_dir), "stream", "--endpoint", &endpoint, "--model", p(&model), "--len", "125", "--every", "2",
        "--max-frames", "4", "--idle-timeout", "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("stream_00000.csv").exists());
    assert!(out_dir.join("stream_00001.pgm").exists());
    server.join().unwrap();

    let unresolvable = modembed(&["--out", p(&out_dir), "stream", "--endpoint", "nowhere.invalid:1", "--model", p(&model)]);
    assert_eq!(unresolvable.status.code(), Some(1));
}
