//! On-disk formats and the live TCP sample stream.
//!
//! * **cf32**: interleaved little-endian `f32` pairs `i0, q0, i1, q1, ...`.
//! * **Dataset directory**: `manifest.json` plus one cf32 file per grid cell.
//! * **Checkpoint**: `"DME1"`, a `u32` LE header length, a JSON header, then
//!   the parameters as `f64` LE. Tensor order is encoder layers, mu head,
//!   logvar head, decoder layers, output head; each layer stores its weight
//!   (`fan_in × fan_out`, row-major) followed by its bias.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::features::FeatureConfig;
use crate::signal_gen::{Dataset, IqFrame, ModulationKind};
use crate::signature::EmbeddingSeries;
use crate::training::TrainConfig;
use crate::vae::{Architecture, NetworkParams};

const SAMPLE_BYTES: usize = 8;

pub fn encode_cf32(frames: &[IqFrame]) -> Vec<u8> {
    let total: usize = frames.iter().map(IqFrame::len).sum();
    let mut out = Vec::with_capacity(total * SAMPLE_BYTES);
    for f in frames {
        for (i, q) in f.i.iter().zip(&f.q) {
            out.extend_from_slice(&(*i as f32).to_le_bytes());
            out.extend_from_slice(&(*q as f32).to_le_bytes());
        }
    }
    out
}

/// Splits a cf32 byte buffer into frames of `frame_len` samples.
pub fn decode_cf32(bytes: &[u8], frame_len: usize) -> Result<Vec<IqFrame>> {
    if frame_len == 0 {
        return Err(Error::config("frame length must be at least 1"));
    }
    let frame_bytes = frame_len * SAMPLE_BYTES;
    if !bytes.len().is_multiple_of(frame_bytes) {
        let whole = bytes.len() / frame_bytes * frame_bytes;
        return Err(Error::Format {
            what: "cf32 data",
            detail: format!(
                "{} bytes is not a multiple of {frame_bytes} ({frame_len} samples); trailing bytes {}..{}",
                bytes.len(),
                whole,
                bytes.len()
            ),
        });
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .map(|chunk| {
            let (i, q) = chunk
                .chunks_exact(SAMPLE_BYTES)
                .map(|s| {
                    let i = f32::from_le_bytes([s[0], s[1], s[2], s[3]]);
                    let q = f32::from_le_bytes([s[4], s[5], s[6], s[7]]);
                    (i as f64, q as f64)
                })
                .unzip();
            IqFrame::new(i, q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(frames)
}

pub fn write_cf32(path: &Path, frames: &[IqFrame]) -> Result<()> {
    std::fs::write(path, encode_cf32(frames)).map_err(|e| Error::io("write cf32", path, e))
}

pub fn read_cf32(path: &Path, frame_len: usize) -> Result<Vec<IqFrame>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("read cf32", path, e))?;
    decode_cf32(&bytes, frame_len).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub modulation: ModulationKind,
    pub snr_db: f64,
    pub frame_len: usize,
    pub frame_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

fn cell_file_name(kind: ModulationKind, snr_db: f64) -> String {
    let snr = format!("{snr_db}").replace('-', "m").replace('.', "p");
    format!("{}_{snr}dB.cf32", kind.name().to_ascii_lowercase())
}

/// Writes one cf32 file per cell plus the manifest. Returns the manifest.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io("create directory", dir, e))?;
    let mut entries = Vec::new();
    for cell in dataset.cells() {
        if !cell.snr_db.is_finite() {
            return Err(Error::config(format!(
                "SNR {} of {} cannot be stored in a manifest",
                cell.snr_db, cell.modulation
            )));
        }
        let frames: Vec<IqFrame> = cell.frames.iter().map(|&k| dataset.frames[k].clone()).collect();
        let frame_len = frames[0].len();
        if frames.iter().any(|f| f.len() != frame_len) {
            return Err(Error::config(format!(
                "cell ({}, {} dB) mixes frame lengths",
                cell.modulation, cell.snr_db
            )));
        }
        let name = cell_file_name(cell.modulation, cell.snr_db);
        write_cf32(&dir.join(&name), &frames)?;
        entries.push(ManifestEntry {
            path: name,
            modulation: cell.modulation,
            snr_db: cell.snr_db,
            frame_len,
            frame_count: frames.len(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io("write manifest", &path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io("read manifest", &path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "dataset manifest",
        detail: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            what: "dataset manifest",
            detail: format!("version {} is not supported (expected {MANIFEST_VERSION})", manifest.version),
        });
    }
    Ok(manifest)
}

/// Loads every manifest entry in manifest order, labeling each frame.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    if manifest.entries.is_empty() {
        return Err(Error::Empty(format!("manifest in {}", dir.display())));
    }
    let mut frames = Vec::new();
    for entry in &manifest.entries {
        let path = dir.join(&entry.path);
        let cell = read_cf32(&path, entry.frame_len)?;
        if cell.len() != entry.frame_count {
            return Err(Error::Format {
                what: "dataset manifest",
                detail: format!(
                    "{} holds {} frames of {} samples, manifest says {}",
                    path.display(),
                    cell.len(),
                    entry.frame_len,
                    entry.frame_count
                ),
            });
        }
        frames.extend(
            cell.into_iter()
                .map(|f| f.with_meta(Some(entry.modulation), Some(entry.snr_db))),
        );
    }
    Dataset::new(frames)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DME1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub features: FeatureConfig,
    pub training: TrainConfig,
}

impl Checkpoint {
    /// Fails unless `requested` equals the feature configuration the network was trained with.
    pub fn check_features(&self, requested: &FeatureConfig) -> Result<()> {
        if self.features != *requested {
            return Err(CheckpointError::FeatureMismatch {
                checkpoint: format!("{:?}", self.features),
                requested: format!("{requested:?}"),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    architecture: Architecture,
    features: FeatureConfig,
    training: TrainConfig,
    /// Number of `f64` values in the payload.
    payload_len: usize,
    payload_fnv1a64: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::with_capacity(ckpt.params.parameter_count() * 8);
    for t in ckpt.params.tensors() {
        for v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        architecture: ckpt.params.arch,
        features: ckpt.features,
        training: ckpt.training,
        payload_len: ckpt.params.parameter_count(),
        payload_fnv1a64: fnv1a64(&payload),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(CheckpointError::CorruptHeader(format!("file is only {} bytes", bytes.len())).into());
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header_bytes = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| CheckpointError::CorruptHeader(format!("header length {header_len} exceeds file size")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    header
        .architecture
        .validate()
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut params = NetworkParams::zeros(&header.architecture)?;
    if header.payload_len != params.parameter_count() {
        return Err(CheckpointError::CorruptHeader(format!(
            "payload_len {} does not match the architecture's {} parameters",
            header.payload_len,
            params.parameter_count()
        ))
        .into());
    }
    let payload = &bytes[8 + header_len..];
    let expected = header.payload_len * 8;
    if payload.len() != expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let computed = fnv1a64(payload);
    if computed != header.payload_fnv1a64 {
        return Err(CheckpointError::ChecksumMismatch {
            expected: header.payload_fnv1a64,
            computed,
        }
        .into());
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut index = 0;
    for tensor in params.tensors_mut() {
        for slot in tensor.iter_mut() {
            let v = values.next().expect("length checked");
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite(index).into());
            }
            *slot = v;
            index += 1;
        }
    }
    Ok(Checkpoint {
        params,
        features: header.features,
        training: header.training,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io("write checkpoint", path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("read checkpoint", path, e))?;
    decode_checkpoint(&bytes)
}

/// Per-frame embedding CSV: one line per frame, `modulation,snr_db,t_offset,z...`.
pub fn embeddings_csv(rows: &[(&IqFrame, EmbeddingSeries)]) -> String {
    let mut out = String::from("modulation,snr_db,t_offset,z\n");
    for (frame, emb) in rows {
        out.push_str(frame.label.map_or("", |m| m.name()));
        out.push(',');
        if let Some(s) = frame.snr_db {
            out.push_str(&format!("{s}"));
        }
        out.push_str(&format!(",{}", emb.t_offset));
        for v in &emb.z {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub endpoint: String,
    pub frame_len: usize,
    pub queue_capacity: usize,
    pub connect_timeout: Duration,
    /// Upper bound on how long a blocked read delays a stop request.
    pub poll_interval: Duration,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl StreamConfig {
    pub fn new(endpoint: impl Into<String>, frame_len: usize, queue_capacity: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            frame_len,
            queue_capacity,
            connect_timeout: Duration::from_secs(2),
            poll_interval: Duration::from_millis(50),
            backoff_initial: Duration::from_millis(500),
            backoff_max: Duration::from_secs(8),
        }
    }
}

struct Shared {
    queue: Mutex<VecDeque<IqFrame>>,
    ready: Condvar,
    stop: AtomicBool,
    dropped: AtomicU64,
    delivered: AtomicU64,
    connections: AtomicU64,
    buffered: AtomicUsize,
}

/// Consumer handle of a running stream. Dropping it stops the reader thread.
pub struct FrameStream {
    shared: Arc<Shared>,
    reader: Option<JoinHandle<()>>,
}

impl FrameStream {
    /// Oldest queued frame, waiting up to `timeout`.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<IqFrame> {
        let deadline = Instant::now() + timeout;
        let mut queue = self.shared.queue.lock().expect("queue lock");
        loop {
            if let Some(f) = queue.pop_front() {
                return Some(f);
            }
            let now = Instant::now();
            if now >= deadline || self.shared.stop.load(Ordering::Relaxed) {
                return None;
            }
            queue = self.shared.ready.wait_timeout(queue, deadline - now).expect("queue lock").0;
        }
    }

    pub fn try_recv(&self) -> Option<IqFrame> {
        self.shared.queue.lock().expect("queue lock").pop_front()
    }

    /// Frames discarded because the queue was full.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    /// Frames completed by the reader, including dropped ones.
    pub fn framed(&self) -> u64 {
        self.shared.delivered.load(Ordering::Relaxed)
    }

    /// Samples received toward the next, still incomplete frame.
    pub fn buffered_samples(&self) -> usize {
        self.shared.buffered.load(Ordering::Relaxed)
    }

    pub fn connections(&self) -> u64 {
        self.shared.connections.load(Ordering::Relaxed)
    }

    pub fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        self.shared.ready.notify_all();
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for FrameStream {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn stream_frames(endpoint: &str, frame_len: usize, queue_capacity: usize) -> Result<FrameStream> {
    stream_frames_with(StreamConfig::new(endpoint, frame_len, queue_capacity))
}

/// Resolves the endpoint and starts the reader thread. Connection failures
/// after this point are retried with exponential backoff until stopped.
pub fn stream_frames_with(cfg: StreamConfig) -> Result<FrameStream> {
    if cfg.frame_len == 0 {
        return Err(Error::config("frame length must be at least 1"));
    }
    if cfg.queue_capacity == 0 {
        return Err(Error::config("queue capacity must be at least 1"));
    }
    let addrs: Vec<SocketAddr> = cfg
        .endpoint
        .to_socket_addrs()
        .map_err(|e| Error::Endpoint {
            endpoint: cfg.endpoint.clone(),
            detail: e.to_string(),
        })?
        .collect();
    if addrs.is_empty() {
        return Err(Error::Endpoint {
            endpoint: cfg.endpoint.clone(),
            detail: "resolved to no addresses".into(),
        });
    }
    let shared = Arc::new(Shared {
        queue: Mutex::new(VecDeque::with_capacity(cfg.queue_capacity)),
        ready: Condvar::new(),
        stop: AtomicBool::new(false),
        dropped: AtomicU64::new(0),
        delivered: AtomicU64::new(0),
        connections: AtomicU64::new(0),
        buffered: AtomicUsize::new(0),
    });
    let worker = Arc::clone(&shared);
    let reader = std::thread::Builder::new()
        .name("cf32-reader".into())
        .spawn(move || reader_loop(&cfg, &addrs, &worker))
        .map_err(|e| Error::Endpoint {
            endpoint: String::new(),
            detail: format!("cannot spawn reader: {e}"),
        })?;
    Ok(FrameStream {
        shared,
        reader: Some(reader),
    })
}

fn sleep_unless_stopped(shared: &Shared, total: Duration, step: Duration) {
    let deadline = Instant::now() + total;
    while !shared.stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        std::thread::sleep(step.min(deadline - now));
    }
}

fn connect(addrs: &[SocketAddr], timeout: Duration) -> Option<TcpStream> {
    addrs.iter().find_map(|a| TcpStream::connect_timeout(a, timeout).ok())
}

fn reader_loop(cfg: &StreamConfig, addrs: &[SocketAddr], shared: &Shared) {
    let mut backoff = cfg.backoff_initial;
    while !shared.stop.load(Ordering::Relaxed) {
        let Some(sock) = connect(addrs, cfg.connect_timeout) else {
            sleep_unless_stopped(shared, backoff, cfg.poll_interval);
            backoff = (backoff * 2).min(cfg.backoff_max);
            continue;
        };
        shared.connections.fetch_add(1, Ordering::Relaxed);
        backoff = cfg.backoff_initial;
        read_connection(sock, cfg, shared);
        // A partial frame never survives a disconnect.
        shared.buffered.store(0, Ordering::Relaxed);
        if !shared.stop.load(Ordering::Relaxed) {
            sleep_unless_stopped(shared, backoff, cfg.poll_interval);
            backoff = (backoff * 2).min(cfg.backoff_max);
        }
    }
}

fn read_connection(mut sock: TcpStream, cfg: &StreamConfig, shared: &Shared) {
    if sock.set_read_timeout(Some(cfg.poll_interval)).is_err() {
        return;
    }
    let frame_bytes = cfg.frame_len * SAMPLE_BYTES;
    let mut pending: Vec<u8> = Vec::with_capacity(frame_bytes);
    let mut buf = vec![0u8; 64 * 1024];
    while !shared.stop.load(Ordering::Relaxed) {
        let n = match sock.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                continue
            }
            Err(_) => return,
        };
        let mut chunk = &buf[..n];
        while !chunk.is_empty() {
            let take = (frame_bytes - pending.len()).min(chunk.len());
            pending.extend_from_slice(&chunk[..take]);
            chunk = &chunk[take..];
            if pending.len() == frame_bytes {
                let frame = decode_cf32(&pending, cfg.frame_len)
                    .expect("exactly one frame")
                    .pop()
                    .expect("one frame");
                pending.clear();
                push_frame(shared, frame, cfg.queue_capacity);
            }
        }
        shared.buffered.store(pending.len() / SAMPLE_BYTES, Ordering::Relaxed);
    }
}

fn push_frame(shared: &Shared, frame: IqFrame, capacity: usize) {
    let mut queue = shared.queue.lock().expect("queue lock");
    while queue.len() >= capacity {
        queue.pop_front();
        shared.dropped.fetch_add(1, Ordering::Relaxed);
    }
    queue.push_back(frame);
    shared.delivered.fetch_add(1, Ordering::Relaxed);
    drop(queue);
    shared.ready.notify_one();
}

/// Rolling window of the most recent embedded frames' signatures.
#[derive(Debug, Clone)]
pub struct RollingWindow<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> RollingWindow<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn items(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
