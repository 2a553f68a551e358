//! Moves capture windows from the physical side to the twin.
//!
//! A window travels as a [`Frame`]: its [`WindowManifest`] plus the pcap
//! bytes. The [`LinkModel`] decides, on the sending side, whether a window is
//! lost and when it would arrive given latency and bandwidth; the channel
//! implementations only carry bytes. The receiver verifies digests, restores
//! sequence order and reports holes as lost windows. [`SyncLog`] collects the
//! per-window timeline every latency metric is computed from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capture::{read_pcap, CaptureWindow, PcapError};
use crate::model::{Micros, MICROS_PER_SEC};

pub const DIGEST_ALGORITHM: &str = "sha-256";
pub const END_OF_STREAM_MARKER: &str = "end_of_stream";
const MAX_TCP_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowManifest {
    pub seq: u64,
    pub start_ts_micros: Micros,
    pub end_ts_micros: Micros,
    pub byte_length: u64,
    pub digest_algorithm: String,
    pub content_digest: String,
    pub source_interface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub manifest: WindowManifest,
    pub pcap: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("timed out waiting for a window")]
    Timeout,
    #[error("window {seq}: content digest mismatch")]
    DigestMismatch { seq: u64 },
    #[error("window {seq}: malformed frame: {reason}")]
    Malformed { seq: u64, reason: String },
    #[error("malformed frame: {0}")]
    BadFrame(String),
    #[error("window {seq}: {source}")]
    Pcap {
        seq: u64,
        #[source]
        source: PcapError,
    },
    #[error("invalid channel spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("socket: {0}")]
    Socket(#[from] io::Error),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> TransportError + '_ {
    move |source| TransportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a window into its transfer frame.
pub fn encode_window(w: &CaptureWindow) -> Result<Frame, TransportError> {
    let pcap = w.to_pcap().map_err(|source| TransportError::Pcap { seq: w.seq, source })?;
    Ok(Frame {
        manifest: WindowManifest {
            seq: w.seq,
            start_ts_micros: w.start_ts_micros,
            end_ts_micros: w.end_ts_micros,
            byte_length: pcap.len() as u64,
            digest_algorithm: DIGEST_ALGORITHM.into(),
            content_digest: sha256_hex(&pcap),
            source_interface: w.source_interface.clone(),
        },
        pcap,
    })
}

/// Verifies and unpacks a frame. Any digest or length disagreement is a
/// [`TransportError::DigestMismatch`].
pub fn decode_frame(frame: &Frame) -> Result<CaptureWindow, TransportError> {
    let m = &frame.manifest;
    if m.digest_algorithm != DIGEST_ALGORITHM {
        return Err(TransportError::Malformed {
            seq: m.seq,
            reason: format!("unsupported digest algorithm {:?}", m.digest_algorithm),
        });
    }
    if m.byte_length != frame.pcap.len() as u64 || sha256_hex(&frame.pcap) != m.content_digest {
        return Err(TransportError::DigestMismatch { seq: m.seq });
    }
    let (_, packets) =
        read_pcap(&frame.pcap).map_err(|source| TransportError::Pcap { seq: m.seq, source })?;
    Ok(CaptureWindow {
        seq: m.seq,
        start_ts_micros: m.start_ts_micros,
        end_ts_micros: m.end_ts_micros,
        packets,
        source_interface: m.source_interface.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    InProcess,
    DirectoryExchange,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub latency_us: Micros,
    pub bandwidth_bps: u64,
    pub loss_probability: f64,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn lossless(kind: ChannelKind) -> Self {
        ChannelSpec {
            kind,
            latency_us: 0,
            bandwidth_bps: 1_000_000_000,
            loss_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(TransportError::InvalidSpec(format!(
                "loss_probability {} outside [0, 1]",
                self.loss_probability
            )));
        }
        if self.bandwidth_bps == 0 {
            return Err(TransportError::InvalidSpec("bandwidth_bps must be positive".into()));
        }
        Ok(())
    }
}

/// Sender-side delay and loss model. Windows are serialized onto the link one
/// at a time, so a window that is ready while the previous one is still being
/// transmitted waits for the link; there is no bound on that backlog.
#[derive(Debug, Clone)]
pub struct LinkModel {
    latency_us: Micros,
    bandwidth_bps: u64,
    loss_probability: f64,
    rng: ChaCha8Rng,
    link_free_at: Micros,
}

impl LinkModel {
    pub fn new(spec: &ChannelSpec) -> Result<Self, TransportError> {
        spec.validate()?;
        Ok(LinkModel {
            latency_us: spec.latency_us,
            bandwidth_bps: spec.bandwidth_bps,
            loss_probability: spec.loss_probability,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            link_free_at: 0,
        })
    }

    /// Time to clock `bytes` onto the link, rounded up to whole microseconds.
    pub fn serialization_us(&self, bytes: u64) -> Micros {
        let bits = bytes as u128 * 8 * MICROS_PER_SEC as u128;
        bits.div_ceil(self.bandwidth_bps as u128) as Micros
    }

    /// Returns the arrival time, or `None` when the window is lost.
    pub fn transmit(&mut self, bytes: u64, t_sent: Micros) -> Option<Micros> {
        let lost = self.rng.random::<f64>() < self.loss_probability;
        let start = t_sent.max(self.link_free_at);
        let done = start + self.serialization_us(bytes);
        self.link_free_at = done;
        (!lost).then_some(done + self.latency_us)
    }
}

pub trait FrameSender: Send {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError>;
    /// Signals end-of-stream to the receiver.
    fn close(&mut self) -> Result<(), TransportError>;
}

pub enum Polled {
    Frame(Frame),
    Closed,
    TimedOut,
}

pub trait FrameReceiver: Send {
    /// Waits up to `timeout` (forever when `None`) for the next frame.
    fn poll(&mut self, timeout: Option<Duration>) -> Result<Polled, TransportError>;
    /// True when frames can never overtake each other, so a sequence gap is
    /// known to be permanent as soon as a later frame shows up.
    fn is_ordered(&self) -> bool;
}

// ---- in-process ----

pub struct InProcessSender {
    tx: Option<SyncSender<Frame>>,
}

pub struct InProcessReceiver {
    rx: Receiver<Frame>,
}

/// Bounded FIFO queue between two threads.
pub fn in_process_channel(capacity: usize) -> (InProcessSender, InProcessReceiver) {
    let (tx, rx) = mpsc::sync_channel(capacity);
    (InProcessSender { tx: Some(tx) }, InProcessReceiver { rx })
}

impl FrameSender for InProcessSender {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        let tx = self.tx.as_ref().ok_or(TransportError::ChannelClosed)?;
        tx.send(frame).map_err(|_| TransportError::ChannelClosed)
    }

    fn close(&mut self) -> Result<(), TransportError> {
        self.tx = None;
        Ok(())
    }
}

fn poll_mpsc<T>(rx: &Receiver<T>, timeout: Option<Duration>) -> Result<T, RecvTimeoutError> {
    match timeout {
        None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        Some(d) => rx.recv_timeout(d),
    }
}

impl FrameReceiver for InProcessReceiver {
    fn poll(&mut self, timeout: Option<Duration>) -> Result<Polled, TransportError> {
        Ok(match poll_mpsc(&self.rx, timeout) {
            Ok(f) => Polled::Frame(f),
            Err(RecvTimeoutError::Timeout) => Polled::TimedOut,
            Err(RecvTimeoutError::Disconnected) => Polled::Closed,
        })
    }

    fn is_ordered(&self) -> bool {
        true
    }
}

// ---- directory exchange ----

pub fn manifest_file_name(seq: u64) -> String {
    format!("window_{seq}.manifest.json")
}

/// Writes `window_<seq>.pcap` then `window_<seq>.manifest.json` into a shared
/// folder. Each file is written under a temporary name and renamed, and the
/// manifest goes last, so a visible manifest always has its pcap beside it.
pub struct DirectorySender {
    dir: PathBuf,
}

impl DirectorySender {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, TransportError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        Ok(DirectorySender { dir })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TransportError> {
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

impl FrameSender for DirectorySender {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        let seq = frame.manifest.seq;
        write_atomic(&self.dir.join(CaptureWindow::file_name(seq)), &frame.pcap)?;
        let manifest = serde_json::to_vec_pretty(&frame.manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(manifest_file_name(seq)), &manifest)
    }

    fn close(&mut self) -> Result<(), TransportError> {
        let path = self.dir.join(END_OF_STREAM_MARKER);
        fs::write(&path, b"").map_err(io_at(&path))
    }
}

pub struct DirectoryReceiver {
    dir: PathBuf,
    poll_interval: Duration,
    consumed: BTreeSet<u64>,
}

impl DirectoryReceiver {
    pub fn new(dir: impl Into<PathBuf>, poll_interval: Duration) -> Self {
        DirectoryReceiver {
            dir: dir.into(),
            poll_interval,
            consumed: BTreeSet::new(),
        }
    }

    fn scan(&self) -> Result<Option<u64>, TransportError> {
        let mut best: Option<u64> = None;
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_at(&self.dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_at(&self.dir))?;
            let name = entry.file_name();
            let Some(seq) = name
                .to_str()
                .and_then(|n| n.strip_prefix("window_"))
                .and_then(|n| n.strip_suffix(".manifest.json"))
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            if !self.consumed.contains(&seq) && best.is_none_or(|b| seq < b) {
                best = Some(seq);
            }
        }
        Ok(best)
    }

    fn load(&mut self, seq: u64) -> Result<Frame, TransportError> {
        self.consumed.insert(seq);
        let mpath = self.dir.join(manifest_file_name(seq));
        let manifest: WindowManifest = serde_json::from_slice(&fs::read(&mpath).map_err(io_at(&mpath))?)
            .map_err(|e| TransportError::Malformed {
                seq,
                reason: e.to_string(),
            })?;
        if manifest.seq != seq {
            return Err(TransportError::Malformed {
                seq,
                reason: format!("manifest names seq {}", manifest.seq),
            });
        }
        let ppath = self.dir.join(CaptureWindow::file_name(seq));
        let pcap = fs::read(&ppath).map_err(io_at(&ppath))?;
        Ok(Frame { manifest, pcap })
    }
}

impl FrameReceiver for DirectoryReceiver {
    fn poll(&mut self, timeout: Option<Duration>) -> Result<Polled, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            // Check the marker before scanning so a frame written just before
            // close is never missed.
            let closed = self.dir.join(END_OF_STREAM_MARKER).exists();
            if let Some(seq) = self.scan()? {
                return self.load(seq).map(Polled::Frame);
            }
            if closed {
                return Ok(Polled::Closed);
            }
            let mut nap = self.poll_interval;
            if let Some(d) = deadline {
                let now = Instant::now();
                if now >= d {
                    return Ok(Polled::TimedOut);
                }
                nap = nap.min(d - now);
            }
            thread::sleep(nap);
        }
    }

    fn is_ordered(&self) -> bool {
        false
    }
}

// ---- TCP ----

/// Frames are `u32 BE length + manifest JSON` followed by
/// `u32 BE length + pcap bytes`. A clean close at a frame boundary ends the
/// stream.
pub struct TcpSender {
    stream: BufWriter<TcpStream>,
}

impl TcpSender {
    pub fn connect(addr: impl std::net::ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpSender {
            stream: BufWriter::new(stream),
        })
    }
}

pub fn write_tcp_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let manifest = serde_json::to_vec(&frame.manifest).expect("manifest serializes");
    w.write_all(&(manifest.len() as u32).to_be_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&(frame.pcap.len() as u32).to_be_bytes())?;
    w.write_all(&frame.pcap)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_tcp_frame(r: &mut impl Read) -> Result<Option<Frame>, TransportError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let manifest_bytes = read_block(r, u32::from_be_bytes(len))?;
    let manifest: WindowManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| TransportError::BadFrame(format!("manifest: {e}")))?;
    r.read_exact(&mut len)
        .map_err(|e| TransportError::BadFrame(format!("pcap length: {e}")))?;
    let pcap = read_block(r, u32::from_be_bytes(len))?;
    Ok(Some(Frame { manifest, pcap }))
}

fn read_block(r: &mut impl Read, len: u32) -> Result<Vec<u8>, TransportError> {
    if len > MAX_TCP_FRAME {
        return Err(TransportError::BadFrame(format!("block of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| TransportError::BadFrame(format!("truncated block: {e}")))?;
    Ok(buf)
}

impl FrameSender for TcpSender {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        write_tcp_frame(&mut self.stream, &frame)?;
        self.stream.flush()?;
        Ok(())
    }

    fn close(&mut self) -> Result<(), TransportError> {
        self.stream.flush()?;
        self.stream.get_ref().shutdown(std::net::Shutdown::Write)?;
        Ok(())
    }
}

/// Accepts one connection and decodes frames on a reader thread.
pub struct TcpReceiver {
    rx: Receiver<Result<Frame, TransportError>>,
}

impl TcpReceiver {
    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (stream, _) = listener.accept()?;
        let (tx, rx) = mpsc::sync_channel(16);
        thread::spawn(move || {
            let mut r = BufReader::new(stream);
            loop {
                match read_tcp_frame(&mut r) {
                    Ok(Some(f)) => {
                        if tx.send(Ok(f)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        Ok(TcpReceiver { rx })
    }
}

impl FrameReceiver for TcpReceiver {
    fn poll(&mut self, timeout: Option<Duration>) -> Result<Polled, TransportError> {
        match poll_mpsc(&self.rx, timeout) {
            Ok(Ok(f)) => Ok(Polled::Frame(f)),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => Ok(Polled::TimedOut),
            Err(RecvTimeoutError::Disconnected) => Ok(Polled::Closed),
        }
    }

    fn is_ordered(&self) -> bool {
        true
    }
}

// ---- sync endpoints ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SendReceipt {
    pub seq: u64,
    pub t_window_start: Micros,
    pub t_window_end: Micros,
    pub t_sent: Micros,
    pub byte_length: u64,
    /// `None` when the link model dropped the window.
    pub scheduled_arrival: Option<Micros>,
}

impl SendReceipt {
    pub fn dropped(&self) -> bool {
        self.scheduled_arrival.is_none()
    }
}

pub struct WindowSender {
    link: LinkModel,
    channel: Box<dyn FrameSender>,
}

impl WindowSender {
    pub fn new(spec: &ChannelSpec, channel: Box<dyn FrameSender>) -> Result<Self, TransportError> {
        Ok(WindowSender {
            link: LinkModel::new(spec)?,
            channel,
        })
    }

    /// Encodes and ships `w`. Dropped windows still produce a receipt.
    pub fn send_window(&mut self, w: &CaptureWindow, t_sent: Micros) -> Result<SendReceipt, TransportError> {
        let frame = encode_window(w)?;
        let byte_length = frame.manifest.byte_length;
        let scheduled_arrival = self.link.transmit(byte_length, t_sent);
        if scheduled_arrival.is_some() {
            self.channel.send(frame)?;
        }
        Ok(SendReceipt {
            seq: w.seq,
            t_window_start: w.start_ts_micros,
            t_window_end: w.end_ts_micros,
            t_sent,
            byte_length,
            scheduled_arrival,
        })
    }

    pub fn close(mut self) -> Result<(), TransportError> {
        self.channel.close()
    }
}

#[derive(Debug)]
pub enum RecvEvent {
    Window {
        window: CaptureWindow,
        manifest: WindowManifest,
    },
    /// A sequence number that will never be delivered.
    Lost(u64),
    End,
}

/// Reassembles the window sequence. Out-of-order arrivals are buffered; a
/// hole is declared lost once a later window is present and either the
/// channel is ordered or `reorder_timeout` has passed.
pub struct WindowReceiver {
    channel: Box<dyn FrameReceiver>,
    reorder_timeout: Duration,
    idle_timeout: Option<Duration>,
    expected: u64,
    buffer: BTreeMap<u64, (CaptureWindow, WindowManifest)>,
    corrupt: BTreeSet<u64>,
    lost: Vec<u64>,
    hole_since: Option<Instant>,
    closed: bool,
}

impl WindowReceiver {
    pub fn new(channel: Box<dyn FrameReceiver>, reorder_timeout: Duration) -> Self {
        WindowReceiver {
            channel,
            reorder_timeout,
            idle_timeout: None,
            expected: 0,
            buffer: BTreeMap::new(),
            corrupt: BTreeSet::new(),
            lost: Vec::new(),
            hole_since: None,
            closed: false,
        }
    }

    /// Fail with [`TransportError::Timeout`] if nothing arrives for this long.
    pub fn with_idle_timeout(mut self, t: Duration) -> Self {
        self.idle_timeout = Some(t);
        self
    }

    /// Sequence numbers given up on, including corrupted ones.
    pub fn lost(&self) -> &[u64] {
        &self.lost
    }

    fn advance(&mut self) {
        self.expected += 1;
        self.hole_since = None;
    }

    fn declare_lost(&mut self) -> RecvEvent {
        let seq = self.expected;
        self.lost.push(seq);
        self.advance();
        RecvEvent::Lost(seq)
    }

    pub fn recv(&mut self) -> Result<RecvEvent, TransportError> {
        loop {
            if let Some((window, manifest)) = self.buffer.remove(&self.expected) {
                self.advance();
                return Ok(RecvEvent::Window { window, manifest });
            }
            if self.corrupt.remove(&self.expected) {
                // already surfaced as an error when it arrived
                self.advance();
                continue;
            }
            let later_present = self.buffer.keys().next().is_some()
                || self.corrupt.iter().next().is_some();
            if later_present && (self.closed || self.channel.is_ordered()) {
                return Ok(self.declare_lost());
            }
            if self.closed {
                return Ok(RecvEvent::End);
            }
            let timeout = if later_present {
                let since = *self.hole_since.get_or_insert_with(Instant::now);
                Some(self.reorder_timeout.saturating_sub(since.elapsed()))
            } else {
                self.idle_timeout
            };
            match self.channel.poll(timeout)? {
                Polled::Closed => self.closed = true,
                Polled::TimedOut if later_present => return Ok(self.declare_lost()),
                Polled::TimedOut => return Err(TransportError::Timeout),
                Polled::Frame(frame) => {
                    let seq = frame.manifest.seq;
                    if seq < self.expected || self.buffer.contains_key(&seq) {
                        continue; // duplicate or too late
                    }
                    match decode_frame(&frame) {
                        Ok(window) => {
                            self.buffer.insert(seq, (window, frame.manifest));
                        }
                        Err(e) => {
                            self.corrupt.insert(seq);
                            self.lost.push(seq);
                            return Err(e);
                        }
                    }
                }
            }
        }
    }
}

// ---- sync log ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryStatus {
    InFlight,
    Received,
    Replayed,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncEntry {
    pub seq: u64,
    pub t_window_start: Micros,
    pub t_window_end: Micros,
    pub t_sent: Micros,
    pub t_received: Option<Micros>,
    pub t_replayed: Option<Micros>,
    pub lost: bool,
}

impl SyncEntry {
    pub fn status(&self) -> EntryStatus {
        if self.lost {
            EntryStatus::Lost
        } else if self.t_replayed.is_some() {
            EntryStatus::Replayed
        } else if self.t_received.is_some() {
            EntryStatus::Received
        } else {
            EntryStatus::InFlight
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncLogError {
    #[error("unknown window {0}")]
    UnknownSeq(u64),
    #[error("window {0} recorded twice")]
    Duplicate(u64),
    #[error("window {seq}: {what} at {t} precedes {before} at {t_before}")]
    OutOfOrder {
        seq: u64,
        what: &'static str,
        t: Micros,
        before: &'static str,
        t_before: Micros,
    },
    #[error("window {0} has not been received")]
    NotReceived(u64),
    #[error("window {0} has not been replayed")]
    NotReplayed(u64),
    #[error("window {0} is marked lost")]
    Lost(u64),
}

/// Per-window timeline. Every mutation enforces
/// `t_window_end <= t_sent <= t_received <= t_replayed`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncLog {
    entries: BTreeMap<u64, SyncEntry>,
}

impl SyncLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sent(&mut self, r: &SendReceipt) -> Result<(), SyncLogError> {
        if self.entries.contains_key(&r.seq) {
            return Err(SyncLogError::Duplicate(r.seq));
        }
        if r.t_sent < r.t_window_end {
            return Err(SyncLogError::OutOfOrder {
                seq: r.seq,
                what: "t_sent",
                t: r.t_sent,
                before: "t_window_end",
                t_before: r.t_window_end,
            });
        }
        self.entries.insert(
            r.seq,
            SyncEntry {
                seq: r.seq,
                t_window_start: r.t_window_start,
                t_window_end: r.t_window_end,
                t_sent: r.t_sent,
                t_received: None,
                t_replayed: None,
                lost: false,
            },
        );
        Ok(())
    }

    fn entry_mut(&mut self, seq: u64) -> Result<&mut SyncEntry, SyncLogError> {
        self.entries.get_mut(&seq).ok_or(SyncLogError::UnknownSeq(seq))
    }

    pub fn record_received(&mut self, seq: u64, t: Micros) -> Result<(), SyncLogError> {
        let e = self.entry_mut(seq)?;
        if e.lost {
            return Err(SyncLogError::Lost(seq));
        }
        if e.t_received.is_some() {
            return Err(SyncLogError::Duplicate(seq));
        }
        if t < e.t_sent {
            return Err(SyncLogError::OutOfOrder {
                seq,
                what: "t_received",
                t,
                before: "t_sent",
                t_before: e.t_sent,
            });
        }
        e.t_received = Some(t);
        Ok(())
    }

    pub fn record_replayed(&mut self, seq: u64, t: Micros) -> Result<(), SyncLogError> {
        let e = self.entry_mut(seq)?;
        let received = e.t_received.ok_or(SyncLogError::NotReceived(seq))?;
        if e.t_replayed.is_some() {
            return Err(SyncLogError::Duplicate(seq));
        }
        if t < received {
            return Err(SyncLogError::OutOfOrder {
                seq,
                what: "t_replayed",
                t,
                before: "t_received",
                t_before: received,
            });
        }
        e.t_replayed = Some(t);
        Ok(())
    }

    pub fn mark_lost(&mut self, seq: u64) -> Result<(), SyncLogError> {
        let e = self.entry_mut(seq)?;
        if e.t_received.is_some() {
            return Err(SyncLogError::Duplicate(seq));
        }
        e.lost = true;
        Ok(())
    }

    pub fn get(&self, seq: u64) -> Option<&SyncEntry> {
        self.entries.get(&seq)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SyncEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lost_count(&self) -> usize {
        self.entries.values().filter(|e| e.lost).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq,t_window_start_us,t_window_end_us,t_sent_us,t_received_us,t_replayed_us,status\n");
        let opt = |v: Option<Micros>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in self.entries.values() {
            let status = match e.status() {
                EntryStatus::InFlight => "in-flight",
                EntryStatus::Received => "received",
                EntryStatus::Replayed => "replayed",
                EntryStatus::Lost => "lost",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.seq,
                e.t_window_start,
                e.t_window_end,
                e.t_sent,
                opt(e.t_received),
                opt(e.t_replayed),
                status
            );
        }
        out
    }
}

/// How far the twin trails reality for window `seq`: replay completion minus
/// the start of the captured interval, i.e. T plus transfer and replay delay.
pub fn twin_lag(log: &SyncLog, seq: u64) -> Result<Micros, SyncLogError> {
    let e = log.get(seq).ok_or(SyncLogError::UnknownSeq(seq))?;
    let replayed = e.t_replayed.ok_or(SyncLogError::NotReplayed(seq))?;
    Ok(replayed - e.t_window_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, PacketRecord};

    const S: Micros = MICROS_PER_SEC;

    fn window(seq: u64, t: Micros) -> CaptureWindow {
        let start = seq * t;
        CaptureWindow {
            seq,
            start_ts_micros: start,
            end_ts_micros: start + t,
            packets: vec![PacketRecord::new(start + 5, vec![seq as u8; 40], Direction::Uplink)],
            source_interface: "tun2".into(),
        }
    }

    fn spec(latency_us: Micros, bandwidth_bps: u64, loss: f64) -> ChannelSpec {
        ChannelSpec {
            kind: ChannelKind::InProcess,
            latency_us,
            bandwidth_bps,
            loss_probability: loss,
            seed: 7,
        }
    }

    #[test]
    fn megabyte_over_ten_megabit_link() {
        let mut link = LinkModel::new(&spec(100_000, 10_000_000, 0.0)).unwrap();
        assert_eq!(link.transmit(1_000_000, 0), Some(900_000));
    }

    #[test]
    fn backlog_queues_on_the_link() {
        let mut link = LinkModel::new(&spec(0, 8_000_000, 0.0)).unwrap();
        // 2 MB takes 2 s; the second window is ready at 1 s but waits.
        assert_eq!(link.transmit(2_000_000, 0), Some(2 * S));
        assert_eq!(link.transmit(1_000_000, S), Some(3 * S));
    }

    #[test]
    fn loss_spec_validation() {
        assert!(LinkModel::new(&spec(0, 1, 1.5)).is_err());
        assert!(LinkModel::new(&spec(0, 1, -0.1)).is_err());
        assert!(LinkModel::new(&spec(0, 0, 0.0)).is_err());
    }

    #[test]
    fn frame_round_trip_and_corruption() {
        let w = window(3, 10 * S);
        let mut f = encode_window(&w).unwrap();
        let mut back = decode_frame(&f).unwrap();
        back.packets.iter_mut().for_each(|p| p.direction = Direction::Uplink);
        assert_eq!(back, w);
        assert_eq!(f.manifest.content_digest.len(), 64);
        let last = f.pcap.len() - 1;
        f.pcap[last] ^= 0xff;
        assert!(matches!(decode_frame(&f), Err(TransportError::DigestMismatch { seq: 3 })));
    }

    fn pipe(loss: f64) -> (WindowSender, WindowReceiver) {
        let (tx, rx) = in_process_channel(64);
        (
            WindowSender::new(&spec(0, 1_000_000_000, loss), Box::new(tx)).unwrap(),
            WindowReceiver::new(Box::new(rx), Duration::from_millis(50)),
        )
    }

    fn drain(rx: &mut WindowReceiver) -> (Vec<u64>, Vec<u64>) {
        let (mut got, mut lost) = (Vec::new(), Vec::new());
        loop {
            match rx.recv().unwrap() {
                RecvEvent::Window { window, .. } => got.push(window.seq),
                RecvEvent::Lost(s) => lost.push(s),
                RecvEvent::End => return (got, lost),
            }
        }
    }

    #[test]
    fn lossless_in_order() {
        let (mut tx, mut rx) = pipe(0.0);
        for seq in 0..3 {
            let r = tx.send_window(&window(seq, S), (seq + 1) * S).unwrap();
            assert!(!r.dropped());
        }
        tx.close().unwrap();
        assert_eq!(drain(&mut rx), (vec![0, 1, 2], vec![]));
    }

    #[test]
    fn total_loss_still_gives_receipts() {
        let (mut tx, mut rx) = pipe(1.0);
        let receipts: Vec<_> = (0..4)
            .map(|seq| tx.send_window(&window(seq, S), (seq + 1) * S).unwrap())
            .collect();
        assert!(receipts.iter().all(SendReceipt::dropped));
        tx.close().unwrap();
        assert_eq!(drain(&mut rx), (vec![], vec![]));
    }

    #[test]
    fn ordered_channel_hole_is_lost_immediately() {
        let (mut tx, rx) = in_process_channel(8);
        for seq in [0, 2] {
            tx.send(encode_window(&window(seq, S)).unwrap()).unwrap();
        }
        // keep the sender open: the hole must be resolved without waiting for close
        let mut rx = WindowReceiver::new(Box::new(rx), Duration::from_secs(3600));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { ref window, .. } if window.seq == 0));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Lost(1)));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { ref window, .. } if window.seq == 2));
        assert_eq!(rx.lost(), &[1]);
        drop(tx);
    }

    #[test]
    fn unordered_channel_waits_for_reorder_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let mut tx = DirectorySender::new(dir.path()).unwrap();
        tx.send(encode_window(&window(0, S)).unwrap()).unwrap();
        tx.send(encode_window(&window(2, S)).unwrap()).unwrap();
        let mut rx = WindowReceiver::new(
            Box::new(DirectoryReceiver::new(dir.path(), Duration::from_millis(5))),
            Duration::from_millis(80),
        );
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { ref window, .. } if window.seq == 0));
        let t0 = Instant::now();
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Lost(1)));
        assert!(t0.elapsed() >= Duration::from_millis(80));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { ref window, .. } if window.seq == 2));
        tx.close().unwrap();
        assert!(matches!(rx.recv().unwrap(), RecvEvent::End));
    }

    #[test]
    fn late_arrival_fills_hole_before_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let mut tx = DirectorySender::new(dir.path()).unwrap();
        tx.send(encode_window(&window(1, S)).unwrap()).unwrap();
        let mut rx = WindowReceiver::new(
            Box::new(DirectoryReceiver::new(dir.path(), Duration::from_millis(2))),
            Duration::from_secs(5),
        );
        let late = thread::spawn(move || {
            thread::sleep(Duration::from_millis(30));
            tx.send(encode_window(&window(0, S)).unwrap()).unwrap();
            tx.close().unwrap();
        });
        let (got, lost) = drain(&mut rx);
        late.join().unwrap();
        assert_eq!((got, lost), (vec![0, 1], vec![]));
    }

    #[test]
    fn corrupted_window_errors_and_counts_lost() {
        let (mut tx, rx) = in_process_channel(8);
        tx.send(encode_window(&window(0, S)).unwrap()).unwrap();
        let mut bad = encode_window(&window(1, S)).unwrap();
        bad.pcap[30] ^= 1;
        tx.send(bad).unwrap();
        tx.send(encode_window(&window(2, S)).unwrap()).unwrap();
        tx.close().unwrap();
        let mut rx = WindowReceiver::new(Box::new(rx), Duration::from_secs(1));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { .. }));
        assert!(matches!(rx.recv(), Err(TransportError::DigestMismatch { seq: 1 })));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::Window { ref window, .. } if window.seq == 2));
        assert!(matches!(rx.recv().unwrap(), RecvEvent::End));
        assert_eq!(rx.lost(), &[1]);
    }

    #[test]
    fn idle_timeout() {
        let (_tx, rx) = in_process_channel(1);
        let mut rx = WindowReceiver::new(Box::new(rx), Duration::from_secs(1))
            .with_idle_timeout(Duration::from_millis(10));
        assert!(matches!(rx.recv(), Err(TransportError::Timeout)));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut tx = TcpSender::connect(addr).unwrap();
        let rx = TcpReceiver::accept(&listener).unwrap();
        let mut rx = WindowReceiver::new(Box::new(rx), Duration::from_secs(1));
        for seq in 0..3 {
            tx.send(encode_window(&window(seq, S)).unwrap()).unwrap();
        }
        tx.close().unwrap();
        assert_eq!(drain(&mut rx), (vec![0, 1, 2], vec![]));
    }

    #[test]
    fn tcp_framing_layout() {
        let f = encode_window(&window(0, S)).unwrap();
        let mut buf = Vec::new();
        write_tcp_frame(&mut buf, &f).unwrap();
        let mlen = u32::from_be_bytes(buf[0..4].try_into().unwrap()) as usize;
        let m: WindowManifest = serde_json::from_slice(&buf[4..4 + mlen]).unwrap();
        assert_eq!(m, f.manifest);
        let plen = u32::from_be_bytes(buf[4 + mlen..8 + mlen].try_into().unwrap()) as usize;
        assert_eq!(&buf[8 + mlen..], &f.pcap[..]);
        assert_eq!(plen, f.pcap.len());
        assert_eq!(read_tcp_frame(&mut &buf[..]).unwrap(), Some(f));
        assert!(matches!(read_tcp_frame(&mut &buf[..10]), Err(TransportError::BadFrame(_))));
    }

    #[test]
    fn directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut tx = DirectorySender::new(dir.path()).unwrap();
        let f = encode_window(&window(4, S)).unwrap();
        tx.send(f.clone()).unwrap();
        assert_eq!(fs::read(dir.path().join("window_4.pcap")).unwrap(), f.pcap);
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("window_4.manifest.json")).unwrap()).unwrap();
        let mut keys: Vec<_> = m.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            vec![
                "byte_length",
                "content_digest",
                "digest_algorithm",
                "end_ts_micros",
                "seq",
                "source_interface",
                "start_ts_micros"
            ]
        );
    }

    fn receipt(seq: u64, t: Micros, t_sent: Micros) -> SendReceipt {
        SendReceipt {
            seq,
            t_window_start: seq * t,
            t_window_end: (seq + 1) * t,
            t_sent,
            byte_length: 0,
            scheduled_arrival: Some(t_sent),
        }
    }

    #[test]
    fn sync_log_ordering_rules() {
        let mut log = SyncLog::new();
        log.record_sent(&receipt(0, 10 * S, 10 * S)).unwrap();
        assert!(log.record_sent(&receipt(0, 10 * S, 10 * S)).is_err());
        assert!(log.record_sent(&receipt(1, 10 * S, 5 * S)).is_err());
        assert_eq!(log.record_replayed(0, 11 * S), Err(SyncLogError::NotReceived(0)));
        assert!(log.record_received(0, 9 * S).is_err());
        log.record_received(0, 10 * S + 900_000).unwrap();
        assert!(log.record_replayed(0, 10 * S).is_err());
        log.record_replayed(0, 12 * S).unwrap();
        assert_eq!(log.record_received(7, 0), Err(SyncLogError::UnknownSeq(7)));
        let csv = log.to_csv();
        assert!(csv.lines().nth(1).unwrap().ends_with(",replayed"));
    }

    #[test]
    fn twin_lag_is_window_plus_delay() {
        let mut log = SyncLog::new();
        // T = 120 s, replayed 2 s after the window closes
        log.record_sent(&receipt(0, 120 * S, 120 * S)).unwrap();
        log.record_received(0, 121 * S).unwrap();
        log.record_replayed(0, 122 * S).unwrap();
        assert_eq!(twin_lag(&log, 0), Ok(122 * S));
        // T = 10 s, 0.9 s transfer, instant replay
        log.record_sent(&receipt(3, 10 * S, 40 * S)).unwrap();
        log.record_received(3, 40 * S + 900_000).unwrap();
        log.record_replayed(3, 40 * S + 900_000).unwrap();
        assert_eq!(twin_lag(&log, 3), Ok(10_900_000));
        // zero delay
        log.record_sent(&receipt(5, 10 * S, 60 * S)).unwrap();
        log.record_received(5, 60 * S).unwrap();
        log.record_replayed(5, 60 * S).unwrap();
        assert_eq!(twin_lag(&log, 5), Ok(10 * S));
        assert_eq!(twin_lag(&log, 9), Err(SyncLogError::UnknownSeq(9)));
    }
}
