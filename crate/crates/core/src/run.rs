//! End-to-end sync loop: simulator and segmenter on a producer thread,
//! a channel in between, replay and metrics on the calling thread.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{segment_stream, SegmentError};
use crate::clock::{Clock, ScaledWallClock, VirtualClock};
use crate::emit::{emit_bundle, DeploymentBundle};
use crate::metrics::{
    achieved_frequency_hz, aoi_profile, compare_series, consistency_audit, delivered_in,
    throughput_series_from, twin_alignment_ratio, update_latency, FidelityReport, MetricsError,
    SeriesComparison, ThroughputSeries, DEFAULT_BIN_WIDTH_US, REPORT_SCHEMA_VERSION,
};
use crate::model::{Micros, TwinDescriptor, MICROS_PER_SEC};
use crate::replay::{PacketSink, PcapDirSink, ReplayEngine, ReplayError, ReplayMode, ReplayPlan, ReplayedPacket, SinkError};
use crate::sim::{stream_live, ScenarioSpec, SimError};
use crate::transport::{
    in_process_channel, twin_lag, ChannelKind, ChannelSpec, DirectoryReceiver, DirectorySender,
    FrameReceiver, FrameSender, RecvEvent, SendReceipt, SyncLog, SyncLogError, TcpReceiver,
    TcpSender, TransportError, WindowReceiver, WindowSender,
};

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const NPT_SERIES_FILE: &str = "npt_throughput.csv";
pub const NDT_SERIES_FILE: &str = "ndt_throughput.csv";
pub const SYNC_LOG_FILE: &str = "sync_log.csv";
pub const EXCHANGE_DIR: &str = "exchange";
pub const REPLAY_DIR: &str = "replayed";

/// Frames buffered between producer and consumer on the in-process channel.
const QUEUE_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub descriptor: TwinDescriptor,
    pub scenario: ScenarioSpec,
    pub channel: ChannelSpec,
    /// In real-time mode the speed factor scales the whole run, not just
    /// the replay: 10 runs the producer and the twin ten times faster than
    /// wall-clock time.
    pub replay: ReplayPlan,
    /// Overrides the descriptor's window length.
    pub window_us: Option<Micros>,
    pub bin_width_us: Micros,
    pub max_lag_bins: usize,
    /// Where exchange files and replayed pcaps go; required for the
    /// directory channel and for `keep_replay_pcaps`.
    pub work_dir: Option<PathBuf>,
    pub keep_replay_pcaps: bool,
    pub reorder_timeout_ms: u64,
}

impl RunConfig {
    pub fn new(descriptor: TwinDescriptor, scenario: ScenarioSpec, channel: ChannelSpec) -> Self {
        RunConfig {
            descriptor,
            scenario,
            channel,
            replay: ReplayPlan::virtual_clock(),
            window_us: None,
            bin_width_us: DEFAULT_BIN_WIDTH_US,
            max_lag_bins: 10,
            work_dir: None,
            keep_replay_pcaps: false,
            reorder_timeout_ms: 100,
        }
    }

    pub fn window_us(&self) -> Micros {
        self.window_us.unwrap_or(self.descriptor.window_us)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.window_us() == 0 {
            return bad("window length must be positive".into());
        }
        if self.bin_width_us == 0 {
            return bad("bin width must be positive".into());
        }
        if self.scenario.duration_us < 2 * self.bin_width_us {
            return bad(format!(
                "duration {} us is shorter than two {} us throughput bins",
                self.scenario.duration_us, self.bin_width_us
            ));
        }
        if self.work_dir.is_none() && (self.channel.kind == ChannelKind::DirectoryExchange || self.keep_replay_pcaps) {
            return bad("the directory channel and kept replay pcaps need a work directory".into());
        }
        self.scenario.validate()?;
        self.channel.validate()?;
        self.replay.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("simulate: {0}")]
    Simulate(#[from] SimError),
    #[error("segment: {0}")]
    Segment(#[from] SegmentError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("sync log: {0}")]
    SyncLog(#[from] SyncLogError),
    #[error("replay: {0}")]
    Replay(#[from] ReplayError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("output: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("producer thread panicked")]
    ProducerPanic,
}

impl From<SinkError> for RunError {
    fn from(e: SinkError) -> Self {
        RunError::Replay(e.into())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: FidelityReport,
    pub log: SyncLog,
    pub npt: ThroughputSeries,
    pub ndt: ThroughputSeries,
    pub comparison: SeriesComparison,
}

/// Result of a run that failed part-way, with whatever the log had recorded.
#[derive(Debug)]
pub struct RunFailure {
    pub error: RunError,
    pub log: SyncLog,
}

/// `(timestamp, on-wire length)` of every packet, enough for throughput.
type Samples = Vec<(Micros, u32)>;

/// Records replayed packets on the physical clock; optionally also writes
/// per-window pcaps.
struct SeriesSink {
    samples: Samples,
    pcaps: Option<PcapDirSink>,
}

impl PacketSink for SeriesSink {
    fn accept(&mut self, pkt: &ReplayedPacket) -> Result<(), SinkError> {
        self.samples.push((pkt.aligned_ts(), pkt.record.original_len));
        match &mut self.pcaps {
            Some(s) => s.accept(pkt),
            None => Ok(()),
        }
    }

    fn window_done(&mut self, seq: u64) -> Result<(), SinkError> {
        match &mut self.pcaps {
            Some(s) => s.window_done(seq),
            None => Ok(()),
        }
    }
}

fn produce<C: Clock + Clone>(
    cfg: &RunConfig,
    clock: C,
    channel: Box<dyn FrameSender>,
    receipts: mpsc::Sender<SendReceipt>,
) -> Result<Samples, RunError> {
    let mut sender = WindowSender::new(&cfg.channel, channel)?;
    let result = produce_windows(cfg, clock, &mut sender, receipts);
    // close even on failure so the consumer sees the end of the stream
    let closed = sender.close();
    let samples = result?;
    closed?;
    Ok(samples)
}

fn produce_windows<C: Clock + Clone>(
    cfg: &RunConfig,
    clock: C,
    sender: &mut WindowSender,
    receipts: mpsc::Sender<SendReceipt>,
) -> Result<Samples, RunError> {
    let spec = &cfg.scenario;
    let mut window_clock = clock.clone();
    let mut sim_error = None;
    let mut npt = Vec::new();
    {
        let live = stream_live(spec, clock)?
            .map_while(|r| r.map_err(|e| sim_error = Some(e)).ok())
            .inspect(|p| npt.push((p.ts_micros, p.original_len)));
        let windows = segment_stream(
            live,
            cfg.window_us(),
            spec.origin_ts_micros,
            Some(spec.end_ts()),
            cfg.descriptor.capture_interface.clone(),
        )?;
        for w in windows {
            let w = w?;
            // a window is shipped once it has closed
            window_clock.sleep_until(w.end_ts_micros);
            let receipt = sender.send_window(&w, window_clock.now_micros())?;
            if receipts.send(receipt).is_err() {
                break; // consumer gone; its error wins
            }
        }
    }
    match sim_error {
        Some(e) => Err(e.into()),
        None => Ok(npt),
    }
}

/// Records receipts in the log until `upto` has one, or until the producer
/// hangs up when `upto` is `None`.
fn sync_receipts(
    receipts: &mpsc::Receiver<SendReceipt>,
    log: &mut SyncLog,
    arrivals: &mut HashMap<u64, Option<Micros>>,
    upto: Option<u64>,
) -> Result<(), RunError> {
    loop {
        if upto.is_some_and(|seq| arrivals.contains_key(&seq)) {
            return Ok(());
        }
        match receipts.recv() {
            Ok(r) => {
                log.record_sent(&r)?;
                arrivals.insert(r.seq, r.scheduled_arrival);
            }
            Err(_) => {
                return match upto {
                    None => Ok(()),
                    Some(seq) => Err(RunError::Config(format!("window {seq} arrived without a send receipt"))),
                }
            }
        }
    }
}

/// Consumer side. Returns replayed samples and the maximum replay lateness.
fn consume<C: Clock + Clone>(
    cfg: &RunConfig,
    clock: C,
    mut receiver: WindowReceiver,
    receipts: &mpsc::Receiver<SendReceipt>,
    log: &mut SyncLog,
) -> Result<(Samples, Micros), RunError> {
    let engine_plan = match cfg.replay.mode {
        // the clock itself is already scaled
        ReplayMode::RealTime { .. } => ReplayPlan {
            mode: ReplayMode::RealTime { speed_factor: 1.0 },
            ..cfg.replay
        },
        ReplayMode::VirtualClock => cfg.replay,
    };
    let mut arrival_clock = clock.clone();
    let mut engine = ReplayEngine::new(engine_plan, clock)?;
    let pcaps = match (&cfg.work_dir, cfg.keep_replay_pcaps) {
        (Some(dir), true) => Some(PcapDirSink::new(dir.join(REPLAY_DIR))?),
        _ => None,
    };
    let mut sink = SeriesSink {
        samples: Vec::new(),
        pcaps,
    };
    let mut max_lateness = 0;
    // modeled arrival per seq, from the receipts
    let mut arrivals = HashMap::new();

    loop {
        match receiver.recv() {
            Ok(RecvEvent::Window { window, .. }) => {
                let seq = window.seq;
                sync_receipts(receipts, log, &mut arrivals, Some(seq))?;
                let arrival = arrivals[&seq].ok_or_else(|| {
                    RunError::Config(format!("window {seq} was dropped by the link model but delivered"))
                })?;
                // the frame is already here; the link model says when it lands
                arrival_clock.sleep_until(arrival);
                log.record_received(seq, arrival)?;
                let trace = engine.replay_window(&window, log, &mut sink)?;
                max_lateness = max_lateness.max(trace.max_lateness_us);
            }
            Ok(RecvEvent::Lost(_)) => {}
            Ok(RecvEvent::End) => break,
            // a corrupted window is skipped like a lost one
            Err(
                TransportError::DigestMismatch { .. }
                | TransportError::Malformed { .. }
                | TransportError::Pcap { .. },
            ) => {}
            Err(e) => return Err(e.into()),
        }
    }
    sync_receipts(receipts, log, &mut arrivals, None)?;
    let undelivered: Vec<u64> = log.entries().filter(|e| e.t_received.is_none()).map(|e| e.seq).collect();
    for seq in undelivered {
        log.mark_lost(seq)?;
    }
    Ok((sink.samples, max_lateness))
}

type ChannelPair = (Box<dyn FrameSender>, Box<dyn FrameReceiver>);

fn open_channel(cfg: &RunConfig) -> Result<ChannelPair, RunError> {
    Ok(match cfg.channel.kind {
        ChannelKind::InProcess => {
            let (tx, rx) = in_process_channel(QUEUE_DEPTH);
            (Box::new(tx), Box::new(rx))
        }
        ChannelKind::DirectoryExchange => {
            let dir = cfg.work_dir.as_ref().expect("validated").join(EXCHANGE_DIR);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
            }
            let tx = DirectorySender::new(&dir)?;
            (Box::new(tx), Box::new(DirectoryReceiver::new(&dir, Duration::from_millis(2))))
        }
        ChannelKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(TransportError::Socket)?;
            let addr = listener.local_addr().map_err(TransportError::Socket)?;
            // connecting first is safe: the backlog holds the connection
            let tx = TcpSender::connect(addr)?;
            let rx = TcpReceiver::accept(&listener)?;
            (Box::new(tx), Box::new(rx))
        }
    })
}

/// Runs the full loop. On failure the partially filled log is returned
/// alongside the error.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunFailure> {
    let fail = |error: RunError| RunFailure { error, log: SyncLog::new() };
    cfg.validate().map_err(fail)?;
    match cfg.replay.mode {
        ReplayMode::VirtualClock => run_with(cfg, VirtualClock::starting_at(cfg.scenario.origin_ts_micros)),
        ReplayMode::RealTime { speed_factor } => {
            run_with(cfg, ScaledWallClock::new(cfg.scenario.origin_ts_micros, speed_factor))
        }
    }
}

fn run_with<C: Clock + Clone + Send + 'static>(cfg: &RunConfig, clock: C) -> Result<RunOutcome, RunFailure> {
    let mut log = SyncLog::new();
    let result = pipeline(cfg, clock, &mut log).and_then(|(npt, ndt, lateness)| {
        let (report, npt, ndt, comparison) = evaluate(cfg, &log, npt, ndt, lateness)?;
        Ok(RunOutcome {
            report,
            log: log.clone(),
            npt,
            ndt,
            comparison,
        })
    });
    result.map_err(|error| RunFailure { error, log })
}

fn pipeline<C: Clock + Clone + Send + 'static>(
    cfg: &RunConfig,
    clock: C,
    log: &mut SyncLog,
) -> Result<(Samples, Samples, Micros), RunError> {
    let (frame_tx, frame_rx) = open_channel(cfg)?;
    let (receipt_tx, receipt_rx) = mpsc::channel();
    let producer_cfg = cfg.clone();
    let producer_clock = clock.clone();
    let producer = thread::Builder::new()
        .name("twinsync-producer".into())
        .spawn(move || produce(&producer_cfg, producer_clock, frame_tx, receipt_tx))
        .map_err(|source| RunError::Io {
            path: PathBuf::from("<producer thread>"),
            source,
        })?;

    let receiver = WindowReceiver::new(frame_rx, Duration::from_millis(cfg.reorder_timeout_ms));
    let consumed = consume(cfg, clock, receiver, &receipt_rx, log);
    // a consumer failure leaves the producer blocked on a full queue
    // unless the receiving end goes away
    drop(receipt_rx);
    let produced = producer.join().map_err(|_| RunError::ProducerPanic)?;
    let npt = produced?;
    let (ndt, lateness) = consumed?;
    Ok((npt, ndt, lateness))
}

/// Serializes and re-parses, as a reader of the emitted files would.
fn round_trip_yaml<T: Serialize + DeserializeOwned>(v: &T) -> Result<T, String> {
    let text = serde_yaml::to_string(v).map_err(|e| e.to_string())?;
    serde_yaml::from_str(&text).map_err(|e| e.to_string())
}

fn reparsed_bundle(d: &TwinDescriptor) -> Result<DeploymentBundle, RunError> {
    let b = emit_bundle(d);
    let run = || -> Result<DeploymentBundle, String> {
        let topology = serde_json::to_string(&b.topology).map_err(|e| e.to_string())?;
        Ok(DeploymentBundle {
            smf: round_trip_yaml(&b.smf)?,
            nssf: round_trip_yaml(&b.nssf)?,
            amf: round_trip_yaml(&b.amf)?,
            topology: serde_json::from_str(&topology).map_err(|e| e.to_string())?,
        })
    };
    run().map_err(|m| RunError::Config(format!("bundle round trip: {m}")))
}

fn evaluate(
    cfg: &RunConfig,
    log: &SyncLog,
    npt: Samples,
    ndt: Samples,
    replay_lateness: Micros,
) -> Result<(FidelityReport, ThroughputSeries, ThroughputSeries, SeriesComparison), RunError> {
    let spec = &cfg.scenario;
    let t = cfg.window_us();
    let origin = spec.origin_ts_micros;
    let npt = throughput_series_from(npt, cfg.bin_width_us, origin, spec.duration_us)?;
    let ndt = throughput_series_from(ndt, cfg.bin_width_us, origin, spec.duration_us)?;
    let comparison = compare_series(&npt, &ndt, cfg.max_lag_bins)?;

    // observe every planned window in full, so a lossless run scores 1
    let planned = spec.duration_us.div_ceil(t);
    let obs_end = origin + planned * t;
    let tar = twin_alignment_ratio(log, t, origin, obs_end)?;
    let latency = update_latency(log).ok();
    let lags: Vec<Micros> = log
        .entries()
        .filter(|e| e.t_replayed.is_some())
        .map(|e| twin_lag(log, e.seq))
        .collect::<Result<_, _>>()?;
    let last_replay = log.entries().filter_map(|e| e.t_replayed).max().unwrap_or(0);
    let aoi = aoi_profile(log, origin, obs_end.max(last_replay));
    let audit = consistency_audit(&cfg.descriptor, &reparsed_bundle(&cfg.descriptor)?);

    let report = FidelityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: spec.kind.cli_name().to_string(),
        seed: spec.seed,
        window_us: t,
        duration_us: spec.duration_us,
        bin_width_us: cfg.bin_width_us,
        windows_planned: log.len(),
        windows_delivered: delivered_in(log, origin, obs_end),
        windows_lost: log.lost_count(),
        twin_alignment_ratio: tar,
        planned_sync_frequency_hz: MICROS_PER_SEC as f64 / t as f64,
        sync_frequency_hz: achieved_frequency_hz(log, origin, obs_end)?,
        mean_update_latency_us: latency.as_ref().map(|l| l.mean_us),
        max_update_latency_us: latency.as_ref().map(|l| l.max_us),
        mean_twin_lag_us: (!lags.is_empty()).then(|| lags.iter().sum::<Micros>() as f64 / lags.len() as f64),
        max_twin_lag_us: lags.iter().copied().max(),
        mean_age_of_information_us: aoi.mean_us,
        peak_age_of_information_us: aoi.peak_us,
        rmse_bps: comparison.rmse_bps,
        nrmse: comparison.nrmse,
        nrmse_degenerate: comparison.nrmse_degenerate,
        pearson_r: comparison.pearson_r,
        estimated_lag_bins: comparison.estimated_lag_bins,
        estimated_lag_us: comparison.estimated_lag_bins * cfg.bin_width_us as i64,
        consistency_index: audit.index(),
        replay_max_lateness_us: replay_lateness,
        deviation_of_prediction: None,
    };
    Ok((report, npt, ndt, comparison))
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf, RunError> {
    fs::write(&path, contents).map_err(|source| RunError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes the report (JSON at `report_path`, CSV next to it), both
/// throughput series and the sync log into `report_path`'s directory.
pub fn write_outputs(outcome: &RunOutcome, report_path: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dir = report_dir(report_path)?;
    Ok(vec![
        write_file(report_path.to_path_buf(), &outcome.report.to_json())?,
        write_file(dir.join(REPORT_CSV_FILE), &outcome.report.to_csv())?,
        write_file(dir.join(NPT_SERIES_FILE), &outcome.npt.to_csv())?,
        write_file(dir.join(NDT_SERIES_FILE), &outcome.ndt.to_csv())?,
        write_file(dir.join(SYNC_LOG_FILE), &outcome.log.to_csv())?,
    ])
}

/// Flushes what a failed run managed to record.
pub fn write_partial(log: &SyncLog, report_path: &Path) -> Result<PathBuf, RunError> {
    write_file(report_dir(report_path)?.join(SYNC_LOG_FILE), &log.to_csv())
}

fn report_dir(report_path: &Path) -> Result<PathBuf, RunError> {
    let dir = match report_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    Ok(dir)
}
