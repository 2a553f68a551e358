//! Replays received windows into a packet sink.
//!
//! Virtual-clock replay emits every packet at once with its captured
//! timestamp shifted by the alignment offset, so it is exact and fast.
//! Real-time replay sleeps the captured inter-packet gaps (divided by the
//! speed factor) on an injected [`Clock`] and records how late each emission
//! was; lateness is reported, never folded back into the timestamps.

use std::fs;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{write_pcap, CaptureWindow, PcapError, LINKTYPE_RAW};
use crate::clock::Clock;
use crate::model::{Micros, PacketRecord};
use crate::transport::{SyncLog, SyncLogError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ReplayMode {
    VirtualClock,
    RealTime { speed_factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub mode: ReplayMode,
    /// Fixed offset added to replayed timestamps; `None` derives it per
    /// window with [`compute_alignment`].
    pub align_offset_micros: Option<i64>,
}

impl ReplayPlan {
    pub fn virtual_clock() -> Self {
        ReplayPlan {
            mode: ReplayMode::VirtualClock,
            align_offset_micros: None,
        }
    }

    pub fn real_time(speed_factor: f64) -> Result<Self, ReplayError> {
        let plan = ReplayPlan {
            mode: ReplayMode::RealTime { speed_factor },
            align_offset_micros: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        match self.mode {
            ReplayMode::RealTime { speed_factor } if !(speed_factor > 0.0 && speed_factor.is_finite()) => {
                Err(ReplayError::InvalidPlan(format!("speed_factor {speed_factor} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Pcap(#[from] PcapError),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid replay plan: {0}")]
    InvalidPlan(String),
    #[error("sink: {0}")]
    Sink(#[from] SinkError),
    #[error(transparent)]
    Log(#[from] SyncLogError),
    #[error("window {seq} replayed after window {last}")]
    OutOfOrder { seq: u64, last: u64 },
    #[error("window {seq}: alignment offset {offset} moves a timestamp below zero")]
    TimestampUnderflow { seq: u64, offset: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayedPacket {
    /// The packet as emitted; `ts_micros` is the replay timestamp.
    pub record: PacketRecord,
    pub source_seq: u64,
    pub align_offset_micros: i64,
    pub lateness_us: Micros,
}

impl ReplayedPacket {
    /// Replay timestamp mapped back onto the physical twin's clock.
    pub fn aligned_ts(&self) -> Micros {
        (self.record.ts_micros as i64 - self.align_offset_micros) as Micros
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayedTrace {
    pub seq: u64,
    pub align_offset_micros: i64,
    pub started_at: Micros,
    pub completed_at: Micros,
    pub packets: Vec<ReplayedPacket>,
    pub max_lateness_us: Micros,
}

/// Consumer of replayed packets.
pub trait PacketSink {
    fn accept(&mut self, pkt: &ReplayedPacket) -> Result<(), SinkError>;
    fn window_done(&mut self, _seq: u64) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct CollectingSink {
    pub packets: Vec<ReplayedPacket>,
}

impl PacketSink for CollectingSink {
    fn accept(&mut self, pkt: &ReplayedPacket) -> Result<(), SinkError> {
        self.packets.push(pkt.clone());
        Ok(())
    }
}

/// Writes each replayed window to `replayed_<seq>.pcap`.
pub struct PcapDirSink {
    dir: PathBuf,
    current: Vec<PacketRecord>,
}

impl PcapDirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, SinkError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| SinkError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(PcapDirSink {
            dir,
            current: Vec::new(),
        })
    }

    pub fn file_name(seq: u64) -> String {
        format!("replayed_{seq}.pcap")
    }
}

impl PacketSink for PcapDirSink {
    fn accept(&mut self, pkt: &ReplayedPacket) -> Result<(), SinkError> {
        self.current.push(pkt.record.clone());
        Ok(())
    }

    fn window_done(&mut self, seq: u64) -> Result<(), SinkError> {
        let bytes = write_pcap(LINKTYPE_RAW, &self.current)?;
        self.current.clear();
        let path = self.dir.join(Self::file_name(seq));
        fs::write(&path, bytes).map_err(|source| SinkError::Io { path, source })
    }
}

/// Feeds several sinks from one replay.
pub struct TeeSink<'a>(pub Vec<&'a mut dyn PacketSink>);

impl PacketSink for TeeSink<'_> {
    fn accept(&mut self, pkt: &ReplayedPacket) -> Result<(), SinkError> {
        self.0.iter_mut().try_for_each(|s| s.accept(pkt))
    }

    fn window_done(&mut self, seq: u64) -> Result<(), SinkError> {
        self.0.iter_mut().try_for_each(|s| s.window_done(seq))
    }
}

/// Earliest instant window `seq` may start replaying: once it is received and
/// once the previously replayed window has finished.
pub fn replay_start(log: &SyncLog, seq: u64) -> Result<Micros, SyncLogError> {
    let entry = log.get(seq).ok_or(SyncLogError::UnknownSeq(seq))?;
    let received = entry.t_received.ok_or(SyncLogError::NotReceived(seq))?;
    let previous_done = log
        .entries()
        .filter(|e| e.seq < seq)
        .filter_map(|e| e.t_replayed)
        .max()
        .unwrap_or(0);
    Ok(received.max(previous_done))
}

/// Offset that maps replay timestamps back onto the physical clock. Zero in
/// virtual-clock mode; in real-time mode the distance between the replay
/// start and the window start.
pub fn compute_alignment(
    mode: ReplayMode,
    log: &SyncLog,
    window: &CaptureWindow,
) -> Result<i64, SyncLogError> {
    match mode {
        ReplayMode::VirtualClock => Ok(0),
        ReplayMode::RealTime { .. } => {
            Ok(replay_start(log, window.seq)? as i64 - window.start_ts_micros as i64)
        }
    }
}

pub struct ReplayEngine<C> {
    plan: ReplayPlan,
    clock: C,
    last_seq: Option<u64>,
}

impl<C: Clock> ReplayEngine<C> {
    pub fn new(plan: ReplayPlan, clock: C) -> Result<Self, ReplayError> {
        plan.validate()?;
        Ok(ReplayEngine {
            plan,
            clock,
            last_seq: None,
        })
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    /// Replays one received window and records `t_replayed` in `log`.
    pub fn replay_window(
        &mut self,
        w: &CaptureWindow,
        log: &mut SyncLog,
        sink: &mut dyn PacketSink,
    ) -> Result<ReplayedTrace, ReplayError> {
        if let Some(last) = self.last_seq {
            if w.seq <= last {
                return Err(ReplayError::OutOfOrder { seq: w.seq, last });
            }
        }
        self.clock.sleep_until(replay_start(log, w.seq)?);
        let started_at = self.clock.now_micros();
        let offset = match self.plan.align_offset_micros {
            Some(o) => o,
            None => match self.plan.mode {
                ReplayMode::VirtualClock => 0,
                ReplayMode::RealTime { .. } => started_at as i64 - w.start_ts_micros as i64,
            },
        };

        let mut packets = Vec::with_capacity(w.packets.len());
        let mut max_lateness_us = 0;
        let completed_at = match self.plan.mode {
            ReplayMode::VirtualClock => {
                for p in &w.packets {
                    let ts = p.ts_micros as i64 + offset;
                    if ts < 0 {
                        return Err(ReplayError::TimestampUnderflow { seq: w.seq, offset });
                    }
                    let out = ReplayedPacket {
                        record: PacketRecord {
                            ts_micros: ts as Micros,
                            ..p.clone()
                        },
                        source_seq: w.seq,
                        align_offset_micros: offset,
                        lateness_us: 0,
                    };
                    sink.accept(&out)?;
                    packets.push(out);
                }
                started_at
            }
            ReplayMode::RealTime { speed_factor } => {
                let scaled = |gap: Micros| (gap as f64 / speed_factor).round() as Micros;
                for p in &w.packets {
                    let target = started_at + scaled(p.ts_micros - w.start_ts_micros);
                    self.clock.sleep_until(target);
                    let emitted = self.clock.now_micros();
                    let lateness_us = emitted - target;
                    max_lateness_us = max_lateness_us.max(lateness_us);
                    let out = ReplayedPacket {
                        record: PacketRecord {
                            ts_micros: emitted,
                            ..p.clone()
                        },
                        source_seq: w.seq,
                        align_offset_micros: offset,
                        lateness_us,
                    };
                    sink.accept(&out)?;
                    packets.push(out);
                }
                // hold the window open for its full (scaled) length
                self.clock.sleep_until(started_at + scaled(w.duration()));
                self.clock.now_micros()
            }
        };
        sink.window_done(w.seq)?;
        log.record_replayed(w.seq, completed_at)?;
        self.last_seq = Some(w.seq);
        Ok(ReplayedTrace {
            seq: w.seq,
            align_offset_micros: offset,
            started_at,
            completed_at,
            packets,
            max_lateness_us,
        })
    }
}
