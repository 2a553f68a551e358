//! Seeded traffic generator standing in for the physical network. Four
//! scenario models; all packets carry a synthetic IPv4/UDP header with
//! correct lengths and checksum followed by pseudo-random fill.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{Direction, Micros, PacketRecord, MICROS_PER_SEC};

/// 2023-11-14T22:13:20Z, so exported traces carry plausible epoch times.
pub const DEFAULT_ORIGIN_TS: Micros = 1_700_000_000 * MICROS_PER_SEC;
pub const IP_UDP_HEADER_LEN: usize = 28;

const MS: Micros = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    AttachAndBrowse,
    VideoStreaming,
    VoiceCall,
    LiveUpload,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::AttachAndBrowse,
        ScenarioKind::VideoStreaming,
        ScenarioKind::VoiceCall,
        ScenarioKind::LiveUpload,
    ];

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            ScenarioKind::AttachAndBrowse => "browse",
            ScenarioKind::VideoStreaming => "stream",
            ScenarioKind::VoiceCall => "voice",
            ScenarioKind::LiveUpload => "live-upload",
        }
    }

    pub fn min_ue_count(self) -> u32 {
        match self {
            ScenarioKind::VoiceCall => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "browse" | "attach-and-browse" => ScenarioKind::AttachAndBrowse,
            "stream" | "video-streaming" => ScenarioKind::VideoStreaming,
            "voice" | "voice-call" => ScenarioKind::VoiceCall,
            "live-upload" => ScenarioKind::LiveUpload,
            other => return Err(format!("unknown scenario `{other}` (browse, stream, voice, live-upload)")),
        })
    }
}

/// Model parameters. Defaults are the documented first-order models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub mtu_bytes: u32,

    pub attach_packets: u32,
    pub attach_duration_us: Micros,
    pub attach_min_bytes: u32,
    pub attach_max_bytes: u32,

    pub browse_mean_interarrival_us: Micros,
    pub browse_request_bytes: u32,
    pub browse_mean_burst_bytes: f64,
    pub browse_burst_sigma: f64,
    pub browse_burst_cap_bytes: f64,
    /// downlink pacing, normally the slice's downlink bandwidth
    pub dl_bandwidth_bps: u64,
    pub browse_ack_every: u32,

    pub stream_on_us: Micros,
    pub stream_off_us: Micros,
    pub stream_rate_bps: u64,
    /// per-chunk relative bitrate variation
    pub stream_rate_jitter: f64,
    pub stream_ack_every: u32,

    pub voice_packet_bytes: u32,
    pub voice_period_us: Micros,
    /// symmetric per-packet timing jitter
    pub voice_jitter_us: Micros,

    pub upload_rate_bps: u64,
    /// per-second relative rate variation
    pub upload_rate_jitter: f64,
    pub upload_ack_every: u32,

    pub ack_bytes: u32,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            mtu_bytes: 1400,
            attach_packets: 40,
            attach_duration_us: 2 * MICROS_PER_SEC,
            attach_min_bytes: 60,
            attach_max_bytes: 200,
            browse_mean_interarrival_us: 8 * MICROS_PER_SEC,
            browse_request_bytes: 500,
            browse_mean_burst_bytes: 1.5e6,
            browse_burst_sigma: 1.0,
            browse_burst_cap_bytes: 20e6,
            dl_bandwidth_bps: 10_000_000,
            browse_ack_every: 4,
            stream_on_us: 2 * MICROS_PER_SEC,
            stream_off_us: 2 * MICROS_PER_SEC,
            stream_rate_bps: 5_000_000,
            stream_rate_jitter: 0.1,
            stream_ack_every: 8,
            voice_packet_bytes: 172,
            voice_period_us: 20 * MS,
            voice_jitter_us: 2 * MS,
            upload_rate_bps: 3_000_000,
            upload_rate_jitter: 0.2,
            upload_ack_every: 10,
            ack_bytes: 52,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub duration_us: Micros,
    pub seed: u64,
    pub ue_count: u32,
    pub origin_ts_micros: Micros,
    #[serde(default)]
    pub params: ScenarioParams,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, duration_us: Micros, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            duration_us,
            seed,
            ue_count: kind.min_ue_count().max(2),
            origin_ts_micros: DEFAULT_ORIGIN_TS,
            params: ScenarioParams::default(),
        }
    }

    pub fn end_ts(&self) -> Micros {
        self.origin_ts_micros + self.duration_us
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let p = &self.params;
        if self.duration_us == 0 {
            return bad("duration must be positive".into());
        }
        if self.ue_count < self.kind.min_ue_count() {
            return bad(format!(
                "{} needs at least {} UEs, got {}",
                self.kind,
                self.kind.min_ue_count(),
                self.ue_count
            ));
        }
        if self.ue_count > 250 {
            return bad("at most 250 UEs are supported".into());
        }
        if self.origin_ts_micros.checked_add(self.duration_us).is_none() {
            return bad("trace end overflows".into());
        }
        let sizes = [
            ("mtu_bytes", p.mtu_bytes),
            ("attach_min_bytes", p.attach_min_bytes),
            ("browse_request_bytes", p.browse_request_bytes),
            ("voice_packet_bytes", p.voice_packet_bytes),
            ("ack_bytes", p.ack_bytes),
        ];
        for (name, v) in sizes {
            if (v as usize) < IP_UDP_HEADER_LEN || v > 65_535 {
                return bad(format!("{name} must be within {IP_UDP_HEADER_LEN}..=65535, got {v}"));
            }
        }
        if p.attach_max_bytes < p.attach_min_bytes || p.attach_max_bytes > 65_535 {
            return bad("attach_max_bytes must be within attach_min_bytes..=65535".into());
        }
        let positive = [
            ("attach_duration_us", p.attach_duration_us),
            ("browse_mean_interarrival_us", p.browse_mean_interarrival_us),
            ("dl_bandwidth_bps", p.dl_bandwidth_bps),
            ("stream_on_us", p.stream_on_us),
            ("stream_rate_bps", p.stream_rate_bps),
            ("voice_period_us", p.voice_period_us),
            ("upload_rate_bps", p.upload_rate_bps),
            ("browse_ack_every", p.browse_ack_every as u64),
            ("stream_ack_every", p.stream_ack_every as u64),
            ("upload_ack_every", p.upload_ack_every as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if p.voice_jitter_us * 2 >= p.voice_period_us {
            return bad("voice_jitter_us must be below half the voice period".into());
        }
        for (name, v) in [("stream_rate_jitter", p.stream_rate_jitter), ("upload_rate_jitter", p.upload_rate_jitter)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if !(p.browse_mean_burst_bytes > 0.0 && p.browse_burst_sigma >= 0.0 && p.browse_burst_cap_bytes > 0.0) {
            return bad("browse burst parameters must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("clock went backwards: {now} us after {prev} us")]
    ClockRegression { now: Micros, prev: Micros },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrace {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub packets: Vec<PacketRecord>,
}

impl GeneratedTrace {
    pub fn bytes(&self, dir: Direction) -> u64 {
        self.packets
            .iter()
            .filter(|p| p.direction == dir)
            .map(|p| p.original_len as u64)
            .sum()
    }
}

fn ue_addr(ue: u32) -> Ipv4Addr {
    Ipv4Addr::new(10, 45, 0, 2 + ue as u8)
}

const REMOTE: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 10);

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// IPv4/UDP datagram of `len` bytes total with random fill.
fn synth_payload(rng: &mut ChaCha8Rng, len: u32, src: Ipv4Addr, dst: Ipv4Addr, port: u16, ip_id: u16) -> Vec<u8> {
    let len = len as usize;
    let mut p = vec![0u8; len];
    p[0] = 0x45;
    p[2..4].copy_from_slice(&(len as u16).to_be_bytes());
    p[4..6].copy_from_slice(&ip_id.to_be_bytes());
    p[6] = 0x40; // DF
    p[8] = 64;
    p[9] = 17;
    p[12..16].copy_from_slice(&src.octets());
    p[16..20].copy_from_slice(&dst.octets());
    let csum = ipv4_checksum(&p[..20]);
    p[10..12].copy_from_slice(&csum.to_be_bytes());
    p[20..22].copy_from_slice(&port.to_be_bytes());
    p[22..24].copy_from_slice(&port.to_be_bytes());
    p[24..26].copy_from_slice(&((len - 20) as u16).to_be_bytes());
    rng.fill_bytes(&mut p[IP_UDP_HEADER_LEN..]);
    p
}

/// Collects one UE's packets; everything at or past `end` is discarded.
struct Flow<'a> {
    rng: ChaCha8Rng,
    ue: u32,
    end: Micros,
    next_id: u16,
    out: &'a mut Vec<PacketRecord>,
}

impl Flow<'_> {
    fn emit(&mut self, ts: Micros, len: u32, dir: Direction, port: u16) -> bool {
        if ts >= self.end {
            return false;
        }
        let (src, dst) = match dir {
            Direction::Downlink => (REMOTE, ue_addr(self.ue)),
            _ => (ue_addr(self.ue), REMOTE),
        };
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        let payload = synth_payload(&mut self.rng, len, src, dst, port, id);
        self.out.push(PacketRecord::new(ts, payload, dir));
        true
    }

    /// Emits `bytes` as MTU packets in `dir` paced at `rate_bps` from
    /// `start`, with an ack the other way every `ack_every` packets.
    /// Returns the time just after the last packet.
    #[allow(clippy::too_many_arguments)]
    fn paced_burst(&mut self, start: Micros, bytes: u64, rate_bps: f64, dir: Direction, ack_every: u32, p: &ScenarioParams, port: u16) -> Micros {
        let ack_dir = match dir {
            Direction::Uplink => Direction::Downlink,
            _ => Direction::Uplink,
        };
        let mut sent = 0u64;
        let mut t = start as f64;
        let mut n = 0u32;
        while sent < bytes {
            let len = (bytes - sent).min(p.mtu_bytes as u64).max(IP_UDP_HEADER_LEN as u64) as u32;
            if !self.emit(t as Micros, len, dir, port) {
                break;
            }
            sent += len as u64;
            n += 1;
            if n.is_multiple_of(ack_every) {
                self.emit(t as Micros, p.ack_bytes, ack_dir, port);
            }
            t += len as f64 * 8.0 * MICROS_PER_SEC as f64 / rate_bps;
        }
        t as Micros
    }
}

fn ue_rng(seed: u64, ue: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ue as u64 + 1);
    rng
}

const PORT_CONTROL: u16 = 2123;
const PORT_WEB: u16 = 443;
const PORT_RTP: u16 = 5004;
const PORT_RTMP: u16 = 1935;

fn attach_and_browse(spec: &ScenarioSpec, f: &mut Flow<'_>) {
    let p = &spec.params;
    let o = spec.origin_ts_micros;
    let step = p.attach_duration_us / p.attach_packets.max(1) as u64;
    for i in 0..p.attach_packets {
        let dir = if i % 2 == 0 { Direction::Uplink } else { Direction::Downlink };
        let len = f.rng.random_range(p.attach_min_bytes..=p.attach_max_bytes);
        f.emit(o + i as u64 * step, len, dir, PORT_CONTROL);
    }

    let gaps = Exp::new(1.0 / p.browse_mean_interarrival_us as f64).expect("positive rate");
    let mu = p.browse_mean_burst_bytes.ln() - p.browse_burst_sigma.powi(2) / 2.0;
    let sizes = LogNormal::new(mu, p.browse_burst_sigma).expect("valid lognormal");
    let mut t = (o + p.attach_duration_us) as f64;
    // a page load that is still downloading delays the next request
    let mut busy_until = 0;
    loop {
        t += gaps.sample(&mut f.rng);
        let request_at = (t as Micros).max(busy_until);
        if request_at >= f.end {
            break;
        }
        let burst = sizes.sample(&mut f.rng).min(p.browse_burst_cap_bytes).max(1.0) as u64;
        f.emit(request_at, p.browse_request_bytes, Direction::Uplink, PORT_WEB);
        // one pacing interval of server think time
        let first = request_at + (p.browse_request_bytes as u64 * 8 * MICROS_PER_SEC).div_ceil(p.dl_bandwidth_bps);
        busy_until = f.paced_burst(first, burst, p.dl_bandwidth_bps as f64, Direction::Downlink, p.browse_ack_every, p, PORT_WEB);
    }
}

fn video_streaming(spec: &ScenarioSpec, f: &mut Flow<'_>) {
    let p = &spec.params;
    let period = p.stream_on_us + p.stream_off_us;
    let mut chunk_start = spec.origin_ts_micros;
    while chunk_start < f.end {
        let scale = 1.0 + f.rng.random_range(-p.stream_rate_jitter..=p.stream_rate_jitter);
        let rate = p.stream_rate_bps as f64 * scale;
        let bytes = (rate * p.stream_on_us as f64 / 8.0 / MICROS_PER_SEC as f64) as u64;
        f.paced_burst(chunk_start, bytes, rate, Direction::Downlink, p.stream_ack_every, p, PORT_WEB);
        chunk_start += period;
    }
}

/// Caller's outgoing stream is labelled uplink, the callee's downlink.
fn voice_call(spec: &ScenarioSpec, f: &mut Flow<'_>) {
    let p = &spec.params;
    let o = spec.origin_ts_micros;
    let j = p.voice_jitter_us as i64;
    let mut k = 0u64;
    loop {
        let nominal = o + k * p.voice_period_us;
        if nominal >= f.end {
            break;
        }
        for dir in [Direction::Uplink, Direction::Downlink] {
            let d = if j == 0 { 0 } else { f.rng.random_range(-j..=j) };
            let ts = nominal.saturating_add_signed(d).clamp(o, f.end - 1);
            f.emit(ts, p.voice_packet_bytes, dir, PORT_RTP);
        }
        k += 1;
    }
}

fn live_upload(spec: &ScenarioSpec, f: &mut Flow<'_>) {
    let p = &spec.params;
    let mut second = spec.origin_ts_micros;
    let mut carry = 0u64;
    while second < f.end {
        let scale = 1.0 + f.rng.random_range(-p.upload_rate_jitter..=p.upload_rate_jitter);
        let rate = p.upload_rate_bps as f64 * scale;
        let bytes = (rate / 8.0) as u64 + carry;
        let whole = bytes / p.mtu_bytes as u64 * p.mtu_bytes as u64;
        carry = bytes - whole;
        f.paced_burst(second, whole, rate, Direction::Uplink, p.upload_ack_every, p, PORT_RTMP);
        second += MICROS_PER_SEC;
    }
}

/// Deterministic trace for `spec`: same spec, same bytes.
pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedTrace, SimError> {
    spec.validate()?;
    let mut packets = Vec::new();
    let active: Vec<u32> = match spec.kind {
        ScenarioKind::AttachAndBrowse | ScenarioKind::VideoStreaming => (0..spec.ue_count).collect(),
        // one call per UE pair, keyed by the caller
        ScenarioKind::VoiceCall => (0..spec.ue_count / 2).map(|i| 2 * i).collect(),
        ScenarioKind::LiveUpload => vec![0],
    };
    for ue in active {
        let mut flow = Flow {
            rng: ue_rng(spec.seed, ue),
            ue,
            end: spec.end_ts(),
            next_id: 0,
            out: &mut packets,
        };
        match spec.kind {
            ScenarioKind::AttachAndBrowse => attach_and_browse(spec, &mut flow),
            ScenarioKind::VideoStreaming => video_streaming(spec, &mut flow),
            ScenarioKind::VoiceCall => voice_call(spec, &mut flow),
            ScenarioKind::LiveUpload => live_upload(spec, &mut flow),
        }
    }
    packets.sort_by_key(|p| p.ts_micros);
    Ok(GeneratedTrace {
        kind: spec.kind,
        seed: spec.seed,
        packets,
    })
}

/// Yields the generated trace paced by `clock`, whose timeline is the
/// trace's timestamps. A `ScaledWallClock` with speed 10 replays ten times
/// faster than real time; a `VirtualClock` yields immediately.
pub struct LiveStream<C> {
    packets: std::vec::IntoIter<PacketRecord>,
    clock: C,
    last_now: Micros,
    failed: bool,
}

pub fn stream_live<C: Clock>(spec: &ScenarioSpec, clock: C) -> Result<LiveStream<C>, SimError> {
    let trace = generate(spec)?;
    let last_now = clock.now_micros();
    Ok(LiveStream {
        packets: trace.packets.into_iter(),
        clock,
        last_now,
        failed: false,
    })
}

impl<C: Clock> LiveStream<C> {
    pub fn clock(&self) -> &C {
        &self.clock
    }
}

impl<C: Clock> Iterator for LiveStream<C> {
    type Item = Result<PacketRecord, SimError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let p = self.packets.next()?;
        let now = self.clock.now_micros();
        if now < self.last_now {
            self.failed = true;
            return Some(Err(SimError::ClockRegression { now, prev: self.last_now }));
        }
        self.clock.sleep_until(p.ts_micros);
        self.last_now = self.clock.now_micros();
        Some(Ok(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    const S: Micros = MICROS_PER_SEC;

    fn spec(kind: ScenarioKind, secs: u64, seed: u64) -> ScenarioSpec {
        ScenarioSpec::new(kind, secs * S, seed)
    }

    #[test]
    fn voice_counts() {
        let t = generate(&spec(ScenarioKind::VoiceCall, 10, 3)).unwrap();
        for dir in [Direction::Uplink, Direction::Downlink] {
            let pk: Vec<_> = t.packets.iter().filter(|p| p.direction == dir).collect();
            assert_eq!(pk.len(), 500);
            assert!(pk.iter().all(|p| p.original_len == 172));
        }
        assert_eq!(t.bytes(Direction::Uplink), t.bytes(Direction::Downlink));
    }

    #[test]
    fn voice_needs_two_ues() {
        let mut s = spec(ScenarioKind::VoiceCall, 10, 3);
        s.ue_count = 1;
        assert!(matches!(generate(&s), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(ScenarioKind::LiveUpload, 10, 3);
        s.duration_us = 0;
        assert!(generate(&s).is_err());
        let mut s = spec(ScenarioKind::LiveUpload, 10, 3);
        s.params.ack_bytes = 10;
        assert!(generate(&s).is_err());
        let mut s = spec(ScenarioKind::LiveUpload, 10, 3);
        s.ue_count = 0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn short_browse_is_attach_only() {
        let mut s = spec(ScenarioKind::AttachAndBrowse, 0, 9);
        s.duration_us = s.params.attach_duration_us - S / 2;
        let t = generate(&s).unwrap();
        assert!(!t.packets.is_empty());
        assert!(t.packets.iter().all(|p| p.original_len <= 200));
        assert!(t.packets.iter().all(|p| p.ts_micros < s.end_ts()));
        // 30 of the 40 attach packets per UE fall inside 1.5 s
        assert_eq!(t.packets.len(), 30 * s.ue_count as usize);
    }

    #[test]
    fn live_upload_is_uplink_heavy() {
        let t = generate(&spec(ScenarioKind::LiveUpload, 30, 1)).unwrap();
        assert!(t.bytes(Direction::Uplink) > 5 * t.bytes(Direction::Downlink));
        let rate = t.bytes(Direction::Uplink) as f64 * 8.0 / 30.0;
        assert!((rate - 3e6).abs() < 0.2 * 3e6, "{rate}");
    }

    #[test]
    fn deterministic_and_ordered() {
        for kind in ScenarioKind::ALL {
            let s = spec(kind, 12, 77);
            let a = generate(&s).unwrap();
            assert_eq!(a, generate(&s).unwrap());
            assert!(a.packets.windows(2).all(|w| w[0].ts_micros <= w[1].ts_micros));
            assert!(a.packets.iter().all(|p| p.ts_micros >= s.origin_ts_micros && p.ts_micros < s.end_ts()));
            let other = generate(&ScenarioSpec { seed: 78, ..s }).unwrap();
            assert_ne!(a.packets, other.packets, "{kind}");
        }
    }

    #[test]
    fn headers_are_well_formed() {
        let t = generate(&spec(ScenarioKind::VideoStreaming, 3, 5)).unwrap();
        for p in t.packets.iter().take(50) {
            let b = &p.payload;
            assert_eq!(b[0], 0x45);
            assert_eq!(u16::from_be_bytes([b[2], b[3]]) as usize, b.len());
            assert_eq!(u16::from_be_bytes([b[24], b[25]]) as usize, b.len() - 20);
            assert_eq!(ipv4_checksum(&b[..20]), 0);
        }
    }

    #[test]
    fn live_stream_matches_generate() {
        let s = spec(ScenarioKind::VoiceCall, 2, 4);
        let trace = generate(&s).unwrap();
        let streamed: Vec<_> = stream_live(&s, VirtualClock::starting_at(s.origin_ts_micros))
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(streamed, trace.packets);
        let prefix: Vec<_> = stream_live(&s, VirtualClock::default())
            .unwrap()
            .take(17)
            .map(Result::unwrap)
            .collect();
        assert_eq!(prefix[..], trace.packets[..17]);
    }

    /// Loses 5 us every time it is read.
    struct Rewinding(std::cell::Cell<Micros>);
    impl Clock for Rewinding {
        fn now_micros(&self) -> Micros {
            let v = self.0.get();
            self.0.set(v - 5);
            v
        }
        fn sleep_until(&mut self, _t: Micros) {}
    }

    #[test]
    fn clock_regression_is_reported() {
        let s = spec(ScenarioKind::VoiceCall, 1, 4);
        let mut live = stream_live(&s, Rewinding(std::cell::Cell::new(1000))).unwrap();
        assert!(matches!(live.next(), Some(Err(SimError::ClockRegression { now: 995, prev: 1000 }))));
        assert!(live.next().is_none());
    }

    #[test]
    fn names_round_trip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.cli_name().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!("youtube".parse::<ScenarioKind>().is_err());
    }
}
