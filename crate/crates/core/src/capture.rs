//! Classic libpcap reading/writing and segmentation of a packet stream into
//! fixed-length capture windows.

use thiserror::Error;

use crate::model::{Direction, Micros, PacketRecord, MICROS_PER_SEC};

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const VERSION_MAJOR: u16 = 2;
pub const VERSION_MINOR: u16 = 4;
pub const DEFAULT_SNAPLEN: u32 = 262_144;
pub const LINKTYPE_ETHERNET: u32 = 1;
/// Raw IPv4/IPv6 with no link-layer header, which is what a `tun` device yields.
pub const LINKTYPE_RAW: u32 = 101;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcapError {
    #[error("not a pcap file: bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated pcap global header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: usize },
    #[error("record at byte offset {offset} has incl_len {incl_len} > orig_len {orig_len}")]
    InvalidRecord {
        offset: usize,
        incl_len: u32,
        orig_len: u32,
    },
    #[error("packet {index} exceeds snaplen ({len} > {snaplen})")]
    ExceedsSnaplen { index: usize, len: u32, snaplen: u32 },
    #[error("packet {index} violates captured_len <= original_len")]
    LengthMismatch { index: usize },
    #[error("packet {index} timestamp does not fit a 32-bit seconds field")]
    TimestampOverflow { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub snaplen: u32,
    pub linktype: u32,
    pub nanosecond: bool,
    pub big_endian: bool,
}

#[derive(Debug, Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

/// Parses a whole pcap file. Both byte orders and the nanosecond variant are
/// accepted; nanosecond timestamps are truncated to microseconds. Records
/// come back with [`Direction::Unknown`].
pub fn read_pcap(bytes: &[u8]) -> Result<(PcapHeader, Vec<PacketRecord>), PcapError> {
    if bytes.len() < 4 {
        return Err(PcapError::TruncatedHeader(bytes.len()));
    }
    let raw = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanosecond) = match raw {
        MAGIC_MICROS => (Endian::Little, false),
        MAGIC_NANOS => (Endian::Little, true),
        m if m.swap_bytes() == MAGIC_MICROS => (Endian::Big, false),
        m if m.swap_bytes() == MAGIC_NANOS => (Endian::Big, true),
        m => return Err(PcapError::BadMagic(m)),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::TruncatedHeader(bytes.len()));
    }
    let header = PcapHeader {
        snaplen: endian.u32(&bytes[16..20]),
        linktype: endian.u32(&bytes[20..24]),
        nanosecond,
        big_endian: matches!(endian, Endian::Big),
    };

    let mut packets = Vec::new();
    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord { offset: off });
        }
        let h = &bytes[off..off + RECORD_HEADER_LEN];
        let ts_sec = endian.u32(&h[0..4]) as u64;
        let ts_frac = endian.u32(&h[4..8]) as u64;
        let incl_len = endian.u32(&h[8..12]);
        let orig_len = endian.u32(&h[12..16]);
        if incl_len > orig_len {
            return Err(PcapError::InvalidRecord {
                offset: off,
                incl_len,
                orig_len,
            });
        }
        let data_start = off + RECORD_HEADER_LEN;
        let data_end = data_start
            .checked_add(incl_len as usize)
            .filter(|&end| end <= bytes.len())
            .ok_or(PcapError::TruncatedRecord { offset: off })?;
        let frac_us = if nanosecond { ts_frac / 1_000 } else { ts_frac };
        packets.push(PacketRecord {
            ts_micros: ts_sec * MICROS_PER_SEC + frac_us,
            original_len: orig_len,
            payload: bytes[data_start..data_end].to_vec(),
            direction: Direction::Unknown,
        });
        off = data_end;
    }
    Ok((header, packets))
}

/// Writes a microsecond-resolution, little-endian pcap with [`DEFAULT_SNAPLEN`].
pub fn write_pcap(linktype: u32, packets: &[PacketRecord]) -> Result<Vec<u8>, PcapError> {
    write_pcap_with_snaplen(linktype, DEFAULT_SNAPLEN, packets)
}

pub fn write_pcap_with_snaplen(
    linktype: u32,
    snaplen: u32,
    packets: &[PacketRecord],
) -> Result<Vec<u8>, PcapError> {
    let body: usize = packets
        .iter()
        .map(|p| RECORD_HEADER_LEN + p.payload.len())
        .sum();
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&VERSION_MAJOR.to_le_bytes());
    out.extend_from_slice(&VERSION_MINOR.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes()); // thiszone
    out.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
    out.extend_from_slice(&snaplen.to_le_bytes());
    out.extend_from_slice(&linktype.to_le_bytes());

    for (index, p) in packets.iter().enumerate() {
        let incl_len = p.captured_len();
        if incl_len > snaplen {
            return Err(PcapError::ExceedsSnaplen {
                index,
                len: incl_len,
                snaplen,
            });
        }
        if incl_len > p.original_len {
            return Err(PcapError::LengthMismatch { index });
        }
        let secs = u32::try_from(p.ts_micros / MICROS_PER_SEC)
            .map_err(|_| PcapError::TimestampOverflow { index })?;
        let usecs = (p.ts_micros % MICROS_PER_SEC) as u32;
        out.extend_from_slice(&secs.to_le_bytes());
        out.extend_from_slice(&usecs.to_le_bytes());
        out.extend_from_slice(&incl_len.to_le_bytes());
        out.extend_from_slice(&p.original_len.to_le_bytes());
        out.extend_from_slice(&p.payload);
    }
    Ok(out)
}

/// One T-second slice of traffic: the unit that is shipped to the twin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureWindow {
    pub seq: u64,
    pub start_ts_micros: Micros,
    pub end_ts_micros: Micros,
    pub packets: Vec<PacketRecord>,
    pub source_interface: String,
}

impl CaptureWindow {
    pub fn duration(&self) -> Micros {
        self.end_ts_micros - self.start_ts_micros
    }

    pub fn to_pcap(&self) -> Result<Vec<u8>, PcapError> {
        write_pcap(LINKTYPE_RAW, &self.packets)
    }

    pub fn file_name(seq: u64) -> String {
        format!("window_{seq}.pcap")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("packet {index} timestamp {ts} precedes the previous packet ({prev})")]
    TimestampRegression { index: usize, ts: Micros, prev: Micros },
    #[error("packet {index} timestamp {ts} precedes the stream origin {origin}")]
    BeforeOrigin { index: usize, ts: Micros, origin: Micros },
    #[error("window length must be positive")]
    ZeroWindow,
}

/// Pull-based splitter: window `k` covers `[origin + kT, origin + (k+1)T)`.
///
/// Windows are emitted while packets remain, and additionally until `until`
/// is covered, so a silent stretch still yields (empty) windows. Every window
/// is exactly `T` long. After an error the iterator is fused.
pub struct Segmenter<I> {
    packets: I,
    window_us: Micros,
    origin: Micros,
    until: Option<Micros>,
    interface: String,
    next_seq: u64,
    pending: Option<PacketRecord>,
    index: usize,
    last_ts: Option<Micros>,
    exhausted: bool,
    failed: bool,
}

pub fn segment_stream<I>(
    packets: I,
    window_us: Micros,
    origin: Micros,
    until: Option<Micros>,
    interface: impl Into<String>,
) -> Result<Segmenter<I::IntoIter>, SegmentError>
where
    I: IntoIterator<Item = PacketRecord>,
{
    if window_us == 0 {
        return Err(SegmentError::ZeroWindow);
    }
    Ok(Segmenter {
        packets: packets.into_iter(),
        window_us,
        origin,
        until,
        interface: interface.into(),
        next_seq: 0,
        pending: None,
        index: 0,
        last_ts: None,
        exhausted: false,
        failed: false,
    })
}

impl<I: Iterator<Item = PacketRecord>> Segmenter<I> {
    fn pull(&mut self) -> Result<Option<PacketRecord>, SegmentError> {
        if let Some(p) = self.pending.take() {
            return Ok(Some(p));
        }
        if self.exhausted {
            return Ok(None);
        }
        let Some(p) = self.packets.next() else {
            self.exhausted = true;
            return Ok(None);
        };
        let index = self.index;
        self.index += 1;
        if p.ts_micros < self.origin {
            return Err(SegmentError::BeforeOrigin {
                index,
                ts: p.ts_micros,
                origin: self.origin,
            });
        }
        if let Some(prev) = self.last_ts {
            if p.ts_micros < prev {
                return Err(SegmentError::TimestampRegression {
                    index,
                    ts: p.ts_micros,
                    prev,
                });
            }
        }
        self.last_ts = Some(p.ts_micros);
        Ok(Some(p))
    }

    fn next_window(&mut self) -> Result<Option<CaptureWindow>, SegmentError> {
        let start = self.origin + self.next_seq * self.window_us;
        let end = start + self.window_us;
        let mut packets = Vec::new();
        while let Some(p) = self.pull()? {
            if p.ts_micros >= end {
                self.pending = Some(p);
                break;
            }
            packets.push(p);
        }
        let more_packets = self.pending.is_some();
        let covers_span = self.until.is_some_and(|u| start < u);
        if packets.is_empty() && !more_packets && !covers_span {
            return Ok(None);
        }
        let w = CaptureWindow {
            seq: self.next_seq,
            start_ts_micros: start,
            end_ts_micros: end,
            packets,
            source_interface: self.interface.clone(),
        };
        self.next_seq += 1;
        Ok(Some(w))
    }
}

impl<I: Iterator<Item = PacketRecord>> Iterator for Segmenter<I> {
    type Item = Result<CaptureWindow, SegmentError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_window() {
            Ok(w) => w.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(ts: Micros, len: usize) -> PacketRecord {
        PacketRecord::new(ts, (0..len).map(|i| i as u8).collect(), Direction::Unknown)
    }

    const S: Micros = MICROS_PER_SEC;

    #[test]
    fn empty_capture_is_24_bytes() {
        let bytes = write_pcap(LINKTYPE_RAW, &[]).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 2);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 4);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 101);
        let (h, p) = read_pcap(&bytes).unwrap();
        assert_eq!(h.linktype, 101);
        assert!(p.is_empty());
    }

    #[test]
    fn record_header_fields() {
        let bytes = write_pcap(LINKTYPE_RAW, &[pkt(S, 60)]).unwrap();
        let h: Vec<u32> = bytes[24..40]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(h, vec![1, 0, 60, 60]);
        assert_eq!(bytes.len(), 24 + 16 + 60);
    }

    #[test]
    fn three_packet_round_trip() {
        let packets = vec![pkt(S, 10), pkt(S + 250, 0), pkt(3 * S + 999_999, 1500)];
        let bytes = write_pcap(LINKTYPE_RAW, &packets).unwrap();
        let (_, back) = read_pcap(&bytes).unwrap();
        assert_eq!(back, packets);
    }

    #[test]
    fn truncated_record_offset() {
        let bytes = write_pcap(LINKTYPE_RAW, &[pkt(S, 10), pkt(2 * S, 10)]).unwrap();
        let cut = &bytes[..24 + 26 + 20];
        assert_eq!(
            read_pcap(cut),
            Err(PcapError::TruncatedRecord { offset: 24 + 26 })
        );
        let cut = &bytes[..24 + 26 + 8];
        assert_eq!(
            read_pcap(cut),
            Err(PcapError::TruncatedRecord { offset: 24 + 26 })
        );
    }

    #[test]
    fn bad_magic_and_short_header() {
        assert_eq!(read_pcap(&[0u8; 24]), Err(PcapError::BadMagic(0)));
        assert_eq!(
            read_pcap(&MAGIC_MICROS.to_le_bytes()),
            Err(PcapError::TruncatedHeader(4))
        );
    }

    #[test]
    fn snaplen_exceeded_names_index() {
        let err = write_pcap_with_snaplen(LINKTYPE_RAW, 64, &[pkt(0, 10), pkt(1, 65)]).unwrap_err();
        assert_eq!(
            err,
            PcapError::ExceedsSnaplen {
                index: 1,
                len: 65,
                snaplen: 64
            }
        );
    }

    #[test]
    fn truncated_capture_keeps_original_len() {
        let mut p = pkt(S, 40);
        p.original_len = 1500;
        let (_, back) = read_pcap(&write_pcap(LINKTYPE_RAW, &[p.clone()]).unwrap()).unwrap();
        assert_eq!(back[0], p);
        let mut bad = pkt(S, 40);
        bad.original_len = 10;
        assert_eq!(
            write_pcap(LINKTYPE_RAW, &[bad]),
            Err(PcapError::LengthMismatch { index: 0 })
        );
    }

    fn windows(ts: &[Micros], t: Micros, until: Option<Micros>) -> Vec<CaptureWindow> {
        segment_stream(ts.iter().map(|&t| pkt(t, 1)), t, 0, until, "tun2")
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap()
    }

    #[test]
    fn two_minute_window_assignment() {
        let w = windows(&[S, 119 * S, 121 * S], 120 * S, None);
        assert_eq!(w.len(), 2);
        let ts = |i: usize| w[i].packets.iter().map(|p| p.ts_micros).collect::<Vec<_>>();
        assert_eq!(ts(0), vec![S, 119 * S]);
        assert_eq!(ts(1), vec![121 * S]);
        assert_eq!((w[1].start_ts_micros, w[1].end_ts_micros), (120 * S, 240 * S));
    }

    #[test]
    fn silent_span_yields_empty_windows() {
        let w = windows(&[], 120 * S, Some(240 * S));
        assert_eq!(w.len(), 2);
        assert_eq!(w.iter().map(|w| w.seq).collect::<Vec<_>>(), vec![0, 1]);
        assert!(w.iter().all(|w| w.packets.is_empty() && w.duration() == 120 * S));
    }

    #[test]
    fn boundary_packet_goes_to_later_window() {
        let w = windows(&[10 * S], 10 * S, None);
        assert_eq!(w.len(), 2);
        assert!(w[0].packets.is_empty());
        assert_eq!(w[1].packets.len(), 1);
    }

    #[test]
    fn gaps_emit_empty_windows_between() {
        let w = windows(&[S, 35 * S], 10 * S, None);
        assert_eq!(w.iter().map(|w| w.packets.len()).collect::<Vec<_>>(), vec![1, 0, 0, 1]);
    }

    #[test]
    fn regression_is_reported_with_index() {
        let mut it = segment_stream(vec![pkt(5, 1), pkt(7, 1), pkt(6, 1)], S, 0, None, "tun2").unwrap();
        assert_eq!(
            it.next(),
            Some(Err(SegmentError::TimestampRegression { index: 2, ts: 6, prev: 7 }))
        );
        assert_eq!(it.next(), None);
    }

    #[test]
    fn before_origin_and_zero_window() {
        let mut it = segment_stream(vec![pkt(5, 1)], S, 10, None, "tun2").unwrap();
        assert!(matches!(it.next(), Some(Err(SegmentError::BeforeOrigin { index: 0, .. }))));
        assert!(matches!(
            segment_stream(Vec::new(), 0, 0, None, "x"),
            Err(SegmentError::ZeroWindow)
        ));
    }
}
