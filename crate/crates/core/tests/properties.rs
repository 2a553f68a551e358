use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr};

use ipnet::{IpNet, Ipv4Net};
use proptest::prelude::*;

use twinsync::capture::{read_pcap, segment_stream, write_pcap, CaptureWindow, LINKTYPE_RAW};
use twinsync::clock::VirtualClock;
use twinsync::ingest::parse_phys_config;
use twinsync::metrics::{
    age_of_information, compare_series, pearson, throughput_series, twin_alignment_ratio,
    ThroughputSeries,
};
use twinsync::model::{
    descriptor_from_json, descriptor_to_json, validate_descriptor, Direction, LinkProfile,
    Micros, PacketRecord, Rule, SliceSpec, TwinDescriptor,
};
use twinsync::replay::{CollectingSink, ReplayEngine, ReplayPlan};
use twinsync::transport::{decode_frame, encode_window, SendReceipt, SyncLog, TransportError};

const S: Micros = 1_000_000;

fn arb_descriptor() -> impl Strategy<Value = TwinDescriptor> {
    let slice = (1u64..=10_000_000_000, 1u64..=10_000_000_000, 1u8..=9);
    (
        "[a-z][a-z0-9-]{0,15}",
        "[0-9]{5,6}",
        1u32..1000,
        1u64..=1_000_000_000_000,
        prop::collection::vec(slice, 0..8),
    )
        .prop_map(|(name, plmn, ues, window_us, slices)| TwinDescriptor {
            network_name: name,
            plmn,
            ue_count: ues,
            capture_interface: "tun2".into(),
            window_us,
            link_profile: LinkProfile::default(),
            slices: slices
                .into_iter()
                .enumerate()
                .map(|(i, (dl, ul, qci))| SliceSpec {
                    dnn: format!("dnn{i}"),
                    subnet: IpNet::V4(Ipv4Net::new(Ipv4Addr::new(10, i as u8, 0, 0), 16).unwrap()),
                    gateway_ip: IpAddr::V4(Ipv4Addr::new(10, i as u8, 0, 1)),
                    dl_bandwidth_bps: dl,
                    ul_bandwidth_bps: ul,
                    qci,
                })
                .collect(),
        })
}

fn arb_packets(max: usize) -> impl Strategy<Value = Vec<PacketRecord>> {
    prop::collection::vec(
        (0u64..1u64 << 40, prop::collection::vec(any::<u8>(), 0..200), 0u32..64),
        0..max,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(ts, payload, extra)| PacketRecord {
                ts_micros: ts,
                original_len: payload.len() as u32 + extra,
                payload,
                direction: Direction::Unknown,
            })
            .collect()
    })
}

/// Sorted timestamps relative to an origin.
fn arb_trace(max: usize) -> impl Strategy<Value = (Micros, Micros, Vec<PacketRecord>)> {
    (0u64..1u64 << 40, 1u64..5 * S, prop::collection::vec((0u64..60 * S, 28usize..1500), 0..max)).prop_map(
        |(origin, t, mut v)| {
            v.sort();
            let packets = v
                .into_iter()
                .map(|(off, len)| PacketRecord::new(origin + off, vec![0xab; len], Direction::Uplink))
                .collect();
            (origin, t, packets)
        },
    )
}

fn series(bins: Vec<f64>) -> ThroughputSeries {
    ThroughputSeries {
        origin_ts_micros: 0,
        bin_width_us: S,
        bins,
        ignored: 0,
    }
}

fn periodic_log(delivered: &[bool], t: Micros, latency: Micros) -> SyncLog {
    let mut log = SyncLog::new();
    for (seq, &ok) in delivered.iter().enumerate() {
        let seq = seq as u64;
        let end = (seq + 1) * t;
        log.record_sent(&SendReceipt {
            seq,
            t_window_start: seq * t,
            t_window_end: end,
            t_sent: end,
            byte_length: 0,
            scheduled_arrival: ok.then_some(end + latency),
        })
        .unwrap();
        if ok {
            log.record_received(seq, end + latency).unwrap();
            log.record_replayed(seq, end + latency).unwrap();
        } else {
            log.mark_lost(seq).unwrap();
        }
    }
    log
}

const TOKENS: &[&str] = &[
    "{", "}", "[", "]", ":", ",", "\n", " ", "key", "\"str\"", "\"", "42", "-7", "10.45.0.1",
    "10.45.0.0/16", "1.2.3", "/", "/*", "*/", "//", "true", "false", "\\", "99999999999999999999",
];

proptest! {
    #[test]
    fn descriptor_json_round_trip(d in arb_descriptor()) {
        let bytes = descriptor_to_json(&d).unwrap();
        prop_assert_eq!(descriptor_from_json(&bytes).unwrap(), d);
    }

    #[test]
    fn overlap_detection_ignores_order(
        nets in prop::collection::vec((0u8..4, 0u8..4, 8u8..=24), 2..7).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let to_slices = |v: &[(u8, u8, u8)]| -> Vec<SliceSpec> {
            v.iter()
                .enumerate()
                .map(|(i, &(a, b, p))| {
                    let net = Ipv4Net::new(Ipv4Addr::new(10, a * 64, b * 64, 0), p).unwrap().trunc();
                    SliceSpec {
                        dnn: format!("s{i}-{a}-{b}-{p}"),
                        subnet: IpNet::V4(net),
                        gateway_ip: IpAddr::V4(net.hosts().next().unwrap()),
                        dl_bandwidth_bps: 1,
                        ul_bandwidth_bps: 1,
                        qci: 9,
                    }
                })
                .collect()
        };
        let mut rotated = nets.clone();
        rotated.rotate_left((seed % nets.len() as u64) as usize);
        let overlaps = |v: &[(u8, u8, u8)]| -> BTreeSet<String> {
            let d = TwinDescriptor {
                network_name: "n".into(),
                plmn: "00101".into(),
                ue_count: 1,
                capture_interface: "tun2".into(),
                window_us: S,
                link_profile: LinkProfile::default(),
                slices: to_slices(v),
            };
            validate_descriptor(&d)
                .into_iter()
                .filter(|v| v.rule == Rule::SubnetOverlap)
                .map(|v| v.detail)
                .collect()
        };
        prop_assert_eq!(overlaps(&nets), overlaps(&rotated));
    }

    #[test]
    fn parser_never_panics_on_token_soup(toks in prop::collection::vec(prop::sample::select(TOKENS), 0..60)) {
        let text: String = toks.concat();
        if let Err(e) = parse_phys_config(&text) {
            prop_assert!(e.line >= 1 && e.column >= 1);
        }
    }

    #[test]
    fn parser_never_panics_on_bytes(text in "\\PC{0,200}") {
        let _ = parse_phys_config(&text);
    }

    #[test]
    fn pcap_round_trip(packets in arb_packets(40)) {
        let bytes = write_pcap(LINKTYPE_RAW, &packets).unwrap();
        let (header, read) = read_pcap(&bytes).unwrap();
        prop_assert_eq!(header.linktype, LINKTYPE_RAW);
        prop_assert_eq!(&read, &packets);
        prop_assert_eq!(write_pcap(LINKTYPE_RAW, &read).unwrap(), bytes);
    }

    #[test]
    fn segmentation_conserves_packets((origin, t, packets) in arb_trace(300)) {
        let n = packets.len();
        let windows: Vec<CaptureWindow> = segment_stream(packets.clone(), t, origin, None, "tun2")
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        prop_assert_eq!(windows.iter().map(|w| w.packets.len()).sum::<usize>(), n);
        let mut flattened = Vec::new();
        for (i, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.seq, i as u64);
            prop_assert_eq!(w.start_ts_micros, origin + i as u64 * t);
            prop_assert_eq!(w.end_ts_micros, w.start_ts_micros + t);
            for p in &w.packets {
                prop_assert!(w.start_ts_micros <= p.ts_micros && p.ts_micros < w.end_ts_micros);
            }
            flattened.extend(w.packets.iter().cloned());
        }
        prop_assert_eq!(flattened, packets);
    }

    #[test]
    fn throughput_conserves_volume((origin, _, packets) in arb_trace(300), bin in 1u64..3 * S) {
        let span = 60 * S;
        let s = throughput_series(&packets, bin, origin, span).unwrap();
        prop_assert_eq!(s.bins.len() as u64, span.div_ceil(bin));
        let bytes: u64 = packets.iter().map(|p| p.original_len as u64).sum();
        let recovered: f64 = s.bins.iter().map(|b| b * s.bin_seconds() / 8.0).sum();
        prop_assert!((recovered - bytes as f64).abs() <= 1e-6 * (bytes as f64).max(1.0));
    }

    #[test]
    fn integer_shift_is_recovered(
        base in prop::collection::vec(0.0f64..1e7, 30..60),
        shift in -5i64..=5,
    ) {
        let n = base.len();
        let ndt: Vec<f64> = (0..n as i64)
            .map(|i| if (0..n as i64).contains(&(i - shift)) { base[(i - shift) as usize] } else { 0.0 })
            .collect();
        let c = compare_series(&series(base), &series(ndt), 8).unwrap();
        prop_assert_eq!(c.estimated_lag_bins, shift);
        prop_assert_eq!(c.rmse_bps, 0.0);
    }

    #[test]
    fn pearson_is_affine_invariant(
        pairs in prop::collection::vec((0.0f64..1e6, 0.0f64..1e6), 3..50),
        a in 0.01f64..100.0,
        b in -1e6f64..1e6,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        match (pearson(&x, &y), pearson(&x, &y2)) {
            (Some(r1), Some(r2)) => prop_assert!((r1 - r2).abs() < 1e-6, "{} vs {}", r1, r2),
            (r1, r2) => prop_assert_eq!(r1.is_some(), r2.is_some()),
        }
    }

    #[test]
    fn tar_never_rises_with_more_loss(delivered in prop::collection::vec(any::<bool>(), 1..60), pick in any::<prop::sample::Index>()) {
        let t = 10 * S;
        let end = delivered.len() as u64 * t;
        let before = twin_alignment_ratio(&periodic_log(&delivered, t, 0), t, 0, end).unwrap();
        let mut worse = delivered.clone();
        worse[pick.index(delivered.len())] = false;
        let after = twin_alignment_ratio(&periodic_log(&worse, t, 0), t, 0, end).unwrap();
        prop_assert!(after <= before);
        let fraction = delivered.iter().filter(|&&d| d).count() as f64 / delivered.len() as f64;
        prop_assert!((before - fraction).abs() < 1e-12);
    }

    #[test]
    fn aoi_grows_with_slope_one(
        n in 1usize..20,
        t in 1u64..100 * S,
        l in 0u64..5 * S,
        frac in 0.0f64..1.0,
        d in 1u64..1000,
    ) {
        let log = periodic_log(&vec![true; n], t, l);
        // a point strictly between two replays, far enough from the next one
        let k = (frac * (n - 1) as f64) as u64;
        let r = (k + 1) * t + l;
        let gap_left = t.saturating_sub(d + 1);
        prop_assume!(gap_left > 0);
        let t0 = r + gap_left / 2;
        let a = age_of_information(&log, 0, &[t0, t0 + d]);
        prop_assert_eq!(a.samples[1].1 - a.samples[0].1, d);
    }

    #[test]
    fn replay_preserves_payloads((origin, t, packets) in arb_trace(100)) {
        let windows: Vec<CaptureWindow> = segment_stream(packets.clone(), t, origin, None, "tun2")
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        let mut log = SyncLog::new();
        let mut engine = ReplayEngine::new(ReplayPlan::virtual_clock(), VirtualClock::default()).unwrap();
        let mut sink = CollectingSink::default();
        for w in &windows {
            let frame = encode_window(w).unwrap();
            let received = decode_frame(&frame).unwrap();
            log.record_sent(&SendReceipt {
                seq: w.seq,
                t_window_start: w.start_ts_micros,
                t_window_end: w.end_ts_micros,
                t_sent: w.end_ts_micros,
                byte_length: frame.manifest.byte_length,
                scheduled_arrival: Some(w.end_ts_micros),
            }).unwrap();
            log.record_received(w.seq, w.end_ts_micros).unwrap();
            engine.replay_window(&received, &mut log, &mut sink).unwrap();
        }
        let replayed: Vec<PacketRecord> = sink
            .packets
            .iter()
            .map(|p| PacketRecord { ts_micros: p.aligned_ts(), direction: Direction::Uplink, ..p.record.clone() })
            .collect();
        prop_assert_eq!(replayed, packets);
    }

    #[test]
    fn tampered_frames_are_rejected(packets in arb_packets(10), at in any::<prop::sample::Index>()) {
        let mut packets = packets;
        packets.sort_by_key(|p| p.ts_micros);
        let w = CaptureWindow {
            seq: 3,
            start_ts_micros: 0,
            end_ts_micros: 1 << 41,
            packets,
            source_interface: "tun2".into(),
        };
        let mut frame = encode_window(&w).unwrap();
        let i = at.index(frame.pcap.len());
        frame.pcap[i] ^= 0x01;
        let r = decode_frame(&frame);
        prop_assert!(matches!(r, Err(TransportError::DigestMismatch { seq: 3 })), "{:?}", r);
    }
}
