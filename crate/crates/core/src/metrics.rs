//! Twin fidelity metrics: throughput series and their comparison, twin
//! alignment ratio, update latency, age of information and the state
//! consistency index.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::emit::DeploymentBundle;
use crate::model::{Micros, PacketRecord, TwinDescriptor, MICROS_PER_SEC};
use crate::transport::SyncLog;

pub const DEFAULT_BIN_WIDTH_US: Micros = MICROS_PER_SEC;
/// Correlations closer than this are treated as equal when picking a lag.
const NCC_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("bin widths differ ({0} us vs {1} us)")]
    BinWidthMismatch(Micros, Micros),
    #[error("fewer than 2 overlapping bins at every lag")]
    InsufficientOverlap,
    #[error("no window has been replayed")]
    NoReplayedWindows,
    #[error("bin width must be positive")]
    ZeroBinWidth,
    #[error("observation interval must have positive length")]
    EmptyObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputSeries {
    pub origin_ts_micros: Micros,
    pub bin_width_us: Micros,
    /// bits per second, one value per bin
    pub bins: Vec<f64>,
    /// packets outside `[origin, origin + span)`
    #[serde(skip)]
    pub ignored: usize,
}

impl ThroughputSeries {
    pub fn bin_seconds(&self) -> f64 {
        self.bin_width_us as f64 / MICROS_PER_SEC as f64
    }

    /// `t_seconds,bits_per_second`, t relative to the series origin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_seconds,bits_per_second\n");
        for (k, v) in self.bins.iter().enumerate() {
            let t = (k as u64 * self.bin_width_us) as f64 / MICROS_PER_SEC as f64;
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

/// Bins `(timestamp, on-wire length)` pairs. Bin `k` covers
/// `[origin + k*w, origin + (k+1)*w)`; its value is bytes * 8 / w seconds.
pub fn throughput_series_from(
    packets: impl IntoIterator<Item = (Micros, u32)>,
    bin_width_us: Micros,
    origin: Micros,
    span_us: Micros,
) -> Result<ThroughputSeries, MetricsError> {
    if bin_width_us == 0 {
        return Err(MetricsError::ZeroBinWidth);
    }
    let n = span_us.div_ceil(bin_width_us) as usize;
    let mut bytes = vec![0u64; n];
    let mut ignored = 0;
    for (ts, len) in packets {
        if ts < origin || ts - origin >= span_us {
            ignored += 1;
            continue;
        }
        bytes[((ts - origin) / bin_width_us) as usize] += len as u64;
    }
    let secs = bin_width_us as f64 / MICROS_PER_SEC as f64;
    Ok(ThroughputSeries {
        origin_ts_micros: origin,
        bin_width_us,
        bins: bytes.into_iter().map(|b| (b * 8) as f64 / secs).collect(),
        ignored,
    })
}

pub fn throughput_series(
    packets: &[PacketRecord],
    bin_width_us: Micros,
    origin: Micros,
    span_us: Micros,
) -> Result<ThroughputSeries, MetricsError> {
    throughput_series_from(
        packets.iter().map(|p| (p.ts_micros, p.original_len)),
        bin_width_us,
        origin,
        span_us,
    )
}

/// Achieved over planned twinning frequency, clamped to 1. A window counts
/// as delivered when it was received and its capture interval closed inside
/// `(obs_start, obs_end]`.
pub fn twin_alignment_ratio(
    log: &SyncLog,
    planned_period_us: Micros,
    obs_start: Micros,
    obs_end: Micros,
) -> Result<f64, MetricsError> {
    if obs_end <= obs_start {
        return Err(MetricsError::EmptyObservation);
    }
    let achieved = achieved_frequency_hz(log, obs_start, obs_end)?;
    let planned = MICROS_PER_SEC as f64 / planned_period_us as f64;
    Ok((achieved / planned).min(1.0))
}

pub fn delivered_in(log: &SyncLog, obs_start: Micros, obs_end: Micros) -> usize {
    log.entries()
        .filter(|e| !e.lost && e.t_received.is_some())
        .filter(|e| e.t_window_end > obs_start && e.t_window_end <= obs_end)
        .count()
}

pub fn achieved_frequency_hz(log: &SyncLog, obs_start: Micros, obs_end: Micros) -> Result<f64, MetricsError> {
    if obs_end <= obs_start {
        return Err(MetricsError::EmptyObservation);
    }
    let secs = (obs_end - obs_start) as f64 / MICROS_PER_SEC as f64;
    Ok(delivered_in(log, obs_start, obs_end) as f64 / secs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateLatency {
    /// `(seq, t_replayed - t_window_end)` for every replayed window
    pub per_window: Vec<(u64, Micros)>,
    pub mean_us: f64,
    pub max_us: Micros,
}

pub fn update_latency(log: &SyncLog) -> Result<UpdateLatency, MetricsError> {
    let per_window: Vec<(u64, Micros)> = log
        .entries()
        .filter_map(|e| e.t_replayed.map(|r| (e.seq, r - e.t_window_end)))
        .collect();
    if per_window.is_empty() {
        return Err(MetricsError::NoReplayedWindows);
    }
    let sum: u128 = per_window.iter().map(|&(_, l)| l as u128).sum();
    Ok(UpdateLatency {
        mean_us: sum as f64 / per_window.len() as f64,
        max_us: per_window.iter().map(|&(_, l)| l).max().unwrap_or(0),
        per_window,
    })
}

/// `(t_replayed, newest window end applied by then)`, in replay order.
fn freshness_steps(log: &SyncLog) -> Vec<(Micros, Micros)> {
    let mut replays: Vec<(Micros, Micros)> = log
        .entries()
        .filter_map(|e| e.t_replayed.map(|r| (r, e.t_window_end)))
        .collect();
    replays.sort_unstable();
    let mut newest = 0;
    replays
        .into_iter()
        .map(|(t, end)| {
            newest = newest.max(end);
            (t, newest)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AoiSeries {
    pub samples: Vec<(Micros, Micros)>,
    pub mean_us: f64,
    pub peak_us: Micros,
}

/// Age of information at each evaluation instant: `t` minus the end of the
/// newest window replayed at or before `t`, or minus `origin` before the
/// first replay.
pub fn age_of_information(log: &SyncLog, origin: Micros, eval_times: &[Micros]) -> AoiSeries {
    let steps = freshness_steps(log);
    let samples: Vec<(Micros, Micros)> = eval_times
        .iter()
        .map(|&t| {
            let applied = steps.partition_point(|&(r, _)| r <= t);
            let reference = if applied == 0 { origin } else { steps[applied - 1].1.max(origin) };
            (t, t.saturating_sub(reference))
        })
        .collect();
    let mean_us = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|&(_, a)| a as f64).sum::<f64>() / samples.len() as f64
    };
    AoiSeries {
        peak_us: samples.iter().map(|&(_, a)| a).max().unwrap_or(0),
        mean_us,
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AoiProfile {
    /// supremum of the sawtooth (left limit just before a replay)
    pub peak_us: Micros,
    /// exact time average over `[origin, until]`
    pub mean_us: f64,
}

/// Integrates the AoI sawtooth exactly over `[origin, until]`.
pub fn aoi_profile(log: &SyncLog, origin: Micros, until: Micros) -> AoiProfile {
    let mut reference = origin;
    let mut t_prev = origin;
    let mut area = 0.0f64;
    let mut peak = 0;
    let segment = |from: Micros, to: Micros, reference: Micros, area: &mut f64, peak: &mut Micros| {
        if to <= from {
            return;
        }
        let a0 = (from - reference) as f64;
        let a1 = (to - reference) as f64;
        *area += (a0 + a1) / 2.0 * (to - from) as f64;
        *peak = (*peak).max(to - reference);
    };
    for (t_r, newest) in freshness_steps(log) {
        if t_r > until {
            break;
        }
        if t_r < origin {
            reference = reference.max(newest);
            continue;
        }
        segment(t_prev, t_r, reference, &mut area, &mut peak);
        reference = reference.max(newest);
        t_prev = t_r;
    }
    segment(t_prev, until, reference, &mut area, &mut peak);
    let span = until.saturating_sub(origin);
    AoiProfile {
        peak_us: peak,
        mean_us: if span == 0 { 0.0 } else { area / span as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesComparison {
    pub rmse_bps: f64,
    /// `None` when the physical series is flat
    pub nrmse: Option<f64>,
    pub nrmse_degenerate: bool,
    /// `None` when either overlap is constant
    pub pearson_r: Option<f64>,
    /// Positive when the twin series trails the physical one.
    pub estimated_lag_bins: i64,
    pub overlap_bins: usize,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Pairs `npt[i]` with `ndt[i + lag]`.
fn overlap<'a>(npt: &'a [f64], ndt: &'a [f64], lag: i64) -> (&'a [f64], &'a [f64]) {
    let (a0, b0) = if lag >= 0 { (0, lag as usize) } else { ((-lag) as usize, 0) };
    if a0 >= npt.len() || b0 >= ndt.len() {
        return (&[], &[]);
    }
    let n = (npt.len() - a0).min(ndt.len() - b0);
    (&npt[a0..a0 + n], &ndt[b0..b0 + n])
}

/// Finds the integer-bin lag maximizing normalized cross-correlation within
/// `±max_lag_bins`, then scores the lag-corrected overlap. Ties go to the
/// smaller absolute lag. Both series are indexed from their own origin,
/// which is expected to be clock-aligned already.
pub fn compare_series(
    npt: &ThroughputSeries,
    ndt: &ThroughputSeries,
    max_lag_bins: usize,
) -> Result<SeriesComparison, MetricsError> {
    if npt.bin_width_us != ndt.bin_width_us {
        return Err(MetricsError::BinWidthMismatch(npt.bin_width_us, ndt.bin_width_us));
    }
    let max_lag = max_lag_bins as i64;
    let mut lags: Vec<i64> = (-max_lag..=max_lag).collect();
    lags.sort_by_key(|l| (l.abs(), *l));

    let mut best: Option<(i64, Option<f64>, f64)> = None;
    for lag in lags {
        let (a, b) = overlap(&npt.bins, &ndt.bins, lag);
        if a.len() < 2 {
            continue;
        }
        let ncc = pearson(a, b);
        let err = rmse(a, b);
        let better = match &best {
            None => true,
            Some((_, best_ncc, best_err)) => match (ncc, best_ncc) {
                (Some(c), Some(bc)) => c > bc + NCC_TIE,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => err < *best_err,
            },
        };
        if better {
            best = Some((lag, ncc, err));
        }
    }
    let (lag, ncc, err) = best.ok_or(MetricsError::InsufficientOverlap)?;
    let (a, _) = overlap(&npt.bins, &ndt.bins, lag);

    let max = npt.bins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = npt.bins.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    Ok(SeriesComparison {
        rmse_bps: err,
        nrmse: (range > 0.0).then(|| err / range),
        nrmse_degenerate: range <= 0.0,
        pearson_r: ncc,
        estimated_lag_bins: lag,
        overlap_bins: a.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyAudit {
    pub audited: usize,
    pub matched: usize,
}

impl ConsistencyAudit {
    pub fn index(&self) -> f64 {
        if self.audited == 0 {
            1.0
        } else {
            self.matched as f64 / self.audited as f64
        }
    }
}

pub const FIELDS_PER_SLICE: usize = 6;
pub const GLOBAL_FIELDS: usize = 2;

/// Field-by-field audit of the deployed bundle against the descriptor.
/// Per slice: DNN (in both SMF and NSSF), subnet, gateway, both bandwidths
/// and QCI; globally: PLMN and UE count. Slices are matched by position;
/// surplus sessions on either side count as mismatched fields.
pub fn consistency_audit(d: &TwinDescriptor, b: &DeploymentBundle) -> ConsistencyAudit {
    let sessions = &b.smf.smf.sessions;
    let nsi = &b.nssf.nssf.nsi;
    let slots = d.slices.len().max(sessions.len());
    let mut matched = 0;
    for (i, s) in d.slices.iter().enumerate() {
        let Some(sess) = sessions.get(i) else { continue };
        let nssf_dnn = nsi.get(i).map(|e| e.dnn.as_str());
        matched += [
            sess.dnn == s.dnn && nssf_dnn == Some(s.dnn.as_str()),
            sess.subnet == s.subnet,
            sess.gateway == s.gateway_ip,
            sess.ambr.downlink_bps == s.dl_bandwidth_bps,
            sess.ambr.uplink_bps == s.ul_bandwidth_bps,
            sess.qos_index == s.qci,
        ]
        .iter()
        .filter(|&&ok| ok)
        .count();
    }
    let amf = &b.amf.amf;
    if !amf.plmn_support.is_empty() && amf.plmn_support.iter().all(|p| p.plmn == d.plmn) {
        matched += 1;
    }
    if amf.max_ue == d.ue_count {
        matched += 1;
    }
    ConsistencyAudit {
        audited: slots * FIELDS_PER_SLICE + GLOBAL_FIELDS,
        matched,
    }
}

pub fn state_consistency_index(d: &TwinDescriptor, b: &DeploymentBundle) -> f64 {
    consistency_audit(d, b).index()
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One run's fidelity summary. Durations are microseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub window_us: Micros,
    pub duration_us: Micros,
    pub bin_width_us: Micros,
    pub windows_planned: usize,
    pub windows_delivered: usize,
    pub windows_lost: usize,
    pub twin_alignment_ratio: f64,
    pub planned_sync_frequency_hz: f64,
    pub sync_frequency_hz: f64,
    /// Latency and lag fields are null when no window was replayed.
    pub mean_update_latency_us: Option<f64>,
    pub max_update_latency_us: Option<Micros>,
    pub mean_twin_lag_us: Option<f64>,
    pub max_twin_lag_us: Option<Micros>,
    pub mean_age_of_information_us: f64,
    pub peak_age_of_information_us: Micros,
    pub rmse_bps: f64,
    pub nrmse: Option<f64>,
    pub nrmse_degenerate: bool,
    pub pearson_r: Option<f64>,
    pub estimated_lag_bins: i64,
    pub estimated_lag_us: i64,
    pub consistency_index: f64,
    pub replay_max_lateness_us: Micros,
    /// Always null: no predictor is attached to the twin.
    pub deviation_of_prediction: Option<f64>,
}

impl FidelityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Header line plus one data row; empty cells for absent values.
    pub fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let obj = value.as_object().expect("report is an object");
        let header: Vec<&str> = obj.keys().map(String::as_str).collect();
        let row: Vec<String> = obj
            .values()
            .map(|v| match v {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
