//! Canonical twin descriptor and the packet record shared by every stage.
//!
//! The descriptor is the only artifact exchanged between the physical side
//! and the twin: ingestion produces it, emission and the sync loop consume it.
//! All durations are integer microseconds.

use std::collections::HashSet;
use std::fmt;
use std::net::IpAddr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds, either a duration or a timestamp since the Unix epoch.
pub type Micros = u64;

pub const MICROS_PER_SEC: u64 = 1_000_000;

pub const DEFAULT_CAPTURE_INTERFACE: &str = "tun2";
pub const DEFAULT_LINK_BANDWIDTH_BPS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwinDescriptor {
    pub network_name: String,
    pub plmn: String,
    pub ue_count: u32,
    #[serde(default = "default_capture_interface")]
    pub capture_interface: String,
    #[serde(rename = "window_seconds", with = "seconds")]
    pub window_us: Micros,
    #[serde(default)]
    pub link_profile: LinkProfile,
    pub slices: Vec<SliceSpec>,
}

fn default_capture_interface() -> String {
    DEFAULT_CAPTURE_INTERFACE.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub dnn: String,
    pub subnet: IpNet,
    pub gateway_ip: IpAddr,
    pub dl_bandwidth_bps: u64,
    pub ul_bandwidth_bps: u64,
    pub qci: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub bandwidth_bps: u64,
    pub latency_us: Micros,
    pub jitter_us: Micros,
}

impl Default for LinkProfile {
    fn default() -> Self {
        LinkProfile {
            bandwidth_bps: DEFAULT_LINK_BANDWIDTH_BPS,
            latency_us: 0,
            jitter_us: 0,
        }
    }
}

/// `window_seconds` travels as a JSON number of seconds but is held as
/// whole microseconds.
mod seconds {
    use super::{Micros, MICROS_PER_SEC};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(us: &Micros, s: S) -> Result<S::Ok, S::Error> {
        if us.is_multiple_of(MICROS_PER_SEC) {
            s.serialize_u64(us / MICROS_PER_SEC)
        } else {
            s.serialize_f64(*us as f64 / MICROS_PER_SEC as f64)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Micros, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(D::Error::custom(format!(
                "window_seconds must be a non-negative number, got {secs}"
            )));
        }
        Ok((secs * MICROS_PER_SEC as f64).round() as Micros)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Uplink,
    Downlink,
    Unknown,
}

/// One captured packet. `captured_len` is the payload length; `original_len`
/// is the on-wire length before any snap truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_micros: Micros,
    pub original_len: u32,
    pub payload: Vec<u8>,
    pub direction: Direction,
}

impl PacketRecord {
    /// A full, untruncated packet.
    pub fn new(ts_micros: Micros, payload: Vec<u8>, direction: Direction) -> Self {
        PacketRecord {
            ts_micros,
            original_len: payload.len() as u32,
            payload,
            direction,
        }
    }

    pub fn captured_len(&self) -> u32 {
        self.payload.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateDnn,
    SubnetOverlap,
    GatewayOutsideSubnet,
    QciRange,
    NonPositiveBandwidth,
    PlmnFormat,
    NonPositiveWindow,
    EmptyName,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateDnn => "duplicate DNN",
            Rule::SubnetOverlap => "overlapping subnets",
            Rule::GatewayOutsideSubnet => "gateway outside subnet",
            Rule::QciRange => "QCI outside 1..=9",
            Rule::NonPositiveBandwidth => "bandwidth must be positive",
            Rule::PlmnFormat => "PLMN must be 5 or 6 decimal digits",
            Rule::NonPositiveWindow => "window must be positive",
            Rule::EmptyName => "name must not be empty",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.detail)
    }
}

fn violation(field: impl Into<String>, rule: Rule, detail: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        rule,
        detail: detail.into(),
    }
}

/// Checks every descriptor invariant. An empty result means the descriptor
/// is valid.
pub fn validate_descriptor(d: &TwinDescriptor) -> Vec<Violation> {
    let mut out = Vec::new();

    if d.network_name.is_empty() {
        out.push(violation("network_name", Rule::EmptyName, "empty"));
    }
    if d.capture_interface.is_empty() {
        out.push(violation("capture_interface", Rule::EmptyName, "empty"));
    }
    let plmn_ok = (5..=6).contains(&d.plmn.len()) && d.plmn.bytes().all(|b| b.is_ascii_digit());
    if !plmn_ok {
        out.push(violation("plmn", Rule::PlmnFormat, format!("{:?}", d.plmn)));
    }
    if d.window_us == 0 {
        out.push(violation("window_seconds", Rule::NonPositiveWindow, "0"));
    }
    if d.link_profile.bandwidth_bps == 0 {
        out.push(violation(
            "link_profile.bandwidth_bps",
            Rule::NonPositiveBandwidth,
            "0",
        ));
    }

    let mut seen = HashSet::new();
    for s in &d.slices {
        if s.dnn.is_empty() {
            out.push(violation("slices[].dnn", Rule::EmptyName, "empty"));
        } else if !seen.insert(s.dnn.as_str()) {
            out.push(violation("slices[].dnn", Rule::DuplicateDnn, s.dnn.clone()));
        }
        if !s.subnet.contains(&s.gateway_ip) {
            out.push(violation(
                format!("slices[{}].gateway_ip", s.dnn),
                Rule::GatewayOutsideSubnet,
                format!("{} not in {}", s.gateway_ip, s.subnet),
            ));
        }
        if !(1..=9).contains(&s.qci) {
            out.push(violation(
                format!("slices[{}].qci", s.dnn),
                Rule::QciRange,
                s.qci.to_string(),
            ));
        }
        if s.dl_bandwidth_bps == 0 {
            out.push(violation(
                format!("slices[{}].dl_bandwidth_bps", s.dnn),
                Rule::NonPositiveBandwidth,
                "0",
            ));
        }
        if s.ul_bandwidth_bps == 0 {
            out.push(violation(
                format!("slices[{}].ul_bandwidth_bps", s.dnn),
                Rule::NonPositiveBandwidth,
                "0",
            ));
        }
    }

    // Overlap pairs are reported in canonical (sorted) form so the result does
    // not depend on slice order.
    let mut overlaps = Vec::new();
    for (i, a) in d.slices.iter().enumerate() {
        for b in &d.slices[i + 1..] {
            if subnets_overlap(&a.subnet, &b.subnet) {
                let (x, y) = canonical_pair(a.subnet.trunc(), b.subnet.trunc());
                overlaps.push(violation(
                    "slices[].subnet",
                    Rule::SubnetOverlap,
                    format!("{x} overlaps {y}"),
                ));
            }
        }
    }
    overlaps.sort();
    out.extend(overlaps);
    out
}

fn canonical_pair(a: IpNet, b: IpNet) -> (IpNet, IpNet) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn subnets_overlap(a: &IpNet, b: &IpNet) -> bool {
    a.contains(&b.network()) || b.contains(&a.network())
}

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("malformed descriptor JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("descriptor schema error: {0}")]
    Schema(String),
    #[error("descriptor is invalid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

pub(crate) fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Serializes a valid descriptor as pretty-printed JSON.
pub fn descriptor_to_json(d: &TwinDescriptor) -> Result<Vec<u8>, DescriptorError> {
    let violations = validate_descriptor(d);
    if !violations.is_empty() {
        return Err(DescriptorError::Invalid(violations));
    }
    let mut bytes = serde_json::to_vec_pretty(d).expect("descriptor serialization is infallible");
    bytes.push(b'\n');
    Ok(bytes)
}

/// Parses descriptor JSON. Syntax problems and schema problems are reported
/// separately; semantic validation is left to [`validate_descriptor`].
pub fn descriptor_from_json(bytes: &[u8]) -> Result<TwinDescriptor, DescriptorError> {
    serde_json::from_slice(bytes).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => DescriptorError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
            Category::Data => DescriptorError::Schema(e.to_string()),
        }
    })
}
