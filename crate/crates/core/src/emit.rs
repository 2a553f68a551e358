//! Turns a descriptor into the twin's deployment documents: per-function
//! slice configuration (`smf.yaml`, `nssf.yaml`, `amf.yaml`) and the
//! emulator topology blueprint (`topology.json`).
//!
//! Key names are this crate's own layout; they follow the general shape of
//! Open5GS configs but are not a drop-in replacement for them.

use std::fs;
use std::io;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LinkProfile, TwinDescriptor};

pub const SMF_FILE: &str = "smf.yaml";
pub const NSSF_FILE: &str = "nssf.yaml";
pub const AMF_FILE: &str = "amf.yaml";
pub const TOPOLOGY_FILE: &str = "topology.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmfDoc {
    pub smf: SmfSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmfSection {
    pub sessions: Vec<SmfSession>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmfSession {
    pub dnn: String,
    pub subnet: IpNet,
    pub gateway: IpAddr,
    pub qos_index: u8,
    pub ambr: Ambr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ambr {
    pub downlink_bps: u64,
    pub uplink_bps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NssfDoc {
    pub nssf: NssfSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NssfSection {
    pub nsi: Vec<NssfEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NssfEntry {
    pub dnn: String,
    pub s_nssai: SNssai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SNssai {
    pub sst: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmfDoc {
    pub amf: AmfSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmfSection {
    pub network_name: String,
    pub max_ue: u32,
    pub plmn_support: Vec<PlmnSupport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlmnSupport {
    pub plmn: String,
    pub s_nssai: Vec<SNssai>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostRole {
    Ran,
    Mec,
    CloudUpf,
    CloudCp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub name: String,
    pub role: HostRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub endpoint_a: String,
    pub endpoint_b: String,
    pub profile: LinkProfile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyBlueprint {
    pub hosts: Vec<Host>,
    pub switches: Vec<String>,
    pub links: Vec<Link>,
}

impl TopologyBlueprint {
    /// Breadth-first reachability over hosts and switches.
    pub fn is_connected(&self) -> bool {
        let nodes: Vec<&str> = self
            .hosts
            .iter()
            .map(|h| h.name.as_str())
            .chain(self.switches.iter().map(String::as_str))
            .collect();
        let Some(first) = nodes.first() else {
            return true;
        };
        let mut seen = vec![*first];
        let mut frontier = vec![*first];
        while let Some(n) = frontier.pop() {
            for l in &self.links {
                let other = if l.endpoint_a == n {
                    l.endpoint_b.as_str()
                } else if l.endpoint_b == n {
                    l.endpoint_a.as_str()
                } else {
                    continue;
                };
                if !seen.contains(&other) {
                    seen.push(other);
                    frontier.push(other);
                }
            }
        }
        nodes.iter().all(|n| seen.contains(n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentBundle {
    pub smf: SmfDoc,
    pub nssf: NssfDoc,
    pub amf: AmfDoc,
    pub topology: TopologyBlueprint,
}

/// Four hosts behind three switches: RAN on the access switch, MEC on the
/// edge switch, user-plane and control-plane cloud hosts on the core switch.
pub fn blueprint(profile: LinkProfile) -> TopologyBlueprint {
    let host = |name: &str, role| Host {
        name: name.into(),
        role,
    };
    let link = |a: &str, b: &str| Link {
        endpoint_a: a.into(),
        endpoint_b: b.into(),
        profile,
    };
    TopologyBlueprint {
        hosts: vec![
            host("ran", HostRole::Ran),
            host("mec", HostRole::Mec),
            host("cloud-upf", HostRole::CloudUpf),
            host("cloud-cp", HostRole::CloudCp),
        ],
        switches: vec!["s1".into(), "s2".into(), "s3".into()],
        links: vec![
            link("ran", "s1"),
            link("s1", "s2"),
            link("mec", "s2"),
            link("s2", "s3"),
            link("cloud-upf", "s3"),
            link("cloud-cp", "s3"),
        ],
    }
}

/// Builds the bundle. Slice order is preserved everywhere; SSTs are handed
/// out sequentially from 1.
pub fn emit_bundle(d: &TwinDescriptor) -> DeploymentBundle {
    let sessions = d
        .slices
        .iter()
        .map(|s| SmfSession {
            dnn: s.dnn.clone(),
            subnet: s.subnet,
            gateway: s.gateway_ip,
            qos_index: s.qci,
            ambr: Ambr {
                downlink_bps: s.dl_bandwidth_bps,
                uplink_bps: s.ul_bandwidth_bps,
            },
        })
        .collect();
    let nsi: Vec<NssfEntry> = d
        .slices
        .iter()
        .zip(1u32..)
        .map(|(s, sst)| NssfEntry {
            dnn: s.dnn.clone(),
            s_nssai: SNssai { sst },
        })
        .collect();
    let amf = AmfDoc {
        amf: AmfSection {
            network_name: d.network_name.clone(),
            max_ue: d.ue_count,
            plmn_support: vec![PlmnSupport {
                plmn: d.plmn.clone(),
                s_nssai: nsi.iter().map(|e| e.s_nssai).collect(),
            }],
        },
    };
    DeploymentBundle {
        smf: SmfDoc {
            smf: SmfSection { sessions },
        },
        nssf: NssfDoc {
            nssf: NssfSection { nsi },
        },
        amf,
        topology: blueprint(d.link_profile),
    }
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the four bundle files into `dir` (created if absent) and returns
/// their paths in a fixed order.
pub fn render_bundle(b: &DeploymentBundle, dir: &Path) -> Result<Vec<PathBuf>, EmitError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files: [(&str, String); 4] = [
        (SMF_FILE, yaml(&b.smf)),
        (NSSF_FILE, yaml(&b.nssf)),
        (AMF_FILE, yaml(&b.amf)),
        (
            TOPOLOGY_FILE,
            serde_json::to_string_pretty(&b.topology).expect("topology serializes") + "\n",
        ),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, content) in files {
        let path = dir.join(name);
        fs::write(&path, content).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

fn yaml<T: Serialize>(v: &T) -> String {
    serde_yaml::to_string(v).expect("bundle documents serialize to YAML")
}

/// Reads a bundle previously written by [`render_bundle`].
pub fn load_bundle(dir: &Path) -> Result<DeploymentBundle, EmitError> {
    fn read<T: serde::de::DeserializeOwned>(path: &Path, json: bool) -> Result<T, EmitError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let parsed = if json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_yaml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| EmitError::Format {
            path: path.to_path_buf(),
            message,
        })
    }
    Ok(DeploymentBundle {
        smf: read(&dir.join(SMF_FILE), false)?,
        nssf: read(&dir.join(NSSF_FILE), false)?,
        amf: read(&dir.join(AMF_FILE), false)?,
        topology: read(&dir.join(TOPOLOGY_FILE), true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_slice;

    #[test]
    fn one_session_per_slice() {
        let mut d = two_slice();
        d.slices.truncate(1);
        let b = emit_bundle(&d);
        assert_eq!(b.smf.smf.sessions.len(), 1);
        assert_eq!(b.smf.smf.sessions[0].subnet.to_string(), "10.45.0.0/16");
        assert_eq!(b.smf.smf.sessions[0].qos_index, 9);
    }

    #[test]
    fn sst_sequential_in_slice_order() {
        let b = emit_bundle(&two_slice());
        let ssts: Vec<u32> = b.nssf.nssf.nsi.iter().map(|e| e.s_nssai.sst).collect();
        assert_eq!(ssts, vec![1, 2]);
        let dnns: Vec<&str> = b.nssf.nssf.nsi.iter().map(|e| e.dnn.as_str()).collect();
        assert_eq!(dnns, vec!["internet", "mec"]);
        assert_eq!(b.amf.amf.plmn_support[0].plmn, "00101");
    }

    #[test]
    fn topology_has_four_roles_and_default_links() {
        let b = emit_bundle(&two_slice());
        let t = &b.topology;
        assert_eq!(t.hosts.len(), 4);
        for role in [HostRole::Ran, HostRole::Mec, HostRole::CloudUpf, HostRole::CloudCp] {
            assert_eq!(t.hosts.iter().filter(|h| h.role == role).count(), 1);
        }
        assert!(t.is_connected());
        assert!(t.links.iter().all(|l| l.profile.bandwidth_bps == 10_000_000));
    }

    #[test]
    fn disconnected_topology_detected() {
        let mut t = blueprint(LinkProfile::default());
        t.links.retain(|l| l.endpoint_a != "cloud-cp");
        assert!(!t.is_connected());
    }

    #[test]
    fn render_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let b = emit_bundle(&two_slice());
        let written = render_bundle(&b, dir.path()).unwrap();
        let names: Vec<_> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec!["smf.yaml", "nssf.yaml", "amf.yaml", "topology.json"]);
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
        let smf = fs::read_to_string(dir.path().join(SMF_FILE)).unwrap();
        assert!(smf.contains("subnet: 10.45.0.0/16"), "{smf}");
        assert!(!smf.contains('&') && !smf.contains("!!"));
    }

    #[test]
    fn unwritable_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let target = blocker.join("bundle");
        let err = render_bundle(&emit_bundle(&two_slice()), &target).unwrap_err();
        assert!(err.to_string().contains("bundle"), "{err}");
    }
}
