//! Scenario documents: parsing with field paths in diagnostics, and
//! invariant checks that run without simulating.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{MAX_DATAGRAM_LEN, MIN_COMPRESSED_LEN};
use crate::engine::{NodeId, RadioConfig};
use crate::mac::build_schedule;
use crate::mesh::Role;
use crate::phy::{AttackKind, BROADCAST, ToaModel};
use crate::ranging::RangingConfig;
use crate::secrecy::{PropagationModel, SecrecyScenario};
use crate::security::KeyPolicy;

/// Payload bytes every flow datagram reserves for its flow index and number.
pub const FLOW_TAG_LEN: usize = 6;
pub const MAX_FLOW_PAYLOAD: usize = MAX_DATAGRAM_LEN - MIN_COMPRESSED_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: NodeId,
    pub role: Role,
    pub position: [f64; 3],
    pub zone: u16,
    /// Oscillator error; drawn uniformly in ±max_drift_ppm when absent.
    /// Leaders and border nodes default to a reference clock.
    #[serde(default)]
    pub drift_ppm: Option<f64>,
    #[serde(default)]
    pub uptime_s: f64,
    #[serde(default)]
    pub policy: Option<KeyPolicy>,
    /// Smart device whose hardware differs from its enrolled fingerprint.
    #[serde(default)]
    pub spoofed: bool,
    /// Smart device that also transmits in a slot it was not granted.
    #[serde(default)]
    pub rogue: bool,
    #[serde(default = "yes")]
    pub enrolled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub src: NodeId,
    pub dst: NodeId,
    pub size_bytes: usize,
    pub period_ms: u64,
    #[serde(default = "default_flow_start")]
    pub start_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub magnitude_ns: f64,
    pub link: [NodeId; 2],
    pub start_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureConfig {
    pub node: NodeId,
    pub at_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub trace: String,
    pub metrics: String,
    pub map_csv: String,
    pub map_pgm: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            trace: "trace.tsv".into(),
            metrics: "metrics.json".into(),
            map_csv: "secrecy_map.csv".into(),
            map_pgm: "secrecy_map.pgm".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_slot_us")]
    pub slot_us: u64,
    #[serde(default = "default_drift")]
    pub max_drift_ppm: f64,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub ranging: RangingConfig,
    #[serde(default)]
    pub toa_model: ToaModel,
    #[serde(default)]
    pub policy: KeyPolicy,
    #[serde(default)]
    pub propagation: PropagationModel,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub failures: Vec<FailureConfig>,
    #[serde(default)]
    pub secrecy: Option<SecrecyScenario>,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default = "yes")]
    pub trace: bool,
}

fn yes() -> bool {
    true
}
fn default_slot_us() -> u64 {
    crate::mac::DEFAULT_SLOT_US
}
fn default_drift() -> f64 {
    20.0
}
fn default_flow_start() -> u64 {
    2_000
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: at `{path}`: {msg}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        msg: String,
    },
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Parses a scenario document. Errors name the line and the field path.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            msg: inner.to_string(),
        }
    })
}

impl ScenarioConfig {
    /// Zone id to its leader(s).
    pub fn zone_leaders(&self) -> BTreeMap<u16, Vec<NodeId>> {
        let mut m: BTreeMap<u16, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            let e = m.entry(n.zone).or_default();
            if n.role == Role::Leader {
                e.push(n.id);
            }
        }
        m
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Every violated invariant, in a stable order. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            v.push(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.max_drift_ppm >= 0.0) {
            v.push("max_drift_ppm must be non-negative".to_string());
        }
        if !(self.radio.range_m > 0.0 && self.radio.datarate_bps > 0.0) {
            v.push("radio range and datarate must be positive".to_string());
        }
        if !(self.ranging.tau_ns > 0.0) {
            v.push("ranging.tau_ns must be positive".to_string());
        }
        if let Err(e) = self.policy.validate() {
            v.push(format!("policy: {e}"));
        }

        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                v.push(format!("duplicate node id {}", n.id));
            }
            if n.id == BROADCAST {
                v.push(format!("node id {} is reserved for broadcast", n.id));
            }
            if n.position.iter().any(|c| !c.is_finite()) {
                v.push(format!("node {}: position must be finite", n.id));
            }
            if let Some(p) = &n.policy {
                if let Err(e) = p.validate() {
                    v.push(format!("node {}: policy: {e}", n.id));
                }
            }
            if (n.spoofed || n.rogue) && n.role != Role::SmartDevice {
                v.push(format!("node {}: spoofed and rogue apply to smart devices only", n.id));
            }
        }
        if self.nodes.is_empty() {
            v.push("scenario has no nodes".to_string());
        }

        let zones = self.zone_leaders();
        let mut leaders = Vec::new();
        for (z, ls) in &zones {
            match ls.len() {
                0 => v.push(format!("zone {z} lacks leader")),
                1 => leaders.push(ls[0]),
                _ => v.push(format!(
                    "zone {z} has more than one leader: {}",
                    ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
                )),
            }
        }
        match build_schedule(&leaders, self.slot_us) {
            Ok(s) if !leaders.is_empty() => {
                let per_zone = s.count(crate::mac::SlotKind::Ranging) / s.zones();
                for (z, ls) in &zones {
                    let members = self.nodes.iter().filter(|n| n.zone == *z && n.role != Role::Leader).count();
                    if ls.len() == 1 && members > per_zone {
                        v.push(format!(
                            "zone {z} has {members} members but only {per_zone} ranging slots per superframe"
                        ));
                    }
                }
            }
            Ok(_) => {}
            Err(e) if !leaders.is_empty() => v.push(format!("schedule: {e}")),
            Err(_) => {}
        }

        for (i, f) in self.flows.iter().enumerate() {
            for id in [f.src, f.dst] {
                if !ids.contains(&id) {
                    v.push(format!("flow {i} references unknown node {id}"));
                }
            }
            if f.src == f.dst {
                v.push(format!("flow {i}: source and destination are both {}", f.src));
            }
            if f.size_bytes < FLOW_TAG_LEN || f.size_bytes > MAX_FLOW_PAYLOAD {
                v.push(format!(
                    "flow {i}: size_bytes {} outside {FLOW_TAG_LEN}..={MAX_FLOW_PAYLOAD}",
                    f.size_bytes
                ));
            }
            if f.period_ms == 0 {
                v.push(format!("flow {i}: period_ms must be positive"));
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            for id in a.link {
                if !ids.contains(&id) {
                    v.push(format!("attack {i} references unknown node {id}"));
                }
            }
            if a.link[0] == a.link[1] {
                v.push(format!("attack {i}: link endpoints are both {}", a.link[0]));
            }
            if !(a.magnitude_ns > 0.0) {
                v.push(format!("attack {i}: magnitude_ns must be positive"));
            }
            if !(a.start_s >= 0.0) {
                v.push(format!("attack {i}: start_s must be non-negative"));
            }
        }
        for (i, f) in self.failures.iter().enumerate() {
            if !ids.contains(&f.node) {
                v.push(format!("failure {i} references unknown node {}", f.node));
            }
            if !(f.at_s >= 0.0) {
                v.push(format!("failure {i}: at_s must be non-negative"));
            }
        }
        if let Some(s) = &self.secrecy {
            if let Err(e) = s.validate() {
                v.push(format!("secrecy: {e}"));
            }
            if let Err(e) = self.propagation.validate() {
                v.push(format!("propagation: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "duration_s": 1.0,
        "nodes": [
            {"id": 1, "role": "leader", "position": [0, 0, 0], "zone": 0},
            {"id": 2, "role": "full", "position": [5, 0, 0], "zone": 0}
        ],
        "flows": [{"src": 2, "dst": 1, "size_bytes": 40, "period_ms": 100}]
    }"#;

    #[test]
    fn minimal_is_valid() {
        let c = parse_config(MINIMAL).unwrap();
        assert!(c.violations().is_empty(), "{:?}", c.violations());
        assert_eq!(c.slot_us, 1000);
        assert_eq!(c.flows[0].start_ms, 2000);
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let bad = MINIMAL.replace("\"size_bytes\": 40", "\"size_bytes\": \"forty\"");
        let msg = parse_config(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 7"), "{msg}");
        assert!(msg.contains("flows[0].size_bytes"), "{msg}");
        let unknown = MINIMAL.replace("\"zone\": 0}", "\"zone\": 0, \"colour\": 1}");
        assert!(parse_config(&unknown).unwrap_err().to_string().contains("colour"));
    }

    #[test]
    fn duplicate_id_named() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.nodes[1].id = 1;
        assert!(c.violations().iter().any(|v| v == "duplicate node id 1"));
    }

    #[test]
    fn zone_without_leader() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.nodes[1].zone = 4;
        assert!(c.violations().iter().any(|v| v == "zone 4 lacks leader"));
    }

    #[test]
    fn unknown_flow_node() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.flows[0].dst = 99;
        assert!(c.violations().iter().any(|v| v == "flow 0 references unknown node 99"));
    }
}
