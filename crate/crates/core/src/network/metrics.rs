use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::NodeId;

/// Running mean, rms and extreme of a signed quantity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: u64,
    pub mean: f64,
    pub rms: f64,
    pub max_abs: f64,
    #[serde(skip)]
    sum: f64,
    #[serde(skip)]
    sum_sq: f64,
}

impl ErrorStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
        self.max_abs = self.max_abs.max(x.abs());
        self.mean = self.sum / self.count as f64;
        self.rms = (self.sum_sq / self.count as f64).sqrt();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RangingMetrics {
    pub started: u64,
    pub completed: u64,
    pub invalidated: u64,
    /// Measured minus true distance, metres.
    pub error_m: ErrorStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub src: NodeId,
    pub dst: NodeId,
    pub sent: u64,
    pub delivered: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionRecord {
    pub zone: u16,
    pub failed: NodeId,
    pub promoted: NodeId,
    pub superframe: u64,
    pub at_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub superframes: u64,
    pub events: u64,
    pub frames_transmitted: u64,
    pub frames_received: u64,
    pub frames_corrupted: u64,
    pub collisions: u64,
    pub frames_by_kind: BTreeMap<String, u64>,
    pub deferred_transmissions: u64,
    pub datagrams_sent: u64,
    pub datagrams_delivered: u64,
    pub delivery_ratio: f64,
    pub latency_ms: ErrorStats,
    pub flows: Vec<FlowMetrics>,
    pub drops: BTreeMap<String, u64>,
    pub routing_loops: u64,
    pub ranging: RangingMetrics,
    pub attack_detections: u64,
    pub policy_denials: BTreeMap<String, u64>,
    pub associations: u64,
    pub association_rejections: u64,
    pub slot_violations: u64,
    pub link_failures: u64,
    pub node_failures: u64,
    pub promotions: Vec<PromotionRecord>,
    pub degraded_zones: Vec<u16>,
    pub reassembly_timeouts: u64,
}

impl Metrics {
    pub fn bump(map: &mut BTreeMap<String, u64>, key: &str) {
        *map.entry(key.to_string()).or_insert(0) += 1;
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
