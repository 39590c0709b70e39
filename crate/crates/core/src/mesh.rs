//! Roles, link-state topology, routing, failure detection, leader promotion
//! and hop-by-hop forwarding.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::NodeId;
use crate::phy::MAX_PAYLOAD_LEN;
use crate::security::{enforce_policy, Decision, DenyReason, KeyPolicy, RffVerdict};

pub const DEFAULT_TTL: u8 = 16;
pub const MAX_TTL: u8 = 0x3F;
/// Consecutive missed expected transmissions before a link is declared down.
pub const MISS_LIMIT: u32 = 3;

pub const MESH_DISPATCH: u8 = 0x80;
pub const MESH_HEADER_LEN: usize = 7;
pub const LSA_DISPATCH: u8 = 0x02;
pub const HEARTBEAT_DISPATCH: u8 = 0x06;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeshError {
    #[error("node {0} is not in the topology")]
    UnknownNode(NodeId),
    #[error("no eligible full node")]
    NoEligibleCandidate,
    #[error("malformed mesh header")]
    MalformedHeader,
    #[error("malformed link-state advertisement")]
    MalformedLsa,
    #[error("ttl {0} out of range 1..=63")]
    BadTtl(u8),
    #[error("node {id}: {msg}")]
    BadDescriptor { id: NodeId, msg: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Full,
    Half,
    Leaf,
    Border,
    SmartDevice,
}

impl Role {
    pub fn may_forward(self) -> bool {
        matches!(self, Role::Leader | Role::Full | Role::Half | Role::Border)
    }

    pub fn may_lead(self) -> bool {
        matches!(self, Role::Leader | Role::Full)
    }

    pub fn always_on(self) -> bool {
        matches!(self, Role::Leader | Role::Border)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Leader => "leader",
            Role::Full => "full",
            Role::Half => "half",
            Role::Leaf => "leaf",
            Role::Border => "border",
            Role::SmartDevice => "smart_device",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub may_forward: bool,
    pub may_lead: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub id: NodeId,
    pub role: Role,
    pub position: [f64; 3],
    pub ethernet: bool,
    pub always_on: bool,
    pub capabilities: Capabilities,
}

impl NodeDescriptor {
    pub fn new(id: NodeId, role: Role, position: [f64; 3]) -> Self {
        Self {
            id,
            role,
            position,
            ethernet: role == Role::Border,
            always_on: role.always_on(),
            capabilities: Capabilities {
                may_forward: role.may_forward(),
                may_lead: role.may_lead(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let bad = |msg| Err(MeshError::BadDescriptor { id: self.id, msg });
        let c = self.capabilities;
        match self.role {
            Role::Leader | Role::Border if !self.always_on => bad("leaders and border nodes must be always on"),
            Role::Leaf | Role::SmartDevice if c.may_forward || c.may_lead => bad("leaf nodes neither forward nor lead"),
            Role::Half if !c.may_forward || c.may_lead => bad("half nodes forward but never lead"),
            Role::Full if !c.may_forward || !c.may_lead => bad("full nodes forward and may lead"),
            Role::Border if !self.ethernet => bad("border nodes need an ethernet interface"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub last_seen: u64,
    pub quality: f64,
}

/// Undirected link-state view. Edge keys are `(min, max)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyGraph {
    /// Vertex id to forwarding capability.
    pub vertices: BTreeMap<NodeId, bool>,
    pub edges: BTreeMap<(NodeId, NodeId), Edge>,
    /// Latest advertisement version seen per origin.
    pub versions: BTreeMap<NodeId, u32>,
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

impl TopologyGraph {
    pub fn add_vertex(&mut self, id: NodeId, forwarder: bool) {
        self.vertices.insert(id, forwarder);
    }

    /// Adds or refreshes an edge. Edges between two non-forwarders are refused.
    pub fn upsert_edge(&mut self, a: NodeId, b: NodeId, quality: f64, seen: u64) -> bool {
        if a == b {
            return false;
        }
        let fa = self.vertices.get(&a).copied();
        let fb = self.vertices.get(&b).copied();
        match (fa, fb) {
            (Some(x), Some(y)) if x || y => {
                self.edges.insert(
                    key(a, b),
                    Edge {
                        last_seen: seen,
                        quality: quality.clamp(0.0, 1.0),
                    },
                );
                true
            }
            _ => false,
        }
    }

    pub fn remove_edge(&mut self, a: NodeId, b: NodeId) -> bool {
        self.edges.remove(&key(a, b)).is_some()
    }

    pub fn remove_vertex(&mut self, id: NodeId) {
        self.vertices.remove(&id);
        self.edges.retain(|(a, b), _| *a != id && *b != id);
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<&Edge> {
        self.edges.get(&key(a, b))
    }

    pub fn is_forwarder(&self, id: NodeId) -> bool {
        self.vertices.get(&id).copied().unwrap_or(false)
    }

    /// Neighbors in ascending id order.
    pub fn neighbors(&self, id: NodeId) -> Vec<(NodeId, f64)> {
        self.edges
            .iter()
            .filter_map(|((a, b), e)| {
                if *a == id {
                    Some((*b, e.quality))
                } else if *b == id {
                    Some((*a, e.quality))
                } else {
                    None
                }
            })
            .collect()
    }

    fn adjacency(&self) -> BTreeMap<NodeId, Vec<(NodeId, f64)>> {
        let mut adj: BTreeMap<NodeId, Vec<(NodeId, f64)>> = self.vertices.keys().map(|v| (*v, Vec::new())).collect();
        for ((a, b), e) in &self.edges {
            if adj.contains_key(a) && adj.contains_key(b) {
                adj.get_mut(a).unwrap().push((*b, e.quality));
                adj.get_mut(b).unwrap().push((*a, e.quality));
            }
        }
        adj
    }

    /// `a b quality` lines, one per edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for ((a, b), e) in &self.edges {
            let _ = writeln!(s, "{a} {b} {:.3}", e.quality);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub next_hop: NodeId,
    pub hops: u32,
    /// Lowest link quality along the chosen path.
    pub bottleneck: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteTable {
    pub source: NodeId,
    pub routes: BTreeMap<NodeId, Route>,
}

impl RouteTable {
    pub fn next_hop(&self, dst: NodeId) -> Option<NodeId> {
        self.routes.get(&dst).map(|r| r.next_hop)
    }

    pub fn dump(&self) -> String {
        let mut s = String::from("dst\tnext_hop\thops\tbottleneck\n");
        for (d, r) in &self.routes {
            let _ = writeln!(s, "{d}\t{}\t{}\t{:.3}", r.next_hop, r.hops, r.bottleneck);
        }
        s
    }
}

/// Shortest paths by hop count from `source`; among equal-length paths the
/// highest bottleneck quality wins, then the lowest first hop. Only the
/// source and forwarders are expanded, so non-forwarders are never interior.
pub fn compute_routes(graph: &TopologyGraph, source: NodeId) -> Result<RouteTable, MeshError> {
    if !graph.vertices.contains_key(&source) {
        return Err(MeshError::UnknownNode(source));
    }
    let adj = graph.adjacency();
    let mut dist: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([source]);
    dist.insert(source, 0);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        if u != source && !graph.is_forwarder(u) {
            continue;
        }
        for (v, _) in &adj[&u] {
            if !dist.contains_key(v) {
                dist.insert(*v, dist[&u] + 1);
                queue.push_back(*v);
            }
        }
    }

    // best[v] per first hop: highest bottleneck over shortest paths via that hop.
    let mut best: BTreeMap<NodeId, BTreeMap<NodeId, f64>> = BTreeMap::new();
    for &v in order.iter().skip(1) {
        let dv = dist[&v];
        let mut here: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (u, q) in &adj[&v] {
            if dist.get(u) != Some(&(dv - 1)) {
                continue;
            }
            if *u == source {
                let e = here.entry(v).or_insert(f64::NEG_INFINITY);
                *e = e.max(*q);
            } else if graph.is_forwarder(*u) {
                if let Some(via) = best.get(u) {
                    for (h, b) in via {
                        let e = here.entry(*h).or_insert(f64::NEG_INFINITY);
                        *e = e.max(b.min(*q));
                    }
                }
            }
        }
        best.insert(v, here);
    }

    let mut routes = BTreeMap::new();
    for (v, via) in &best {
        let pick = via.iter().fold(None::<(NodeId, f64)>, |acc, (h, b)| match acc {
            Some((_, bb)) if bb >= *b => acc,
            _ => Some((*h, *b)),
        });
        if let Some((next_hop, bottleneck)) = pick {
            routes.insert(
                *v,
                Route {
                    next_hop,
                    hops: dist[v],
                    bottleneck,
                },
            );
        }
    }
    Ok(RouteTable { source, routes })
}

/// Consecutive-miss counter for one link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissCounter {
    pub misses: u32,
    pub down: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkEvent {
    None,
    Down,
    Up,
}

impl MissCounter {
    /// Records one expected transmission. Returns `Down` on the third
    /// consecutive miss and `Up` when a down link is heard again.
    pub fn observe(&mut self, heard: bool) -> LinkEvent {
        if heard {
            self.misses = 0;
            if self.down {
                self.down = false;
                return LinkEvent::Up;
            }
            return LinkEvent::None;
        }
        self.misses = self.misses.saturating_add(1);
        if !self.down && self.misses >= MISS_LIMIT {
            self.down = true;
            return LinkEvent::Down;
        }
        LinkEvent::None
    }
}

/// Applies `missed` consecutive misses on `link`. At the limit the edge is
/// removed and the origin's version bumped; returns true if routes must be
/// recomputed.
pub fn on_beacon_miss(graph: &mut TopologyGraph, origin: NodeId, link: (NodeId, NodeId), missed: u32) -> bool {
    if missed < MISS_LIMIT || !graph.remove_edge(link.0, link.1) {
        return false;
    }
    *graph.versions.entry(origin).or_insert(0) += 1;
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: NodeId,
    pub role: Role,
    pub uptime_s: f64,
}

/// Highest-uptime full node; ties go to the lowest id.
pub fn promote_leader(candidates: &[Candidate]) -> Result<NodeId, MeshError> {
    candidates
        .iter()
        .filter(|c| c.role == Role::Full)
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if b.uptime_s > c.uptime_s || (b.uptime_s == c.uptime_s && b.id < c.id) => Some(b),
            _ => Some(c),
        })
        .map(|c| c.id)
        .ok_or(MeshError::NoEligibleCandidate)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshPacket {
    pub src: NodeId,
    pub dst: NodeId,
    pub ttl: u8,
    pub seq: u16,
    pub payload: Vec<u8>,
}

impl MeshPacket {
    pub fn new(src: NodeId, dst: NodeId, seq: u16, payload: Vec<u8>) -> Self {
        Self {
            src,
            dst,
            ttl: DEFAULT_TTL,
            seq,
            payload,
        }
    }

    /// `0x80 | ttl`, origin, final destination, sequence (little endian).
    pub fn encode(&self) -> Result<Vec<u8>, MeshError> {
        if self.ttl == 0 || self.ttl > MAX_TTL {
            return Err(MeshError::BadTtl(self.ttl));
        }
        let mut out = Vec::with_capacity(MESH_HEADER_LEN + self.payload.len());
        out.push(MESH_DISPATCH | self.ttl);
        out.extend_from_slice(&self.src.to_le_bytes());
        out.extend_from_slice(&self.dst.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<Self, MeshError> {
        if b.len() < MESH_HEADER_LEN || b[0] & 0xC0 != MESH_DISPATCH {
            return Err(MeshError::MalformedHeader);
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        Ok(Self {
            ttl: b[0] & MAX_TTL,
            src: u16_at(1),
            dst: u16_at(3),
            seq: u16_at(5),
            payload: b[MESH_HEADER_LEN..].to_vec(),
        })
    }

    pub fn is_mesh(b: &[u8]) -> bool {
        b.first().is_some_and(|d| d & 0xC0 == MESH_DISPATCH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Duplicate,
    TtlExpired,
    Unreachable,
    NotForwarder,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Duplicate => "duplicate",
            DropReason::TtlExpired => "ttl_expired",
            DropReason::Unreachable => "unreachable",
            DropReason::NotForwarder => "not_forwarder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ForwardAction {
    Deliver(MeshPacket),
    /// Relay with the decremented ttl at the node's next transmit opportunity.
    Relay { next_hop: NodeId, packet: MeshPacket },
    Drop(DropReason),
}

/// Duplicate suppression over the most recent `(src, seq)` pairs.
#[derive(Clone, Debug)]
pub struct Forwarder {
    pub id: NodeId,
    pub may_forward: bool,
    seen: HashSet<(NodeId, NodeId, u16)>,
    order: VecDeque<(NodeId, NodeId, u16)>,
    capacity: usize,
}

impl Forwarder {
    pub fn new(id: NodeId, may_forward: bool) -> Self {
        Self {
            id,
            may_forward,
            seen: HashSet::new(),
            order: VecDeque::new(),
            capacity: 4096,
        }
    }

    fn remember(&mut self, k: (NodeId, NodeId, u16)) -> bool {
        if !self.seen.insert(k) {
            return false;
        }
        self.order.push_back(k);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        true
    }

    /// Marks a locally originated packet as seen.
    pub fn originate(&mut self, p: &MeshPacket) {
        self.remember((p.src, p.dst, p.seq));
    }

    pub fn forward(&mut self, packet: MeshPacket, routes: &RouteTable) -> ForwardAction {
        if !self.remember((packet.src, packet.dst, packet.seq)) {
            return ForwardAction::Drop(DropReason::Duplicate);
        }
        if packet.dst == self.id {
            return ForwardAction::Deliver(packet);
        }
        if !self.may_forward {
            return ForwardAction::Drop(DropReason::NotForwarder);
        }
        if packet.ttl <= 1 {
            return ForwardAction::Drop(DropReason::TtlExpired);
        }
        match routes.next_hop(packet.dst) {
            Some(next_hop) => ForwardAction::Relay {
                next_hop,
                packet: MeshPacket {
                    ttl: packet.ttl - 1,
                    ..packet
                },
            },
            None => ForwardAction::Drop(DropReason::Unreachable),
        }
    }
}

/// A forwarder's advertised adjacency.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStateAd {
    pub origin: NodeId,
    pub version: u32,
    /// Neighbor and quality 0..=255.
    pub neighbors: Vec<(NodeId, u8)>,
}

const LSA_FIXED: usize = 1 + 2 + 4 + 1;
pub const LSA_MAX_NEIGHBORS: usize = (MAX_PAYLOAD_LEN - LSA_FIXED) / 3;

impl LinkStateAd {
    /// Keeps the highest-quality neighbors when the list does not fit.
    pub fn encode(&self) -> Vec<u8> {
        let mut n = self.neighbors.clone();
        n.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        n.truncate(LSA_MAX_NEIGHBORS);
        n.sort_by_key(|x| x.0);
        let mut out = vec![LSA_DISPATCH];
        out.extend_from_slice(&self.origin.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(n.len() as u8);
        for (id, q) in n {
            out.extend_from_slice(&id.to_le_bytes());
            out.push(q);
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, MeshError> {
        if b.len() < LSA_FIXED || b[0] != LSA_DISPATCH || b.len() != LSA_FIXED + 3 * b[7] as usize {
            return Err(MeshError::MalformedLsa);
        }
        let neighbors = (0..b[7] as usize)
            .map(|k| {
                let i = LSA_FIXED + 3 * k;
                (u16::from_le_bytes([b[i], b[i + 1]]), b[i + 2])
            })
            .collect();
        Ok(Self {
            origin: u16::from_le_bytes([b[1], b[2]]),
            version: u32::from_le_bytes(b[3..7].try_into().unwrap()),
            neighbors,
        })
    }
}

/// Latest advertisement per origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkStateDb {
    pub ads: BTreeMap<NodeId, LinkStateAd>,
}

impl LinkStateDb {
    /// Stores `ad` if it is newer than what is held. Returns true if stored.
    pub fn install(&mut self, ad: LinkStateAd) -> bool {
        match self.ads.get(&ad.origin) {
            Some(old) if old.version >= ad.version => false,
            _ => {
                self.ads.insert(ad.origin, ad);
                true
            }
        }
    }

    /// Builds the graph. A forwarder pair is linked only when both list each
    /// other; a non-forwarder is linked to any forwarder that lists it.
    pub fn graph(&self, forwarder: impl Fn(NodeId) -> bool, superframe: u64) -> TopologyGraph {
        let mut g = TopologyGraph::default();
        let mut ids: BTreeSet<NodeId> = self.ads.keys().copied().collect();
        for ad in self.ads.values() {
            ids.extend(ad.neighbors.iter().map(|(n, _)| *n));
        }
        for id in &ids {
            g.add_vertex(*id, forwarder(*id));
        }
        for ad in self.ads.values() {
            g.versions.insert(ad.origin, ad.version);
            for (n, q) in &ad.neighbors {
                let mutual = match self.ads.get(n) {
                    Some(other) => other.neighbors.iter().any(|(m, _)| *m == ad.origin),
                    None => !forwarder(*n),
                };
                if mutual {
                    g.upsert_edge(ad.origin, *n, *q as f64 / 255.0, superframe);
                }
            }
        }
        g
    }
}

/// Link quality 0..=255 from distance: 1 at contact, 0 at radio range.
pub fn link_quality(distance_m: f64, range_m: f64) -> u8 {
    ((1.0 - distance_m / range_m).clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub device: NodeId,
    pub leader: NodeId,
    pub distance_m: f64,
}

/// Leader-side admission of a smart device after its first valid range.
pub fn associate_smart_device(
    device: NodeId,
    leader: NodeId,
    policy: &KeyPolicy,
    measured_distance: Option<f64>,
    rff: Option<RffVerdict>,
) -> Result<Association, DenyReason> {
    match enforce_policy(policy, measured_distance, 0, rff) {
        Decision::Allow => Ok(Association {
            device,
            leader,
            distance_m: measured_distance.unwrap_or(f64::NAN),
        }),
        Decision::Deny(r) => Err(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(forwarders: &[NodeId], others: &[NodeId], edges: &[(NodeId, NodeId)]) -> TopologyGraph {
        let mut g = TopologyGraph::default();
        for f in forwarders {
            g.add_vertex(*f, true);
        }
        for o in others {
            g.add_vertex(*o, false);
        }
        for (a, b) in edges {
            assert!(g.upsert_edge(*a, *b, 1.0, 0));
        }
        g
    }

    #[test]
    fn diamond_picks_lower_id() {
        let g = graph(&[1, 2, 3, 4], &[], &[(1, 2), (2, 4), (1, 3), (3, 4)]);
        let r = compute_routes(&g, 1).unwrap();
        assert_eq!(r.routes[&4].next_hop, 2);
        assert_eq!(r.routes[&4].hops, 2);
    }

    #[test]
    fn quality_beats_id() {
        let mut g = graph(&[1, 2, 3, 4], &[], &[(1, 2), (2, 4), (1, 3), (3, 4)]);
        g.upsert_edge(2, 4, 0.3, 0);
        assert_eq!(compute_routes(&g, 1).unwrap().routes[&4].next_hop, 3);
    }

    #[test]
    fn line_and_partition() {
        let g = graph(&[1, 2, 3, 9], &[], &[(1, 2), (2, 3)]);
        let r = compute_routes(&g, 1).unwrap();
        assert_eq!(r.routes[&3], Route { next_hop: 2, hops: 2, bottleneck: 1.0 });
        assert!(!r.routes.contains_key(&9));
        assert!(!r.routes.contains_key(&1));
        assert_eq!(compute_routes(&g, 77), Err(MeshError::UnknownNode(77)));
    }

    #[test]
    fn leaves_are_never_interior() {
        let g = graph(&[1, 3], &[2], &[(1, 2), (2, 3)]);
        let r = compute_routes(&g, 1).unwrap();
        assert_eq!(r.routes[&2].next_hop, 2);
        assert!(!r.routes.contains_key(&3));
        let from_leaf = compute_routes(&g, 2).unwrap();
        assert_eq!(from_leaf.routes[&3].next_hop, 3);
    }

    #[test]
    fn non_forwarder_pairs_are_refused() {
        let mut g = graph(&[], &[1, 2], &[]);
        assert!(!g.upsert_edge(1, 2, 1.0, 0));
    }

    #[test]
    fn miss_counter_k3() {
        let mut c = MissCounter::default();
        assert_eq!(c.observe(false), LinkEvent::None);
        assert_eq!(c.observe(false), LinkEvent::None);
        assert_eq!(c.observe(true), LinkEvent::None);
        assert_eq!(c.observe(false), LinkEvent::None);
        assert_eq!(c.observe(false), LinkEvent::None);
        assert_eq!(c.observe(false), LinkEvent::Down);
        assert_eq!(c.observe(false), LinkEvent::None);
        assert_eq!(c.observe(true), LinkEvent::Up);
    }

    #[test]
    fn beacon_miss_threshold() {
        let mut g = graph(&[1, 2], &[], &[(1, 2)]);
        assert!(!on_beacon_miss(&mut g, 1, (1, 2), 2));
        assert!(g.edge(1, 2).is_some());
        assert!(on_beacon_miss(&mut g, 1, (1, 2), 3));
        assert!(g.edge(1, 2).is_none());
        assert_eq!(g.versions[&1], 1);
    }

    #[test]
    fn promotion_rules() {
        let c = |id, role, uptime_s| Candidate { id, role, uptime_s };
        assert_eq!(promote_leader(&[c(1, Role::Full, 400.0), c(2, Role::Full, 200.0)]), Ok(1));
        assert_eq!(promote_leader(&[c(9, Role::Full, 5.0), c(7, Role::Full, 5.0)]), Ok(7));
        assert_eq!(
            promote_leader(&[c(3, Role::Half, 900.0), c(4, Role::Leaf, 900.0)]),
            Err(MeshError::NoEligibleCandidate)
        );
    }

    #[test]
    fn forwarding_rules() {
        let g = graph(&[1, 2, 3], &[], &[(1, 2), (2, 3)]);
        let routes = compute_routes(&g, 2).unwrap();
        let mut f = Forwarder::new(2, true);
        let p = MeshPacket::new(1, 2, 1, vec![9]);
        assert!(matches!(f.forward(p.clone(), &routes), ForwardAction::Deliver(_)));
        assert_eq!(f.forward(p, &routes), ForwardAction::Drop(DropReason::Duplicate));
        let mut p = MeshPacket::new(1, 3, 2, vec![]);
        p.ttl = 1;
        assert_eq!(f.forward(p, &routes), ForwardAction::Drop(DropReason::TtlExpired));
        match f.forward(MeshPacket::new(1, 3, 3, vec![]), &routes) {
            ForwardAction::Relay { next_hop, packet } => {
                assert_eq!(next_hop, 3);
                assert_eq!(packet.ttl, DEFAULT_TTL - 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            f.forward(MeshPacket::new(1, 8, 4, vec![]), &routes),
            ForwardAction::Drop(DropReason::Unreachable)
        );
        let mut leaf = Forwarder::new(5, false);
        assert_eq!(
            leaf.forward(MeshPacket::new(1, 3, 1, vec![]), &routes),
            ForwardAction::Drop(DropReason::NotForwarder)
        );
    }

    #[test]
    fn packet_and_lsa_codecs() {
        let p = MeshPacket::new(513, 7, 0xBEEF, vec![1, 2, 3]);
        let b = p.encode().unwrap();
        assert_eq!(b.len(), MESH_HEADER_LEN + 3);
        assert_eq!(MeshPacket::decode(&b).unwrap(), p);
        assert!(MeshPacket {
            ttl: 0,
            ..p.clone()
        }
        .encode()
        .is_err());

        let ad = LinkStateAd {
            origin: 4,
            version: 9,
            neighbors: (0..50).map(|i| (i, (i * 5) as u8)).collect(),
        };
        let back = LinkStateAd::decode(&ad.encode()).unwrap();
        assert_eq!(back.neighbors.len(), LSA_MAX_NEIGHBORS);
        assert!(back.neighbors.iter().all(|(_, q)| *q >= (50 - LSA_MAX_NEIGHBORS as u8) * 5));
        assert!(ad.encode().len() <= MAX_PAYLOAD_LEN);
    }

    #[test]
    fn lsdb_requires_two_way_between_forwarders() {
        let mut db = LinkStateDb::default();
        db.install(LinkStateAd { origin: 1, version: 1, neighbors: vec![(2, 200), (5, 100)] });
        db.install(LinkStateAd { origin: 2, version: 1, neighbors: vec![] });
        let fwd = |id: NodeId| id != 5;
        let g = db.graph(fwd, 0);
        assert!(g.edge(1, 2).is_none());
        assert!(g.edge(1, 5).is_some());
        assert!(!db.install(LinkStateAd { origin: 2, version: 1, neighbors: vec![(1, 200)] }));
        assert!(db.install(LinkStateAd { origin: 2, version: 2, neighbors: vec![(1, 200)] }));
        assert!(db.graph(fwd, 0).edge(1, 2).is_some());
    }

    #[test]
    fn descriptors() {
        for r in [Role::Leader, Role::Full, Role::Half, Role::Leaf, Role::Border, Role::SmartDevice] {
            NodeDescriptor::new(1, r, [0.0; 3]).validate().unwrap();
        }
        let mut d = NodeDescriptor::new(1, Role::Leaf, [0.0; 3]);
        d.capabilities.may_forward = true;
        assert!(d.validate().is_err());
    }

    #[test]
    fn association_bounds() {
        let p = KeyPolicy::default();
        let ok = Some(RffVerdict { accept: true, similarity: 0.99 });
        assert!(associate_smart_device(30, 1, &p, Some(5.0), ok).is_ok());
        assert_eq!(associate_smart_device(30, 1, &p, Some(15.0), ok), Err(DenyReason::Proximity));
    }
}
