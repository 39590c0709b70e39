use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::adaptation::Reassembler;
use crate::engine::{NodeId, SimTime};
use crate::mac::{superframe_of, Grant, LocalClock, SuperframeSchedule};
use crate::mesh::{compute_routes, Forwarder, LinkStateAd, LinkStateDb, MissCounter, Role, RouteTable};
use crate::phy::ImpairmentSignature;
use crate::ranging::{RangeResult, RangingSession};
use crate::security::{KeyPolicy, LinkGuard};

pub const QUEUE_LIMIT: usize = 512;

#[derive(Clone, Debug)]
pub struct Neighbor {
    pub last_heard: SimTime,
    pub counter: MissCounter,
    pub quality: u8,
    /// Liveness judged per granted slot instead of per superframe.
    pub slot_tracked: bool,
}

#[derive(Clone, Debug)]
pub struct Outgoing {
    pub dst: NodeId,
    pub payload: Vec<u8>,
    pub kind: &'static str,
}

#[derive(Clone, Debug)]
pub struct Initiated {
    pub session: RangingSession,
    pub result: Option<RangeResult>,
}

pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub provisioned: Role,
    pub zone_id: u16,
    pub zone: usize,
    pub alive: bool,
    pub clock: LocalClock,
    pub signature: ImpairmentSignature,
    pub uptime0_s: f64,
    pub policy: KeyPolicy,
    pub rogue: bool,
    pub toa_rng: ChaCha8Rng,
    pub payload_rng: ChaCha8Rng,

    pub schedule: SuperframeSchedule,
    pub leader: NodeId,
    /// Zone members this node grants slots to while leading.
    pub roster: Vec<NodeId>,
    pub grants: BTreeMap<u16, NodeId>,
    pub grants_sf: Option<u64>,
    pub grants_list: Vec<NodeId>,
    pub beacon_heard_at: Option<SimTime>,
    pub beacon_miss: MissCounter,
    pub successor: NodeId,
    pub leader_lost: bool,
    pub sf_started_at: SimTime,
    pub current_sf: u64,

    pub neighbors: BTreeMap<NodeId, Neighbor>,
    pub lsdb: LinkStateDb,
    pub lsa_version: u32,
    pub lsa_dirty: bool,
    pub routes: RouteTable,
    pub routes_dirty: bool,
    pub forwarder: Forwarder,
    pub reassembler: Reassembler,
    pub control: VecDeque<Outgoing>,
    pub data: VecDeque<Outgoing>,
    pub mac_seq: u8,
    pub mesh_seq: u16,
    pub tag: u16,

    pub initiated: Option<Initiated>,
    pub responding: BTreeMap<NodeId, RangingSession>,
    pub guards: BTreeMap<NodeId, LinkGuard>,
    pub associated: BTreeMap<NodeId, bool>,
}

impl Node {
    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn forwards(&self) -> bool {
        self.provisioned.may_forward()
    }

    pub fn synchronized(&self, now: SimTime) -> bool {
        self.is_leader() || self.clock.is_synchronized(now)
    }

    /// Grant covering `slot` in the superframe containing `local`.
    pub fn grant_for(&self, slot: u16, local: SimTime) -> Option<Grant> {
        if self.grants_sf != Some(superframe_of(local)) {
            return None;
        }
        self.grants.get(&slot).map(|g| Grant {
            slot,
            grantee: *g,
            leader: self.leader,
        })
    }

    /// Rotation of the roster for superframe `sf` and the slot map it implies.
    pub fn make_grants(&mut self, sf: u64) {
        let mut list = self.roster.clone();
        if !list.is_empty() {
            let k = (sf % list.len() as u64) as usize;
            list.rotate_left(k);
        }
        self.apply_grants(sf, list);
    }

    pub fn apply_grants(&mut self, sf: u64, list: Vec<NodeId>) {
        self.grants.clear();
        if !list.is_empty() {
            for (j, slot) in self.schedule.zone_ranging_slots(self.zone).into_iter().enumerate() {
                self.grants.insert(slot as u16, list[j % list.len()]);
            }
        }
        self.grants_list = list;
        self.grants_sf = Some(sf);
    }

    pub fn own_lsa(&mut self, advertise: &dyn Fn(NodeId) -> bool) -> LinkStateAd {
        self.lsa_version += 1;
        LinkStateAd {
            origin: self.id,
            version: self.lsa_version,
            neighbors: self
                .neighbors
                .iter()
                .filter(|(id, n)| !n.counter.down && advertise(**id))
                .map(|(id, n)| (*id, n.quality))
                .collect(),
        }
    }

    pub fn route_table(&mut self, forwarder: &dyn Fn(NodeId) -> bool) -> &RouteTable {
        if self.routes_dirty {
            let g = self.lsdb.graph(forwarder, self.current_sf);
            self.routes = if g.vertices.contains_key(&self.id) {
                compute_routes(&g, self.id).unwrap_or_default()
            } else {
                RouteTable {
                    source: self.id,
                    routes: BTreeMap::new(),
                }
            };
            self.routes_dirty = false;
        }
        &self.routes
    }

    pub fn enqueue_control(&mut self, o: Outgoing, origin: NodeId) {
        self.control
            .retain(|q| !(q.kind == "lsa" && q.payload.get(1..3) == Some(&origin.to_le_bytes()[..])));
        self.control.push_back(o);
    }

    pub fn enqueue_data(&mut self, o: Outgoing) -> bool {
        if self.data.len() >= QUEUE_LIMIT {
            return false;
        }
        self.data.push_back(o);
        true
    }
}
