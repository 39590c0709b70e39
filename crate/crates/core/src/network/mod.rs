//! Whole-network simulation: every node runs the MAC, ranging, mesh,
//! adaptation and policy layers over one shared radio medium.

pub mod config;
pub mod metrics;
mod node;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::adaptation::{
    compress, decompress, fragment_with_capacity, is_fragment, link_local_from_short, Ipv6Header, ReassemblyOutcome,
    Reassembler, NH_UDP,
};
use crate::engine::{euclidean, Engine, Event, NodeId, SimTime, SPEED_OF_LIGHT_M_PER_NS, SYSTEM_TARGET};
use crate::mac::{
    build_schedule, may_transmit, slot_at, superframe_of, sync_from_beacon, Beacon, LocalClock, SlotKind,
    SuperframeSchedule, BEACON_DISPATCH, DEFAULT_GUARD, NO_SUCCESSOR, SUPERFRAME,
};
use crate::mesh::{
    link_quality, promote_leader, associate_smart_device, Candidate, DropReason, ForwardAction, Forwarder,
    LinkEvent, LinkStateAd, LinkStateDb, MeshPacket, MissCounter, Role, RouteTable, HEARTBEAT_DISPATCH,
    LSA_DISPATCH, MESH_HEADER_LEN,
};
use crate::phy::{
    synthesize_cir, AttackInjector, Frame, ImpairmentSignature, ToaPair, BROADCAST, MAX_PAYLOAD_LEN,
};
use crate::ranging::{InvalidationReason, RangeResult, RangingMessage, RangingSession};
use crate::rng;
use crate::security::{enroll, fingerprint, reidentify, Decision, Registry, RffVerdict};

pub use config::{parse_config, ConfigError, ScenarioConfig};
pub use metrics::Metrics;
use node::{Initiated, Neighbor, Node, Outgoing};

pub const PAN_ID: u16 = 0x5EC0;
const ENROLL_SAMPLES: u64 = 10;
const RFF_SNR_DB: f64 = 20.0;

#[derive(Clone, Debug, Error, PartialEq)]
#[error("runtime invariant violated at {at}: {msg}")]
pub struct RuntimeError {
    pub at: SimTime,
    pub msg: String,
}

#[derive(Clone, Debug)]
enum Ev {
    SfStart(u64),
    Beacon(u64),
    Opp { slot: u16, heartbeat: bool },
    RangeInit { sf: u64 },
    RangeFinal,
    SlotCheck { slot: u16, grantee: NodeId, from: SimTime },
    Send { dst: NodeId, payload: Vec<u8>, kind: &'static str },
    Rogue { slot: u16 },
    Deliver(u64),
    Originate(usize),
    Kill,
    Attack(usize),
}

/// Result of one run. `error` is set when the run stopped on an invariant
/// violation; trace and metrics then cover the run up to that point.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub trace: String,
    pub error: Option<RuntimeError>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    engine: Engine<Ev>,
    nodes: BTreeMap<NodeId, Node>,
    roles: BTreeMap<NodeId, Role>,
    registry: Registry,
    injector: AttackInjector,
    metrics: Metrics,
    sent_at: BTreeMap<(usize, u32), SimTime>,
    flow_counter: Vec<u32>,
    end: SimTime,
    stop_flows: SimTime,
}

fn ms(t: SimTime) -> f64 {
    t.as_ps() as f64 / 1e9
}

fn local_at(sf: u64, schedule: &SuperframeSchedule, slot: usize, offset_us: u64) -> SimTime {
    SUPERFRAME * sf + schedule.slot_start(slot) + SimTime::from_us(offset_us)
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let zone_leaders: BTreeMap<u16, NodeId> = cfg.zone_leaders().into_iter().map(|(z, l)| (z, l[0])).collect();
        let leaders: Vec<NodeId> = zone_leaders.values().copied().collect();
        let schedule = build_schedule(&leaders, cfg.slot_us).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;

        let mut engine = Engine::new(cfg.radio.clone(), cfg.trace);
        let mut nodes = BTreeMap::new();
        let mut roles = BTreeMap::new();
        let mut registry = Registry::default();
        for n in &cfg.nodes {
            engine.medium.add_node(n.id, n.position, 0);
            roles.insert(n.id, n.role);
            let reference = n.drift_ppm.is_none() && matches!(n.role, Role::Leader | Role::Border);
            let drift = n.drift_ppm.unwrap_or_else(|| {
                if reference || cfg.max_drift_ppm == 0.0 {
                    0.0
                } else {
                    rng::stream(cfg.seed, &[rng::purpose::CLOCK, n.id as u64])
                        .random_range(-cfg.max_drift_ppm..=cfg.max_drift_ppm)
                }
            });
            let clock = if n.role == Role::Leader {
                LocalClock {
                    synced: true,
                    ..LocalClock::new(drift)
                }
            } else {
                LocalClock::new(drift)
            };
            let nominal = ImpairmentSignature::from_device_seed(rng::derive(cfg.seed, &[rng::purpose::SIGNATURE, n.id as u64]));
            let signature = if n.spoofed {
                ImpairmentSignature::from_device_seed(rng::derive(cfg.seed, &[rng::purpose::SIGNATURE, n.id as u64, 1]))
            } else {
                nominal
            };
            if n.role == Role::SmartDevice && n.enrolled {
                let embs: Vec<_> = (0..ENROLL_SAMPLES)
                    .map(|k| {
                        let s = rng::derive(cfg.seed, &[rng::purpose::ENROLL, n.id as u64, k]);
                        synthesize_cir(5.0, &nominal, Some(RFF_SNR_DB), s)
                            .ok()
                            .and_then(|c| fingerprint(&c).ok())
                            .unwrap_or_else(crate::security::FingerprintEmbedding::fallback)
                    })
                    .collect();
                if let Ok(r) = enroll(n.id, &embs, SimTime::ZERO) {
                    registry.insert(r);
                }
            }
            let leader = zone_leaders[&n.zone];
            let roster: Vec<NodeId> = if n.role == Role::Leader {
                let mut r: Vec<_> = cfg
                    .nodes
                    .iter()
                    .filter(|m| m.zone == n.zone && m.id != n.id && m.role != Role::Leader)
                    .map(|m| m.id)
                    .collect();
                r.sort_unstable();
                r
            } else {
                Vec::new()
            };
            nodes.insert(
                n.id,
                Node {
                    id: n.id,
                    role: n.role,
                    provisioned: n.role,
                    zone_id: n.zone,
                    zone: schedule.zone_of_leader(leader).unwrap_or(0),
                    alive: true,
                    clock,
                    signature,
                    uptime0_s: n.uptime_s,
                    policy: n.policy.clone().unwrap_or_else(|| cfg.policy.clone()),
                    rogue: n.rogue,
                    toa_rng: rng::stream(cfg.seed, &[rng::purpose::TOA, n.id as u64]),
                    payload_rng: rng::stream(cfg.seed, &[rng::purpose::PAYLOAD, n.id as u64]),
                    schedule: schedule.clone(),
                    leader,
                    roster,
                    grants: BTreeMap::new(),
                    grants_sf: None,
                    grants_list: Vec::new(),
                    beacon_heard_at: None,
                    beacon_miss: MissCounter::default(),
                    successor: NO_SUCCESSOR,
                    leader_lost: false,
                    sf_started_at: SimTime::ZERO,
                    current_sf: 0,
                    neighbors: BTreeMap::new(),
                    lsdb: LinkStateDb::default(),
                    lsa_version: 0,
                    lsa_dirty: false,
                    routes: RouteTable::default(),
                    routes_dirty: true,
                    forwarder: Forwarder::new(n.id, n.role.may_forward()),
                    reassembler: Reassembler::default(),
                    control: Default::default(),
                    data: Default::default(),
                    mac_seq: 0,
                    mesh_seq: 0,
                    tag: 0,
                    initiated: None,
                    responding: BTreeMap::new(),
                    guards: BTreeMap::new(),
                    associated: BTreeMap::new(),
                },
            );
        }

        let end = SimTime::from_secs_f64(cfg.duration_s);
        let drain = SimTime::from_secs_f64((cfg.duration_s / 4.0).min(1.0));
        let injector = AttackInjector::new(cfg.attacks.iter().map(|a| (a.link[0], a.link[1])));
        let metrics = Metrics {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            duration_s: cfg.duration_s,
            flows: cfg
                .flows
                .iter()
                .map(|f| metrics::FlowMetrics {
                    src: f.src,
                    dst: f.dst,
                    ..Default::default()
                })
                .collect(),
            ..Default::default()
        };
        let mut sim = Self {
            flow_counter: vec![0; cfg.flows.len()],
            cfg,
            engine,
            nodes,
            roles,
            registry,
            injector,
            metrics,
            sent_at: BTreeMap::new(),
            end,
            stop_flows: end.saturating_sub(drain),
        };
        sim.bootstrap().map_err(|e| ConfigError::Invalid(vec![e.msg]))?;
        Ok(sim)
    }

    fn bootstrap(&mut self) -> Result<(), RuntimeError> {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            self.at(SimTime::ZERO, id, Ev::SfStart(0))?;
        }
        for (i, f) in self.cfg.flows.clone().iter().enumerate() {
            self.at(SimTime::from_ms(f.start_ms), f.src, Ev::Originate(i))?;
        }
        for (i, f) in self.cfg.failures.clone().iter().enumerate() {
            let _ = i;
            self.at(SimTime::from_secs_f64(f.at_s), f.node, Ev::Kill)?;
        }
        for (i, a) in self.cfg.attacks.clone().iter().enumerate() {
            self.at(SimTime::from_secs_f64(a.start_s), SYSTEM_TARGET, Ev::Attack(i))?;
        }
        Ok(())
    }

    fn err(&self, msg: impl ToString) -> RuntimeError {
        RuntimeError {
            at: self.engine.now(),
            msg: msg.to_string(),
        }
    }

    fn at(&mut self, t: SimTime, target: NodeId, ev: Ev) -> Result<(), RuntimeError> {
        let t = t.max(self.engine.now());
        self.engine
            .schedule(Event::new(t, target, ev))
            .map(|_| ())
            .map_err(|e| self.err(e))
    }

    /// Schedules `ev` for node `id` when its disciplined clock reads `local`.
    fn at_local(&mut self, id: NodeId, local: SimTime, ev: Ev) -> Result<(), RuntimeError> {
        let t = self.nodes[&id].clock.true_time_of(local);
        self.at(t, id, ev)
    }

    pub fn run(mut self) -> RunOutput {
        let mut error = None;
        while let Some(ev) = self.engine.pop_next(self.end) {
            if let Err(e) = self.handle(ev) {
                self.engine.trace(None, "invariant", format_args!("{}", e.msg));
                error = Some(e);
                break;
            }
        }
        self.finish(error)
    }

    fn finish(mut self, error: Option<RuntimeError>) -> RunOutput {
        let stats = self.engine.stats();
        let m = &mut self.metrics;
        m.superframes = self.end.as_ps().div_ceil(SUPERFRAME.as_ps());
        m.events = stats.events_processed;
        m.collisions = stats.collisions;
        m.delivery_ratio = if m.datagrams_sent == 0 {
            0.0
        } else {
            m.datagrams_delivered as f64 / m.datagrams_sent as f64
        };
        RunOutput {
            metrics: self.metrics,
            trace: self.engine.trace.into_string(),
            error,
        }
    }

    fn handle(&mut self, ev: Event<Ev>) -> Result<(), RuntimeError> {
        let id = ev.target;
        match ev.payload {
            Ev::Attack(i) => {
                let a = self.cfg.attacks[i].clone();
                self.injector
                    .inject(a.kind, a.magnitude_ns, (a.link[0], a.link[1]))
                    .map_err(|e| self.err(e))?;
                self.engine.trace(
                    None,
                    "attack",
                    format_args!("kind={:?} link={}-{} magnitude_ns={}", a.kind, a.link[0], a.link[1], a.magnitude_ns),
                );
                return Ok(());
            }
            Ev::Deliver(rid) => return self.on_deliver(rid),
            _ => {}
        }
        if !self.nodes.get(&id).is_some_and(|n| n.alive) {
            return Ok(());
        }
        match ev.payload {
            Ev::Kill => {
                self.nodes.get_mut(&id).unwrap().alive = false;
                self.engine.medium.set_enabled(id, false);
                self.metrics.node_failures += 1;
                self.engine.trace(Some(id), "kill", format_args!(""));
                Ok(())
            }
            Ev::SfStart(sf) => self.on_superframe(id, sf),
            Ev::Beacon(sf) => self.send_beacon(id, sf),
            Ev::Opp { slot, heartbeat } => self.on_opportunity(id, slot, heartbeat),
            Ev::RangeInit { sf } => self.range_init(id, sf),
            Ev::RangeFinal => self.range_final(id),
            Ev::SlotCheck { slot, grantee, from } => {
                self.slot_check(id, slot, grantee, from);
                Ok(())
            }
            Ev::Send { dst, payload, kind } => self.transmit(id, dst, payload, kind, true, true).map(|_| ()),
            Ev::Rogue { slot } => {
                let leader = self.nodes[&id].leader;
                self.engine.trace(Some(id), "rogue_tx", format_args!("slot={slot}"));
                self.transmit(id, leader, vec![HEARTBEAT_DISPATCH], "rogue", false, false).map(|_| ())
            }
            Ev::Originate(i) => self.originate(i),
            Ev::Attack(_) | Ev::Deliver(_) => Ok(()),
        }
    }

    fn forwarder_fn(roles: &BTreeMap<NodeId, Role>) -> impl Fn(NodeId) -> bool + '_ {
        move |id| roles.get(&id).is_some_and(|r| r.may_forward())
    }

    fn on_superframe(&mut self, id: NodeId, sf: u64) -> Result<(), RuntimeError> {
        let now = self.engine.now();
        let node = self.nodes.get_mut(&id).unwrap();
        node.current_sf = sf;
        let prev = node.sf_started_at;
        node.sf_started_at = now;
        let mut downs = Vec::new();
        let mut lost = false;
        if sf > 0 {
            for (nid, nb) in node.neighbors.iter_mut() {
                if nb.slot_tracked || nb.counter.down {
                    continue;
                }
                if nb.counter.observe(nb.last_heard >= prev) == LinkEvent::Down {
                    downs.push(*nid);
                }
            }
            if !node.is_leader() && !node.leader_lost {
                if let Some(h) = node.beacon_heard_at {
                    if node.beacon_miss.observe(h >= prev) == LinkEvent::Down {
                        node.leader_lost = true;
                        lost = true;
                    }
                }
            }
        }
        for nid in downs {
            self.link_down(id, nid);
        }
        if lost {
            let node = &self.nodes[&id];
            let (leader, successor, zone) = (node.leader, node.successor, node.zone_id);
            self.engine.trace(
                Some(id),
                "leader_lost",
                format_args!("leader={leader} successor={}", if successor == NO_SUCCESSOR { "none".to_string() } else { successor.to_string() }),
            );
            if successor == id && node.provisioned.may_lead() {
                self.promote(id, sf);
            } else if successor == NO_SUCCESSOR {
                if !self.metrics.degraded_zones.contains(&zone) {
                    self.metrics.degraded_zones.push(zone);
                }
                self.engine.trace(Some(id), "alarm", format_args!("zone_degraded zone={zone} leader={leader}"));
            }
        }
        if self.nodes[&id].is_leader() {
            self.plan_leader(id, sf)?;
        }
        let node = self.nodes.get_mut(&id).unwrap();
        if node.forwards() && node.lsa_dirty {
            self.emit_lsa(id);
        }
        let node = self.nodes.get_mut(&id).unwrap();
        let expired = node.reassembler.expire(sf);
        self.metrics.reassembly_timeouts += expired.len() as u64;
        self.at_local(id, SUPERFRAME * (sf + 1), Ev::SfStart(sf + 1))
    }

    fn promote(&mut self, id: NodeId, sf: u64) {
        let now = self.engine.now();
        let node = self.nodes.get_mut(&id).unwrap();
        let old = node.leader;
        node.role = Role::Leader;
        node.leader = id;
        node.schedule.reassign(old, id);
        let mut roster: Vec<NodeId> = self
            .cfg
            .nodes
            .iter()
            .filter(|m| m.zone == node.zone_id && m.id != id && m.id != old && m.role != Role::Leader)
            .map(|m| m.id)
            .collect();
        roster.sort_unstable();
        for (nid, nb) in node.neighbors.iter_mut() {
            nb.slot_tracked = roster.contains(nid);
        }
        node.roster = roster;
        node.leader_lost = false;
        node.successor = NO_SUCCESSOR;
        let zone = node.zone_id;
        self.metrics.promotions.push(metrics::PromotionRecord {
            zone,
            failed: old,
            promoted: id,
            superframe: sf,
            at_ms: ms(now),
        });
        self.engine
            .trace(Some(id), "promote", format_args!("zone={zone} failed={old} superframe={sf}"));
    }

    fn plan_leader(&mut self, id: NodeId, sf: u64) -> Result<(), RuntimeError> {
        let node = self.nodes.get_mut(&id).unwrap();
        node.make_grants(sf);
        let z = node.zone;
        let sched = node.schedule.clone();
        let grants: Vec<(u16, NodeId)> = node.grants.iter().map(|(s, g)| (*s, *g)).collect();
        self.at_local(id, local_at(sf, &sched, sched.beacon_slot(z), 50), Ev::Beacon(sf))?;
        let ld = sched.leader_data_slot(z);
        for off in [50, 275, 500, 725] {
            self.at_local(
                id,
                local_at(sf, &sched, ld, off),
                Ev::Opp {
                    slot: ld as u16,
                    heartbeat: false,
                },
            )?;
        }
        let mut ranged = BTreeSet::new();
        for (slot, g) in grants {
            let s = slot as usize;
            if !ranged.insert(g) {
                self.at_local(id, local_at(sf, &sched, s, 275), Ev::Opp { slot, heartbeat: false })?;
            }
            self.at_local(id, local_at(sf, &sched, s, 725), Ev::Opp { slot, heartbeat: false })?;
            let from = self.nodes[&id].clock.true_time_of(local_at(sf, &sched, s, 0));
            self.at_local(id, local_at(sf, &sched, s, 950), Ev::SlotCheck { slot, grantee: g, from })?;
        }
        Ok(())
    }

    fn successor_of(&self, id: NodeId) -> NodeId {
        let node = &self.nodes[&id];
        let now_s = self.engine.now().as_secs_f64();
        let cands: Vec<Candidate> = node
            .roster
            .iter()
            .filter(|m| node.neighbors.get(m).is_some_and(|nb| !nb.counter.down))
            .map(|m| Candidate {
                id: *m,
                role: self.roles[m],
                uptime_s: self.nodes[m].uptime0_s + now_s,
            })
            .collect();
        promote_leader(&cands).unwrap_or(NO_SUCCESSOR)
    }

    fn send_beacon(&mut self, id: NodeId, sf: u64) -> Result<(), RuntimeError> {
        if !self.nodes[&id].is_leader() {
            return Ok(());
        }
        let successor = self.successor_of(id);
        let now = self.engine.now();
        let pos = self.engine.medium.position(id).unwrap_or([0.0; 3]);
        let node = &self.nodes[&id];
        let b = Beacon {
            leader: id,
            seq: sf as u32,
            timestamp: node.clock.disciplined_time(now),
            position: pos,
            successor,
            grants: node.grants_list.clone(),
            neighbors: node
                .neighbors
                .iter()
                .filter(|(_, n)| !n.counter.down)
                .map(|(i, n)| (*i, n.quality))
                .collect(),
        };
        self.engine.trace(
            Some(id),
            "beacon",
            format_args!("seq={sf} grants={} successor={}", b.grants.len(), successor),
        );
        self.transmit(id, BROADCAST, b.encode(), "beacon", false, true).map(|_| ())
    }

    fn plan_member(&mut self, id: NodeId, sf: u64) -> Result<(), RuntimeError> {
        let node = &self.nodes[&id];
        let sched = node.schedule.clone();
        let mine: Vec<u16> = node.grants.iter().filter(|(_, g)| **g == id).map(|(s, _)| *s).collect();
        let rogue_slot = if node.rogue {
            mine.first().and_then(|first| {
                node.grants
                    .iter()
                    .find(|(s, g)| **s > *first && **g != id)
                    .map(|(s, _)| *s)
            })
        } else {
            None
        };
        for (k, slot) in mine.iter().enumerate() {
            let s = *slot as usize;
            if k == 0 {
                self.at_local(id, local_at(sf, &sched, s, 50), Ev::RangeInit { sf })?;
                self.at_local(id, local_at(sf, &sched, s, 500), Ev::RangeFinal)?;
            } else {
                self.at_local(id, local_at(sf, &sched, s, 50), Ev::Opp { slot: *slot, heartbeat: true })?;
                self.at_local(id, local_at(sf, &sched, s, 500), Ev::Opp { slot: *slot, heartbeat: false })?;
            }
        }
        if let Some(slot) = rogue_slot {
            self.at_local(id, local_at(sf, &sched, slot as usize, 400), Ev::Rogue { slot })?;
        }
        Ok(())
    }

    fn sleeping(&self, dst: NodeId, grantee: Option<NodeId>) -> bool {
        self.roles.get(&dst) == Some(&Role::SmartDevice) && grantee != Some(dst)
    }

    fn on_opportunity(&mut self, id: NodeId, slot: u16, heartbeat: bool) -> Result<(), RuntimeError> {
        let node = &self.nodes[&id];
        let grantee = if node.is_leader() { node.grants.get(&slot).copied() } else { None };
        let eligible = |o: &Outgoing| match grantee {
            Some(g) => o.dst == g,
            None => !self.sleeping(o.dst, None),
        };
        let control_idx = node.control.iter().position(eligible);
        let data_idx = if control_idx.is_some() {
            None
        } else {
            node.data.iter().position(eligible)
        };
        let pick_control = control_idx.is_some();
        let node = self.nodes.get_mut(&id).unwrap();
        let out = if let Some(i) = control_idx {
            node.control.remove(i)
        } else if let Some(i) = data_idx {
            node.data.remove(i)
        } else if heartbeat {
            Some(Outgoing {
                dst: BROADCAST,
                payload: vec![HEARTBEAT_DISPATCH],
                kind: "heartbeat",
            })
        } else {
            None
        };
        let Some(out) = out else { return Ok(()) };
        let sent = self.transmit(id, out.dst, out.payload.clone(), out.kind, false, true)?;
        let node = &self.nodes[&id];
        if sent && node.is_leader() && slot as usize == node.schedule.leader_data_slot(node.zone) {
            self.engine
                .trace(Some(id), "ldata", format_args!("slot={slot} kind={} dst={}", out.kind, out.dst));
        }
        if !sent && out.kind != "heartbeat" {
            let node = self.nodes.get_mut(&id).unwrap();
            if pick_control {
                node.control.push_front(out);
            } else {
                node.data.push_front(out);
            }
        }
        Ok(())
    }

    /// Puts a frame on the air now. With `enforce`, the slot rules decide
    /// and a refused frame is counted as deferred.
    fn transmit(
        &mut self,
        id: NodeId,
        dst: NodeId,
        payload: Vec<u8>,
        kind: &'static str,
        sts: bool,
        enforce: bool,
    ) -> Result<bool, RuntimeError> {
        let now = self.engine.now();
        let node = self.nodes.get_mut(&id).unwrap();
        let seq = node.mac_seq;
        node.mac_seq = seq.wrapping_add(1);
        let mut frame = Frame::new(id, dst, PAN_ID, seq, payload).map_err(|e| RuntimeError {
            at: now,
            msg: format!("node {id}: {e}"),
        })?;
        if sts {
            frame = frame.with_sts();
        }
        let bytes = frame.encode();
        if enforce {
            let airtime = self.engine.medium.config().airtime(bytes.len());
            let local = node.clock.disciplined_time(now);
            let (slot, into) = slot_at(&node.schedule, local);
            let grant = node.grant_for(slot.index, local);
            let ok = may_transmit(
                id,
                &slot,
                grant.as_ref(),
                into,
                airtime,
                node.schedule.slot_length,
                DEFAULT_GUARD,
                node.synchronized(now),
            );
            if !ok {
                self.metrics.deferred_transmissions += 1;
                return Ok(false);
            }
        }
        self.engine
            .transmit(id, bytes, now, |_, rid| Ev::Deliver(rid))
            .map_err(|e| RuntimeError {
                at: now,
                msg: e.to_string(),
            })?;
        self.metrics.frames_transmitted += 1;
        Metrics::bump(&mut self.metrics.frames_by_kind, kind);
        Ok(true)
    }

    fn slot_check(&mut self, id: NodeId, _slot: u16, grantee: NodeId, from: SimTime) {
        let node = self.nodes.get_mut(&id).unwrap();
        let Some(nb) = node.neighbors.get_mut(&grantee) else { return };
        if nb.counter.down {
            return;
        }
        if nb.counter.observe(nb.last_heard >= from) == LinkEvent::Down {
            self.link_down(id, grantee);
        }
    }

    fn link_down(&mut self, id: NodeId, nid: NodeId) {
        self.metrics.link_failures += 1;
        self.engine.trace(Some(id), "link_down", format_args!("peer={nid}"));
        let node = self.nodes.get_mut(&id).unwrap();
        node.routes_dirty = true;
        if node.forwards() {
            self.emit_lsa(id);
        }
    }

    fn emit_lsa(&mut self, id: NodeId) {
        let roles = &self.roles;
        let node = self.nodes.get_mut(&id).unwrap();
        let roster = node.roster.clone();
        let ad = node.own_lsa(&|n| roles.get(&n) != Some(&Role::SmartDevice) || roster.contains(&n));
        node.lsdb.install(ad.clone());
        node.lsa_dirty = false;
        node.routes_dirty = true;
        let n = ad.neighbors.len();
        node.enqueue_control(
            Outgoing {
                dst: BROADCAST,
                payload: ad.encode(),
                kind: "lsa",
            },
            id,
        );
        self.engine
            .trace(Some(id), "lsa", format_args!("version={} neighbors={n}", ad.version));
    }

    fn heard(&mut self, id: NodeId, src: NodeId, at: SimTime) {
        let q = link_quality(
            self.engine.medium.distance(id, src).unwrap_or(f64::INFINITY),
            self.engine.medium.config().range_m,
        );
        let node = self.nodes.get_mut(&id).unwrap();
        let tracked = node.is_leader() && node.roster.contains(&src);
        match node.neighbors.get_mut(&src) {
            None => {
                node.neighbors.insert(
                    src,
                    Neighbor {
                        last_heard: at,
                        counter: MissCounter::default(),
                        quality: q,
                        slot_tracked: tracked,
                    },
                );
                node.lsa_dirty = true;
            }
            Some(nb) => {
                nb.last_heard = at;
                if nb.counter.down && nb.counter.observe(true) == LinkEvent::Up {
                    node.lsa_dirty = true;
                    node.routes_dirty = true;
                    self.engine.trace(Some(id), "link_up", format_args!("peer={src}"));
                }
            }
        }
    }

    fn on_deliver(&mut self, rid: u64) -> Result<(), RuntimeError> {
        let Some(rx) = self.engine.medium.take_reception(rid) else {
            return Ok(());
        };
        let me = rx.receiver;
        if !self.nodes.get(&me).is_some_and(|n| n.alive) {
            return Ok(());
        }
        if rx.corrupted {
            self.metrics.frames_corrupted += 1;
            return Ok(());
        }
        let Ok(frame) = Frame::decode(&rx.bytes) else {
            return Ok(());
        };
        let src = frame.src;
        let node = &self.nodes[&me];
        if node.is_leader() && node.roster.contains(&src) {
            let local = node.clock.disciplined_time(rx.start);
            let (slot, _) = slot_at(&node.schedule, local);
            let ok = slot.kind == SlotKind::Ranging
                && node.grants_sf == Some(superframe_of(local))
                && node.grants.get(&slot.index) == Some(&src);
            if !ok {
                self.metrics.slot_violations += 1;
                self.engine.trace(
                    Some(me),
                    "violation",
                    format_args!("src={src} slot={} kind={}", slot.index, slot.kind.as_str()),
                );
                return Ok(());
            }
        }
        self.metrics.frames_received += 1;
        self.heard(me, src, rx.start);
        if frame.dst != me && frame.dst != BROADCAST {
            return Ok(());
        }
        match frame.payload.first().copied() {
            Some(BEACON_DISPATCH) => {
                if let Ok(b) = Beacon::decode(&frame.payload) {
                    self.on_beacon(me, b, rx.start)?;
                }
            }
            Some(_) if RangingMessage::is_ranging(&frame.payload) => {
                if let Ok(m) = RangingMessage::decode(&frame.payload) {
                    self.on_ranging(me, src, m, rx.start)?;
                }
            }
            Some(LSA_DISPATCH) => {
                if let Ok(ad) = LinkStateAd::decode(&frame.payload) {
                    self.on_lsa(me, ad);
                }
            }
            Some(_) if MeshPacket::is_mesh(&frame.payload) => {
                if let Ok(p) = MeshPacket::decode(&frame.payload) {
                    self.on_mesh(me, src, p)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_beacon(&mut self, id: NodeId, b: Beacon, arrival: SimTime) -> Result<(), RuntimeError> {
        let pos = self.engine.medium.position(id).unwrap_or([0.0; 3]);
        let now = self.engine.now();
        let node = self.nodes.get_mut(&id).unwrap();
        if node.is_leader() {
            if node.provisioned != Role::Leader && b.leader != id {
                if let Ok(clock) = sync_from_beacon(&node.clock, &b, arrival, euclidean(pos, b.position)) {
                    node.clock = LocalClock { synced: true, ..clock };
                }
            }
            return Ok(());
        }
        let adopt = b.leader != node.leader && node.successor != NO_SUCCESSOR && b.leader == node.successor;
        if b.leader != node.leader && !adopt {
            return Ok(());
        }
        let Ok(clock) = sync_from_beacon(&node.clock, &b, arrival, euclidean(pos, b.position)) else {
            return Ok(());
        };
        if adopt {
            let old = node.leader;
            node.schedule.reassign(old, b.leader);
            node.leader = b.leader;
            self.engine
                .trace(Some(id), "adopt_leader", format_args!("old={old} new={}", b.leader));
        }
        let node = self.nodes.get_mut(&id).unwrap();
        node.clock = clock;
        node.leader_lost = false;
        node.beacon_miss = MissCounter::default();
        node.beacon_heard_at = Some(now);
        node.successor = b.successor;
        let sf = superframe_of(b.timestamp);
        node.apply_grants(sf, b.grants);
        self.plan_member(id, sf)
    }

    fn measure(&mut self, from: NodeId, to: NodeId, arrival: SimTime) -> Option<ToaPair> {
        let d = self.engine.medium.distance(from, to).ok()?;
        let tx_time = arrival.saturating_sub(crate::engine::propagation_delay(d));
        let shift = self.injector.shift(from, to);
        let sig = self.nodes[&from].signature;
        let model = self.cfg.toa_model.clone();
        let rng = &mut self.nodes.get_mut(&to).unwrap().toa_rng;
        model.measure(tx_time, d, &sig, shift, rng).ok()
    }

    fn abort(&mut self, id: NodeId, peer: NodeId, reason: InvalidationReason) {
        self.metrics.ranging.invalidated += 1;
        if matches!(reason, InvalidationReason::ToaMismatch { .. }) {
            self.metrics.attack_detections += 1;
        }
        self.engine
            .trace(Some(id), "range_abort", format_args!("peer={peer} reason={reason}"));
    }

    fn rff_verdict(&mut self, device: NodeId, leader: NodeId) -> RffVerdict {
        let d = self.engine.medium.distance(device, leader).unwrap_or(1.0);
        let sig = self.nodes[&device].signature;
        let threshold = self.nodes[&device].policy.rff_threshold;
        let seed: u64 = self.nodes.get_mut(&leader).unwrap().toa_rng.random();
        let emb = synthesize_cir(d.max(0.01), &sig, Some(RFF_SNR_DB), seed)
            .ok()
            .and_then(|c| fingerprint(&c).ok());
        match (emb, self.registry.get(device)) {
            (Some(e), Some(rec)) => reidentify(&e, rec, threshold),
            _ => RffVerdict {
                accept: false,
                similarity: 0.0,
            },
        }
    }

    fn on_ranging(&mut self, id: NodeId, src: NodeId, msg: RangingMessage, arrival: SimTime) -> Result<(), RuntimeError> {
        let cfg = self.cfg.ranging.clone();
        match msg {
            RangingMessage::Init { session } => {
                let node = &self.nodes[&id];
                if !node.is_leader() || !node.roster.contains(&src) {
                    return Ok(());
                }
                let Some(pair) = self.measure(src, id, arrival) else { return Ok(()) };
                if self.roles[&src] == Role::SmartDevice {
                    let v = self.rff_verdict(src, id);
                    self.nodes.get_mut(&id).unwrap().guards.entry(src).or_default().rff = Some(v);
                }
                let node = self.nodes.get_mut(&id).unwrap();
                let mut s = RangingSession::new(src, id, session);
                match s.on_init(pair, &node.clock, &cfg) {
                    Ok(resp) => {
                        let RangingMessage::Response { t3, .. } = resp else {
                            return Ok(());
                        };
                        let at = node.clock.true_time_of_raw(t3);
                        node.responding.insert(src, s);
                        self.at(
                            at,
                            id,
                            Ev::Send {
                                dst: src,
                                payload: resp.encode(),
                                kind: "ranging",
                            },
                        )?;
                    }
                    Err(reason) => {
                        node.responding.remove(&src);
                        self.abort(id, src, reason);
                    }
                }
            }
            RangingMessage::Response { session, .. } => {
                let ok = self.nodes[&id]
                    .initiated
                    .as_ref()
                    .is_some_and(|i| i.session.responder == src && i.session.id == session && i.result.is_none());
                if !ok {
                    return Ok(());
                }
                let Some(pair) = self.measure(src, id, arrival) else { return Ok(()) };
                let truth = self.engine.medium.distance(src, id).unwrap_or(f64::NAN);
                let node = self.nodes.get_mut(&id).unwrap();
                let clock = node.clock;
                let init = node.initiated.as_mut().unwrap();
                match init.session.on_response(pair, &msg, &clock, &cfg) {
                    Ok(r) => {
                        init.result = Some(r);
                        self.metrics.ranging.completed += 1;
                        self.metrics.ranging.error_m.push(r.distance_m - truth);
                        self.engine.trace(
                            Some(id),
                            "range",
                            format_args!("peer={src} distance_m={:.4} error_m={:.4}", r.distance_m, r.distance_m - truth),
                        );
                    }
                    Err(reason) => {
                        node.initiated = None;
                        self.abort(id, src, reason);
                    }
                }
            }
            RangingMessage::Final { distance_mm, .. } => {
                let sf = self.nodes[&id].current_sf;
                if !self.nodes[&id].responding.contains_key(&src) {
                    return Ok(());
                }
                let Some(pair) = self.measure(src, id, arrival) else { return Ok(()) };
                let node = self.nodes.get_mut(&id).unwrap();
                let mut s = node.responding.remove(&src).unwrap();
                if let Err(reason) = s.on_final(pair, &cfg) {
                    self.abort(id, src, reason);
                    return Ok(());
                }
                let Some(mm) = distance_mm else { return Ok(()) };
                let d = mm as f64 / 1000.0;
                let guard = node.guards.entry(src).or_default();
                guard.record_range(&RangeResult::from_tof(d / SPEED_OF_LIGHT_M_PER_NS), sf);
                let rff = guard.rff;
                if self.roles[&src] == Role::SmartDevice && !node.associated.contains_key(&src) {
                    let policy = self.nodes[&src].policy.clone();
                    let node = self.nodes.get_mut(&id).unwrap();
                    match associate_smart_device(src, id, &policy, Some(d), rff) {
                        Ok(_) => {
                            node.associated.insert(src, true);
                            self.metrics.associations += 1;
                            self.engine
                                .trace(Some(id), "associate", format_args!("device={src} distance_m={d:.3}"));
                        }
                        Err(r) => {
                            node.associated.insert(src, false);
                            self.metrics.association_rejections += 1;
                            self.engine.trace(
                                Some(id),
                                "associate_reject",
                                format_args!("device={src} reason={}", r.as_str()),
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn range_init(&mut self, id: NodeId, sf: u64) -> Result<(), RuntimeError> {
        let now = self.engine.now();
        let node = self.nodes.get_mut(&id).unwrap();
        if node.leader_lost {
            return Ok(());
        }
        let leader = node.leader;
        let mut s = RangingSession::new(id, leader, (sf & 0xFF) as u8);
        let msg = s.start(node.clock.local_time(now));
        node.initiated = Some(Initiated {
            session: s,
            result: None,
        });
        self.metrics.ranging.started += 1;
        if !self.transmit(id, leader, msg.encode(), "ranging", true, true)? {
            self.nodes.get_mut(&id).unwrap().initiated = None;
        }
        Ok(())
    }

    fn range_final(&mut self, id: NodeId) -> Result<(), RuntimeError> {
        let node = self.nodes.get_mut(&id).unwrap();
        let Some(init) = node.initiated.as_mut() else { return Ok(()) };
        let Some(r) = init.result else { return Ok(()) };
        init.session.complete();
        let msg = RangingMessage::Final {
            session: init.session.id,
            distance_mm: Some((r.distance_m * 1000.0).round().max(0.0) as u32),
        };
        let leader = init.session.responder;
        self.transmit(id, leader, msg.encode(), "ranging", true, true).map(|_| ())
    }

    fn on_lsa(&mut self, id: NodeId, ad: LinkStateAd) {
        if ad.origin == id {
            return;
        }
        let node = self.nodes.get_mut(&id).unwrap();
        if node.lsdb.install(ad.clone()) {
            node.routes_dirty = true;
            if node.forwards() {
                let origin = ad.origin;
                node.enqueue_control(
                    Outgoing {
                        dst: BROADCAST,
                        payload: ad.encode(),
                        kind: "lsa",
                    },
                    origin,
                );
            }
        }
    }

    fn next_hop(&mut self, id: NodeId, dst: NodeId) -> Option<NodeId> {
        let f = Self::forwarder_fn(&self.roles);
        let node = self.nodes.get_mut(&id).unwrap();
        let down: Vec<NodeId> = node.neighbors.iter().filter(|(_, n)| n.counter.down).map(|(i, _)| *i).collect();
        let table = node.route_table(&f);
        let hop = table.next_hop(dst)?;
        (!down.contains(&hop)).then_some(hop)
    }

    fn refresh_routes(&mut self, id: NodeId) -> RouteTable {
        let f = Self::forwarder_fn(&self.roles);
        let node = self.nodes.get_mut(&id).unwrap();
        if node.routes_dirty {
            let down: Vec<NodeId> = node.neighbors.iter().filter(|(_, n)| n.counter.down).map(|(i, _)| *i).collect();
            let mut g = node.lsdb.graph(&f, node.current_sf);
            for d in down {
                g.remove_edge(id, d);
            }
            node.routes = if g.vertices.contains_key(&id) {
                crate::mesh::compute_routes(&g, id).unwrap_or_default()
            } else {
                RouteTable {
                    source: id,
                    routes: BTreeMap::new(),
                }
            };
            node.routes_dirty = false;
        }
        node.routes.clone()
    }

    fn on_mesh(&mut self, id: NodeId, mac_src: NodeId, p: MeshPacket) -> Result<(), RuntimeError> {
        let node = &self.nodes[&id];
        if node.is_leader() && self.roles.get(&mac_src) == Some(&Role::SmartDevice) && node.roster.contains(&mac_src) {
            let sf = node.current_sf;
            let policy = self.nodes[&mac_src].policy.clone();
            let node = self.nodes.get_mut(&id).unwrap();
            let decision = node.guards.entry(mac_src).or_default().admit(&policy, sf);
            if let Decision::Deny(r) = decision {
                Metrics::bump(&mut self.metrics.policy_denials, r.as_str());
                self.engine.trace(
                    Some(id),
                    "policy_deny",
                    format_args!("device={mac_src} reason={}", r.as_str()),
                );
                return Ok(());
            }
        }
        let routes = self.refresh_routes(id);
        let (src, dst, seq) = (p.src, p.dst, p.seq);
        let node = self.nodes.get_mut(&id).unwrap();
        match node.forwarder.forward(p, &routes) {
            ForwardAction::Deliver(p) => self.deliver(id, p),
            ForwardAction::Relay { next_hop, packet } => {
                let payload = packet.encode().map_err(|e| self.err(e))?;
                let queued = self.nodes.get_mut(&id).unwrap().enqueue_data(Outgoing {
                    dst: next_hop,
                    payload,
                    kind: "mesh",
                });
                if queued {
                    self.engine.trace(
                        Some(id),
                        "fwd",
                        format_args!("origin={src} final={dst} seq={seq} next={next_hop}"),
                    );
                } else {
                    self.drop_packet(id, src, dst, seq, "queue_full");
                }
                Ok(())
            }
            ForwardAction::Drop(r) => {
                if r == DropReason::Duplicate {
                    self.metrics.routing_loops += 1;
                }
                self.drop_packet(id, src, dst, seq, r.as_str());
                Ok(())
            }
        }
    }

    fn drop_packet(&mut self, id: NodeId, src: NodeId, dst: NodeId, seq: u16, reason: &str) {
        Metrics::bump(&mut self.metrics.drops, reason);
        self.engine.trace(
            Some(id),
            "drop",
            format_args!("origin={src} final={dst} seq={seq} reason={reason}"),
        );
    }

    fn deliver(&mut self, id: NodeId, p: MeshPacket) -> Result<(), RuntimeError> {
        self.engine.trace(
            Some(id),
            "rx",
            format_args!("origin={} final={} seq={}", p.src, p.dst, p.seq),
        );
        let datagram = if is_fragment(&p.payload) {
            let node = self.nodes.get_mut(&id).unwrap();
            let sf = node.current_sf;
            match node.reassembler.insert(p.src, &p.payload, sf) {
                Ok(ReassemblyOutcome::Complete(d)) => d,
                Ok(_) => return Ok(()),
                Err(e) => {
                    self.engine.trace(Some(id), "reassembly_error", format_args!("origin={} {e}", p.src));
                    return Ok(());
                }
            }
        } else {
            p.payload
        };
        let Ok((h, used)) = decompress(&datagram, p.src, id, 0) else {
            return Ok(());
        };
        if h.src != link_local_from_short(p.src) || h.dst != link_local_from_short(id) {
            return Ok(());
        }
        let body = &datagram[used..];
        if body.len() < config::FLOW_TAG_LEN {
            return Ok(());
        }
        let flow = u16::from_le_bytes([body[0], body[1]]) as usize;
        let num = u32::from_le_bytes(body[2..6].try_into().unwrap());
        let now = self.engine.now();
        if let Some(sent) = self.sent_at.remove(&(flow, num)) {
            self.metrics.datagrams_delivered += 1;
            self.metrics.flows[flow].delivered += 1;
            self.metrics.latency_ms.push(ms(now - sent));
            self.engine.trace(
                Some(id),
                "deliver",
                format_args!("flow={flow} n={num} origin={} bytes={}", p.src, datagram.len()),
            );
        }
        Ok(())
    }

    fn originate(&mut self, i: usize) -> Result<(), RuntimeError> {
        let f = self.cfg.flows[i].clone();
        let now = self.engine.now();
        let num = self.flow_counter[i];
        self.flow_counter[i] += 1;
        let node = self.nodes.get_mut(&f.src).unwrap();
        let mut body = Vec::with_capacity(f.size_bytes);
        body.extend_from_slice(&(i as u16).to_le_bytes());
        body.extend_from_slice(&num.to_le_bytes());
        while body.len() < f.size_bytes {
            body.push(node.payload_rng.random());
        }
        let h = Ipv6Header {
            traffic_class: 0,
            flow_label: 0,
            payload_length: f.size_bytes as u16,
            next_header: NH_UDP,
            hop_limit: 64,
            src: link_local_from_short(f.src),
            dst: link_local_from_short(f.dst),
        };
        let mut datagram = compress(&h, f.src, f.dst).0;
        datagram.extend_from_slice(&body);
        let tag = node.tag;
        node.tag = node.tag.wrapping_add(1);
        let frags = fragment_with_capacity(&datagram, tag, MAX_PAYLOAD_LEN - MESH_HEADER_LEN).map_err(|e| self.err(e))?;
        self.metrics.datagrams_sent += 1;
        self.metrics.flows[i].sent += 1;
        self.sent_at.insert((i, num), now);
        self.engine.trace(
            Some(f.src),
            "orig",
            format_args!("flow={i} n={num} final={} bytes={} fragments={}", f.dst, datagram.len(), frags.len()),
        );
        self.refresh_routes(f.src);
        let hop = if self.roles[&f.src] == Role::SmartDevice {
            Some(self.nodes[&f.src].leader)
        } else {
            self.next_hop(f.src, f.dst)
        };
        for frag in frags {
            let node = self.nodes.get_mut(&f.src).unwrap();
            let seq = node.mesh_seq;
            node.mesh_seq = seq.wrapping_add(1);
            let p = MeshPacket::new(f.src, f.dst, seq, frag);
            node.forwarder.originate(&p);
            let Some(nh) = hop else {
                self.drop_packet(f.src, f.src, f.dst, seq, DropReason::Unreachable.as_str());
                continue;
            };
            let payload = p.encode().map_err(|e| self.err(e))?;
            let node = self.nodes.get_mut(&f.src).unwrap();
            if node.enqueue_data(Outgoing {
                dst: nh,
                payload,
                kind: "mesh",
            }) {
                self.engine.trace(
                    Some(f.src),
                    "fwd",
                    format_args!("origin={} final={} seq={seq} next={nh}", f.src, f.dst),
                );
            } else {
                self.drop_packet(f.src, f.src, f.dst, seq, "queue_full");
            }
        }
        let next = now + SimTime::from_ms(f.period_ms);
        if next <= self.stop_flows {
            self.at(next, f.src, Ev::Originate(i))?;
        }
        Ok(())
    }
}

/// Runs a validated scenario to completion.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<RunOutput, ConfigError> {
    Ok(Simulation::new(cfg)?.run())
}

/// The superframe layout a scenario would use.
pub fn schedule_for(cfg: &ScenarioConfig) -> Result<SuperframeSchedule, ConfigError> {
    cfg.validate()?;
    let leaders: Vec<NodeId> = cfg.zone_leaders().values().map(|l| l[0]).collect();
    build_schedule(&leaders, cfg.slot_us).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond(duration_s: f64) -> ScenarioConfig {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/diamond.json")).unwrap();
        let mut cfg = parse_config(&text).unwrap();
        cfg.duration_s = duration_s;
        cfg
    }

    #[test]
    fn same_seed_same_run() {
        let a = run_scenario(diamond(1.0)).unwrap();
        let b = run_scenario(diamond(1.0)).unwrap();
        assert!(a.error.is_none());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.metrics.to_json(), b.metrics.to_json());
    }

    #[test]
    fn seed_changes_the_run() {
        let mut cfg = diamond(1.0);
        cfg.seed += 1;
        assert_ne!(run_scenario(diamond(1.0)).unwrap().trace, run_scenario(cfg).unwrap().trace);
    }

    #[test]
    fn short_run_delivers() {
        let out = run_scenario(diamond(3.5)).unwrap();
        assert_eq!(out.metrics.superframes, 35);
        assert!(out.metrics.datagrams_sent > 0);
        assert!(out.metrics.delivery_ratio > 0.9, "{}", out.metrics.delivery_ratio);
        assert!(out.trace.lines().any(|l| l.split('\t').nth(2) == Some("beacon")));
    }

    #[test]
    fn oversized_send_stops_the_run() {
        let mut sim = Simulation::new(diamond(1.0)).unwrap();
        sim.at(
            SimTime::from_ms(250),
            2,
            Ev::Send {
                dst: 1,
                payload: vec![0; 200],
                kind: "data",
            },
        )
        .unwrap();
        let out = sim.run();
        let e = out.error.expect("runtime error");
        assert_eq!(e.at, SimTime::from_ms(250));
        assert!(out.trace.lines().last().unwrap().contains("\tinvariant\t"));
        assert!(out.metrics.events > 0);
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let mut cfg = diamond(1.0);
        cfg.nodes[1].id = cfg.nodes[0].id;
        assert!(matches!(Simulation::new(cfg), Err(ConfigError::Invalid(_))));
    }
}
