//! Deterministic discrete-event kernel and the shared radio medium.
//!
//! Time is kept in integer picoseconds. Events that fire at the same instant
//! are ordered by target node id and then by insertion sequence, so a run is
//! a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::MAX_FRAME_LEN;

/// Short address of a node. `0xFFFF` is reserved for broadcast.
pub type NodeId = u16;

/// Target id used for kernel-level events that do not belong to a node.
pub const SYSTEM_TARGET: NodeId = u16::MAX;

/// Speed of light in metres per nanosecond.
pub const SPEED_OF_LIGHT_M_PER_NS: f64 = 0.299_792_458;

pub const PS_PER_NS: u64 = 1_000;
pub const PS_PER_US: u64 = 1_000_000;
pub const PS_PER_MS: u64 = 1_000_000_000;
pub const PS_PER_S: u64 = 1_000_000_000_000;

/// Picoseconds since simulation start. Also used for durations.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }
    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns * PS_PER_NS)
    }
    pub const fn from_us(us: u64) -> Self {
        SimTime(us * PS_PER_US)
    }
    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * PS_PER_MS)
    }
    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * PS_PER_S)
    }
    /// Rounds to the nearest picosecond; negative inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * PS_PER_S as f64).round().max(0.0) as u64)
    }
    pub fn from_ns_f64(ns: f64) -> Self {
        SimTime((ns * PS_PER_NS as f64).round().max(0.0) as u64)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }
    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / PS_PER_NS as f64
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_S as f64
    }

    pub fn checked_sub(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_sub(rhs.0).map(SimTime)
    }
    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
    /// Signed difference `self - rhs` in picoseconds.
    pub fn signed_diff(self, rhs: SimTime) -> i64 {
        self.0 as i64 - rhs.0 as i64
    }
    /// Shift by a signed picosecond offset, clamping at zero.
    pub fn offset_by(self, ps: i64) -> SimTime {
        SimTime((self.0 as i64 + ps).max(0) as u64)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event at {requested} ps is in the past (now {now} ps)")]
    EventInPast { now: SimTime, requested: SimTime },
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("node {0} has no position on the medium")]
    UnknownNode(NodeId),
}

/// A scheduled occurrence addressed to one node.
#[derive(Clone, Debug, PartialEq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub target: NodeId,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn new(fire_time: SimTime, target: NodeId, payload: P) -> Self {
        Self {
            fire_time,
            target,
            payload,
        }
    }
}

/// Handle returned by [`Engine::schedule`], usable for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Queued<P> {
    time: SimTime,
    target: NodeId,
    seq: u64,
    payload: P,
}

impl<P> Queued<P> {
    fn key(&self) -> (SimTime, NodeId, u64) {
        (self.time, self.target, self.seq)
    }
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; invert so the earliest key pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Per-node radio counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounts {
    pub transmitted: u64,
    pub received: u64,
    pub collided: u64,
}

/// Summary returned by [`Engine::run_until`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub events_processed: u64,
    pub collisions: u64,
    pub frames: BTreeMap<NodeId, FrameCounts>,
}

/// Radio parameters shared by every node on the medium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    /// Maximum distance at which a frame is received, metres.
    pub range_m: f64,
    pub datarate_bps: f64,
    pub preamble_us: u64,
    /// When true, transmissions on other zone channels still corrupt receptions.
    pub inter_zone_interference: bool,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            range_m: 25.0,
            datarate_bps: 6.8e6,
            preamble_us: 64,
            inter_zone_interference: false,
        }
    }
}

impl RadioConfig {
    /// Preamble time plus payload bits at the configured datarate.
    pub fn airtime(&self, frame_len: usize) -> SimTime {
        let bits = (frame_len * 8) as f64;
        let payload_ps = (bits / self.datarate_bps * PS_PER_S as f64).round() as u64;
        SimTime::from_us(self.preamble_us) + SimTime(payload_ps)
    }
}

pub type ReceptionId = u64;

/// One frame as seen by one receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct Reception {
    pub id: ReceptionId,
    pub transmitter: NodeId,
    pub receiver: NodeId,
    /// Arrival of the first path at the receiver.
    pub start: SimTime,
    pub end: SimTime,
    pub corrupted: bool,
    pub bytes: Vec<u8>,
    /// Interfering receptions are tracked for collision detection only.
    deliverable: bool,
}

#[derive(Clone, Debug)]
struct RadioNode {
    position: [f64; 3],
    channel: u8,
    enabled: bool,
}

/// Delivery produced by a transmission, to be scheduled by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduledDelivery {
    pub receiver: NodeId,
    pub reception: ReceptionId,
    pub deliver_at: SimTime,
}

/// Shared broadcast medium: propagation, airtime and binary collisions.
#[derive(Clone, Debug)]
pub struct RadioMedium {
    config: RadioConfig,
    nodes: BTreeMap<NodeId, RadioNode>,
    receptions: HashMap<ReceptionId, Reception>,
    in_flight: BTreeMap<NodeId, Vec<ReceptionId>>,
    counts: BTreeMap<NodeId, FrameCounts>,
    collisions: u64,
    next_id: ReceptionId,
}

impl RadioMedium {
    pub fn new(config: RadioConfig) -> Self {
        Self {
            config,
            nodes: BTreeMap::new(),
            receptions: HashMap::new(),
            in_flight: BTreeMap::new(),
            counts: BTreeMap::new(),
            collisions: 0,
            next_id: 0,
        }
    }

    pub fn config(&self) -> &RadioConfig {
        &self.config
    }

    pub fn add_node(&mut self, id: NodeId, position: [f64; 3], channel: u8) {
        self.nodes.insert(
            id,
            RadioNode {
                position,
                channel,
                enabled: true,
            },
        );
        self.counts.entry(id).or_default();
    }

    /// A disabled node neither transmits nor receives.
    pub fn set_enabled(&mut self, id: NodeId, enabled: bool) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.enabled = enabled;
        }
    }

    pub fn is_enabled(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.enabled)
    }

    pub fn position(&self, id: NodeId) -> Option<[f64; 3]> {
        self.nodes.get(&id).map(|n| n.position)
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<f64, EngineError> {
        let pa = self.position(a).ok_or(EngineError::UnknownNode(a))?;
        let pb = self.position(b).ok_or(EngineError::UnknownNode(b))?;
        Ok(euclidean(pa, pb))
    }

    /// Propagation delay rounded to the nearest picosecond.
    pub fn propagation_delay(&self, a: NodeId, b: NodeId) -> Result<SimTime, EngineError> {
        Ok(propagation_delay(self.distance(a, b)?))
    }

    /// Node ids that would receive a transmission from `sender`.
    pub fn receivers_in_range(&self, sender: NodeId) -> Vec<NodeId> {
        let Some(tx) = self.nodes.get(&sender) else {
            return Vec::new();
        };
        self.nodes
            .iter()
            .filter(|(id, n)| {
                **id != sender
                    && n.enabled
                    && n.channel == tx.channel
                    && euclidean(tx.position, n.position) <= self.config.range_m
            })
            .map(|(id, _)| *id)
            .collect()
    }

    /// Puts `bytes` on the air at `t_start`. Returns one delivery per
    /// in-range receiver on the sender's channel; overlapping receptions
    /// at a receiver mark every frame involved as corrupted.
    pub fn transmit(
        &mut self,
        sender: NodeId,
        bytes: Vec<u8>,
        t_start: SimTime,
    ) -> Result<Vec<ScheduledDelivery>, EngineError> {
        if bytes.len() > MAX_FRAME_LEN {
            return Err(EngineError::FrameTooLarge(bytes.len()));
        }
        let tx = self
            .nodes
            .get(&sender)
            .cloned()
            .ok_or(EngineError::UnknownNode(sender))?;
        if !tx.enabled {
            return Ok(Vec::new());
        }
        let airtime = self.config.airtime(bytes.len());
        self.counts.entry(sender).or_default().transmitted += 1;

        let targets: Vec<(NodeId, bool, SimTime)> = self
            .nodes
            .iter()
            .filter(|(id, n)| **id != sender && n.enabled)
            .filter_map(|(id, n)| {
                let d = euclidean(tx.position, n.position);
                if d > self.config.range_m {
                    return None;
                }
                let same = n.channel == tx.channel;
                if !same && !self.config.inter_zone_interference {
                    return None;
                }
                Some((*id, same, propagation_delay(d)))
            })
            .collect();

        let mut deliveries = Vec::new();
        for (rx, deliverable, delay) in targets {
            let start = t_start + delay;
            let end = start + airtime;
            let id = self.next_id;
            self.next_id += 1;

            let active = self.in_flight.entry(rx).or_default();
            let receptions = &mut self.receptions;
            // Anything that ended well before this arrival can no longer overlap.
            let horizon = start.saturating_sub(SimTime::from_us(1));
            active.retain(|rid| match receptions.get(rid) {
                Some(r) if r.end > horizon => true,
                Some(r) => {
                    if !r.deliverable {
                        receptions.remove(rid);
                    }
                    false
                }
                None => false,
            });
            let mut corrupted = false;
            for rid in active.iter() {
                if let Some(other) = receptions.get_mut(rid) {
                    if start < other.end && other.start < end {
                        if !other.corrupted {
                            self.counts.entry(rx).or_default().collided += 1;
                        }
                        other.corrupted = true;
                        corrupted = true;
                    }
                }
            }
            if corrupted {
                self.collisions += 1;
                self.counts.entry(rx).or_default().collided += 1;
            }
            active.push(id);
            self.receptions.insert(
                id,
                Reception {
                    id,
                    transmitter: sender,
                    receiver: rx,
                    start,
                    end,
                    corrupted,
                    bytes: if deliverable { bytes.clone() } else { Vec::new() },
                    deliverable,
                },
            );
            if deliverable {
                deliveries.push(ScheduledDelivery {
                    receiver: rx,
                    reception: id,
                    deliver_at: end,
                });
            }
        }
        Ok(deliveries)
    }

    /// Removes a completed reception. Corrupted frames are returned with
    /// `corrupted = true`; the caller decides whether to discard them.
    pub fn take_reception(&mut self, id: ReceptionId) -> Option<Reception> {
        let r = self.receptions.get(&id)?;
        if !r.deliverable {
            return None;
        }
        let r = self.receptions.remove(&id)?;
        if let Some(active) = self.in_flight.get_mut(&r.receiver) {
            // Keep a tombstone copy for overlap checks until the list is pruned.
            if active.contains(&id) {
                self.receptions.insert(
                    id,
                    Reception {
                        bytes: Vec::new(),
                        deliverable: false,
                        ..r.clone()
                    },
                );
            }
        }
        if !r.corrupted && self.is_enabled(r.receiver) {
            self.counts.entry(r.receiver).or_default().received += 1;
        }
        Some(r)
    }

    pub fn collisions(&self) -> u64 {
        self.collisions
    }

    pub fn counts(&self) -> &BTreeMap<NodeId, FrameCounts> {
        &self.counts
    }
}

pub fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance over the speed of light, rounded to whole picoseconds.
pub fn propagation_delay(distance_m: f64) -> SimTime {
    SimTime::from_ns_f64(distance_m / SPEED_OF_LIGHT_M_PER_NS)
}

/// Append-only event trace. One record per line:
/// `time_ps<TAB>node<TAB>kind<TAB>details`, with `-` as node for kernel records.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    enabled: bool,
    buf: String,
    records: u64,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            buf: String::new(),
            records: 0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, time: SimTime, node: Option<NodeId>, kind: &str, details: fmt::Arguments<'_>) {
        if !self.enabled {
            return;
        }
        use std::fmt::Write;
        self.records += 1;
        match node {
            Some(n) => {
                let _ = write!(self.buf, "{}\t{}\t{}\t", time.0, n, kind);
            }
            None => {
                let _ = write!(self.buf, "{}\t-\t{}\t", time.0, kind);
            }
        }
        let _ = self.buf.write_fmt(details);
        self.buf.push('\n');
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

/// Parsed form of one trace line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord<'a> {
    pub time: SimTime,
    pub node: Option<NodeId>,
    pub kind: &'a str,
    pub details: &'a str,
}

impl<'a> TraceRecord<'a> {
    pub fn parse(line: &'a str) -> Option<Self> {
        let mut it = line.splitn(4, '\t');
        let time = SimTime(it.next()?.parse().ok()?);
        let node = match it.next()? {
            "-" => None,
            n => Some(n.parse().ok()?),
        };
        let kind = it.next()?;
        let details = it.next().unwrap_or("");
        Some(Self {
            time,
            node,
            kind,
            details,
        })
    }
}

/// The kernel: event queue, clock, medium and trace.
pub struct Engine<P> {
    now: SimTime,
    queue: BinaryHeap<Queued<P>>,
    cancelled: HashSet<u64>,
    next_seq: u64,
    events_processed: u64,
    pub medium: RadioMedium,
    pub trace: Trace,
}

impl<P> Engine<P> {
    pub fn new(radio: RadioConfig, trace: bool) -> Self {
        Self {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            next_seq: 0,
            events_processed: 0,
            medium: RadioMedium::new(radio),
            trace: Trace::new(trace),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, event: Event<P>) -> Result<EventHandle, EngineError> {
        if event.fire_time < self.now {
            return Err(EngineError::EventInPast {
                now: self.now,
                requested: event.fire_time,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued {
            time: event.fire_time,
            target: event.target,
            seq,
            payload: event.payload,
        });
        Ok(EventHandle(seq))
    }

    pub fn schedule_at(
        &mut self,
        fire_time: SimTime,
        target: NodeId,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        self.schedule(Event::new(fire_time, target, payload))
    }

    /// Returns false if the event already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.queue.iter().any(|q| q.seq == handle.0) {
            self.cancelled.insert(handle.0)
        } else {
            false
        }
    }

    /// Pops the next live event with `fire_time <= t_end`, advancing the clock.
    pub fn pop_next(&mut self, t_end: SimTime) -> Option<Event<P>> {
        loop {
            let head = self.queue.peek()?;
            if head.time > t_end {
                return None;
            }
            let q = self.queue.pop()?;
            if self.cancelled.remove(&q.seq) {
                continue;
            }
            debug_assert!(q.time >= self.now);
            self.now = q.time;
            self.events_processed += 1;
            return Some(Event {
                fire_time: q.time,
                target: q.target,
                payload: q.payload,
            });
        }
    }

    /// Processes every event due by `t_end` in deterministic order. The clock
    /// ends at `t_end` even if the queue drains early.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Engine<P>, Event<P>),
    {
        while let Some(ev) = self.pop_next(t_end) {
            handler(self, ev);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        self.stats()
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            events_processed: self.events_processed,
            collisions: self.medium.collisions(),
            frames: self.medium.counts().clone(),
        }
    }

    /// Transmits on the medium and schedules one event per receiver,
    /// built by `make` from `(receiver, reception id)`.
    pub fn transmit<F>(
        &mut self,
        sender: NodeId,
        bytes: Vec<u8>,
        t_start: SimTime,
        mut make: F,
    ) -> Result<usize, EngineError>
    where
        F: FnMut(NodeId, ReceptionId) -> P,
    {
        if t_start < self.now {
            return Err(EngineError::EventInPast {
                now: self.now,
                requested: t_start,
            });
        }
        let deliveries = self.medium.transmit(sender, bytes, t_start)?;
        let n = deliveries.len();
        for d in deliveries {
            self.schedule_at(d.deliver_at, d.receiver, make(d.receiver, d.reception))?;
        }
        Ok(n)
    }

    pub fn trace(&mut self, node: Option<NodeId>, kind: &str, details: fmt::Arguments<'_>) {
        let now = self.now;
        self.trace.record(now, node, kind, details);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine<u32> {
        Engine::new(RadioConfig::default(), true)
    }

    #[test]
    fn schedule_at_now_fires_first() {
        let mut e = engine();
        e.schedule_at(SimTime::from_ns(5), 1, 2).unwrap();
        e.schedule_at(SimTime::ZERO, 1, 1).unwrap();
        let mut seen = Vec::new();
        e.run_until(SimTime::from_us(1), |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec![1, 2]);
    }

    #[test]
    fn equal_times_order_by_target_then_insertion() {
        let mut e = engine();
        let t = SimTime::from_ns(10);
        e.schedule_at(t, 5, 50).unwrap();
        e.schedule_at(t, 2, 20).unwrap();
        e.schedule_at(t, 2, 21).unwrap();
        let mut seen = Vec::new();
        e.run_until(t, |_, ev| seen.push((ev.target, ev.payload)));
        assert_eq!(seen, vec![(2, 20), (2, 21), (5, 50)]);
    }

    #[test]
    fn rejects_events_in_the_past() {
        let mut e = engine();
        e.schedule_at(SimTime::from_ns(10), 0, 0).unwrap();
        e.run_until(SimTime::from_ns(10), |_, _| {});
        let err = e.schedule_at(SimTime::from_ps(9_999), 0, 0).unwrap_err();
        assert!(matches!(err, EngineError::EventInPast { .. }));
    }

    #[test]
    fn empty_queue_processes_nothing() {
        let mut e = engine();
        let stats = e.run_until(SimTime::from_secs(1), |_, _| unreachable!());
        assert_eq!(stats.events_processed, 0);
        assert_eq!(e.now(), SimTime::from_secs(1));
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut e = engine();
        let h = e.schedule_at(SimTime::from_ns(1), 0, 7).unwrap();
        e.schedule_at(SimTime::from_ns(2), 0, 8).unwrap();
        assert!(e.cancel(h));
        assert!(!e.cancel(h));
        let mut seen = Vec::new();
        e.run_until(SimTime::from_ns(5), |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec![8]);
    }

    #[test]
    fn light_crosses_2_99792458_m_in_10_ns() {
        let mut m = RadioMedium::new(RadioConfig::default());
        m.add_node(1, [0.0, 0.0, 0.0], 0);
        m.add_node(2, [2.997_924_58, 0.0, 0.0], 0);
        assert_eq!(m.propagation_delay(1, 2).unwrap(), SimTime::from_ns(10));
        assert_eq!(m.propagation_delay(2, 1).unwrap(), SimTime::from_ns(10));
    }

    #[test]
    fn overlapping_senders_corrupt_both_frames() {
        let mut m = RadioMedium::new(RadioConfig::default());
        m.add_node(1, [0.0, 0.0, 0.0], 0);
        m.add_node(2, [10.0, 0.0, 0.0], 0);
        m.add_node(3, [5.0, 5.0, 0.0], 0);
        let a = m.transmit(1, vec![0; 20], SimTime::ZERO).unwrap();
        let b = m.transmit(2, vec![0; 20], SimTime::from_us(10)).unwrap();
        let at3: Vec<_> = a.iter().chain(b.iter()).filter(|d| d.receiver == 3).collect();
        assert_eq!(at3.len(), 2);
        for d in at3 {
            assert!(m.take_reception(d.reception).unwrap().corrupted);
        }
        assert_eq!(m.collisions(), 1);
        assert_eq!(m.counts()[&3].collided, 2);
    }

    #[test]
    fn disjoint_transmissions_do_not_collide() {
        let mut m = RadioMedium::new(RadioConfig::default());
        m.add_node(1, [0.0, 0.0, 0.0], 0);
        m.add_node(2, [3.0, 0.0, 0.0], 0);
        let air = m.config().airtime(20);
        let a = m.transmit(1, vec![0; 20], SimTime::ZERO).unwrap();
        let b = m.transmit(1, vec![0; 20], air + SimTime::from_us(5)).unwrap();
        assert!(!m.take_reception(a[0].reception).unwrap().corrupted);
        assert!(!m.take_reception(b[0].reception).unwrap().corrupted);
        assert_eq!(m.collisions(), 0);
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut m = RadioMedium::new(RadioConfig::default());
        m.add_node(1, [0.0; 3], 0);
        assert_eq!(
            m.transmit(1, vec![0; 128], SimTime::ZERO),
            Err(EngineError::FrameTooLarge(128))
        );
        assert!(m.transmit(1, vec![0; 127], SimTime::ZERO).is_ok());
    }

    #[test]
    fn other_channels_are_silent_without_interference() {
        let mut m = RadioMedium::new(RadioConfig::default());
        m.add_node(1, [0.0; 3], 0);
        m.add_node(2, [1.0, 0.0, 0.0], 1);
        assert!(m.transmit(1, vec![1; 10], SimTime::ZERO).unwrap().is_empty());
    }

    #[test]
    fn cross_channel_interference_is_switchable() {
        let cfg = RadioConfig {
            inter_zone_interference: true,
            ..RadioConfig::default()
        };
        let mut m = RadioMedium::new(cfg);
        m.add_node(1, [0.0; 3], 0);
        m.add_node(2, [1.0, 0.0, 0.0], 1);
        m.add_node(3, [2.0, 0.0, 0.0], 0);
        let d = m.transmit(3, vec![1; 10], SimTime::ZERO).unwrap();
        m.transmit(2, vec![1; 10], SimTime::from_us(1)).unwrap();
        let to1 = d.iter().find(|d| d.receiver == 1).unwrap();
        assert!(m.take_reception(to1.reception).unwrap().corrupted);
    }

    #[test]
    fn airtime_of_max_frame() {
        let cfg = RadioConfig::default();
        // 64 us preamble + 1016 bits at 6.8 Mb/s.
        assert_eq!(cfg.airtime(127), SimTime(64_000_000 + 149_411_765));
    }

    #[test]
    fn trace_lines_parse_back() {
        let mut t = Trace::new(true);
        t.record(SimTime(42), Some(3), "tx", format_args!("len={}", 9));
        t.record(SimTime(43), None, "tick", format_args!(""));
        let lines: Vec<_> = t.as_str().lines().map(|l| TraceRecord::parse(l).unwrap()).collect();
        assert_eq!(lines[0].node, Some(3));
        assert_eq!(lines[0].details, "len=9");
        assert_eq!(lines[1].node, None);
    }
}
