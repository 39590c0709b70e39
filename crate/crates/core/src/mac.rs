//! TDMA superframe layout, beacon encoding and drifting local clocks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{propagation_delay, NodeId, SimTime};
use crate::phy::MAX_PAYLOAD_LEN;

pub const SUPERFRAME: SimTime = SimTime::from_ms(100);
pub const DEFAULT_SLOT_US: u64 = 1_000;
pub const DEFAULT_GUARD: SimTime = SimTime::from_us(50);
/// A node counts as synchronized for this many superframes after a sync.
pub const SYNC_VALID_SUPERFRAMES: u64 = 5;

pub const BEACON_DISPATCH: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MacError {
    #[error("a schedule needs at least one leader")]
    NoLeaders,
    #[error("slot length {0} us does not divide the 100 ms superframe")]
    BadSlotLength(u64),
    #[error("{leaders} leaders need {needed} slots but the superframe has {available}")]
    TooManyLeaders {
        leaders: usize,
        needed: usize,
        available: usize,
    },
    #[error("beacon sequence {got} is not newer than {last}")]
    StaleBeacon { last: u32, got: u32 },
    #[error("malformed beacon")]
    MalformedBeacon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Beacon,
    Ranging,
    LeaderData,
}

impl SlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotKind::Beacon => "beacon",
            SlotKind::Ranging => "ranging",
            SlotKind::LeaderData => "leader_data",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub kind: SlotKind,
    /// `None` for open ranging slots, which the zone leader grants per superframe.
    pub owner: Option<NodeId>,
    pub index: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperframeSchedule {
    pub duration: SimTime,
    pub slot_length: SimTime,
    pub slots: Vec<SlotAssignment>,
    /// Zone leaders in slot order; zone `z` owns beacon slot `z` and the
    /// `z`-th leader-data slot.
    pub leaders: Vec<NodeId>,
}

/// Lays out |leaders| beacon slots, then ranging slots, then |leaders|
/// leader-data slots. Leaders are ordered by node id.
pub fn build_schedule(leaders: &[NodeId], slot_length_us: u64) -> Result<SuperframeSchedule, MacError> {
    if leaders.is_empty() {
        return Err(MacError::NoLeaders);
    }
    let duration_us = SUPERFRAME.as_ps() / SimTime::from_us(1).as_ps();
    if slot_length_us == 0 || !duration_us.is_multiple_of(slot_length_us) {
        return Err(MacError::BadSlotLength(slot_length_us));
    }
    let n = (duration_us / slot_length_us) as usize;
    let mut ls = leaders.to_vec();
    ls.sort_unstable();
    ls.dedup();
    let z = ls.len();
    if n < 2 * z + 1 {
        return Err(MacError::TooManyLeaders {
            leaders: z,
            needed: 2 * z + 1,
            available: n,
        });
    }
    let slots = (0..n)
        .map(|i| {
            let (kind, owner) = if i < z {
                (SlotKind::Beacon, Some(ls[i]))
            } else if i >= n - z {
                (SlotKind::LeaderData, Some(ls[i - (n - z)]))
            } else {
                (SlotKind::Ranging, None)
            };
            SlotAssignment {
                kind,
                owner,
                index: i as u16,
            }
        })
        .collect();
    Ok(SuperframeSchedule {
        duration: SUPERFRAME,
        slot_length: SimTime::from_us(slot_length_us),
        slots,
        leaders: ls,
    })
}

impl SuperframeSchedule {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn zones(&self) -> usize {
        self.leaders.len()
    }

    pub fn count(&self, kind: SlotKind) -> usize {
        self.slots.iter().filter(|s| s.kind == kind).count()
    }

    pub fn zone_of_leader(&self, leader: NodeId) -> Option<usize> {
        self.leaders.iter().position(|l| *l == leader)
    }

    /// Zone that grants ranging slot `index`; ranging slots alternate between zones.
    pub fn ranging_zone(&self, index: usize) -> Option<usize> {
        let s = self.slots.get(index)?;
        (s.kind == SlotKind::Ranging).then(|| (index - self.zones()) % self.zones())
    }

    /// Ranging slot indices belonging to `zone`, in time order.
    pub fn zone_ranging_slots(&self, zone: usize) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|i| self.ranging_zone(*i) == Some(zone))
            .collect()
    }

    pub fn beacon_slot(&self, zone: usize) -> usize {
        zone
    }

    pub fn leader_data_slot(&self, zone: usize) -> usize {
        self.slots.len() - self.zones() + zone
    }

    pub fn slot_start(&self, index: usize) -> SimTime {
        SimTime(self.slot_length.as_ps() * index as u64)
    }

    /// Hands every slot owned by `old` to `new`, keeping positions.
    pub fn reassign(&mut self, old: NodeId, new: NodeId) {
        for s in self.slots.iter_mut() {
            if s.owner == Some(old) {
                s.owner = Some(new);
            }
        }
        for l in self.leaders.iter_mut() {
            if *l == old {
                *l = new;
            }
        }
    }

    /// Text table: `index kind owner`.
    pub fn dump(&self) -> String {
        let mut s = String::from("index\tkind\towner\n");
        for slot in &self.slots {
            let owner = match (slot.owner, self.ranging_zone(slot.index as usize)) {
                (Some(o), _) => o.to_string(),
                (None, Some(z)) => format!("open(zone {z})"),
                (None, None) => "open".to_string(),
            };
            let _ = writeln!(s, "{}\t{}\t{}", slot.index, slot.kind.as_str(), owner);
        }
        s
    }
}

/// The slot containing `local_time` and the time already spent in it.
pub fn slot_at(schedule: &SuperframeSchedule, local_time: SimTime) -> (SlotAssignment, SimTime) {
    let into_sf = local_time.as_ps() % schedule.duration.as_ps();
    let len = schedule.slot_length.as_ps();
    let idx = (into_sf / len) as usize;
    (schedule.slots[idx], SimTime(into_sf % len))
}

/// Superframe number of `local_time`.
pub fn superframe_of(local_time: SimTime) -> u64 {
    local_time.as_ps() / SUPERFRAME.as_ps()
}

/// Who may use a ranging slot in the current superframe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub slot: u16,
    pub grantee: NodeId,
    /// The zone leader, which answers inside the slot.
    pub leader: NodeId,
}

/// Transmit permission for an air interval `[into, into + airtime]` inside
/// `slot`. The owner of a beacon or leader-data slot may transmit; in a
/// ranging slot only the grantee and its leader may.
#[allow(clippy::too_many_arguments)]
pub fn may_transmit(
    node: NodeId,
    slot: &SlotAssignment,
    grant: Option<&Grant>,
    into: SimTime,
    airtime: SimTime,
    slot_length: SimTime,
    guard: SimTime,
    synchronized: bool,
) -> bool {
    if !synchronized {
        return false;
    }
    let entitled = match slot.kind {
        SlotKind::Beacon | SlotKind::LeaderData => slot.owner == Some(node),
        SlotKind::Ranging => grant
            .filter(|g| g.slot == slot.index)
            .is_some_and(|g| g.grantee == node || g.leader == node),
    };
    entitled && into >= guard && into + airtime + guard <= slot_length
}

/// Periodic leader advertisement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beacon {
    pub leader: NodeId,
    pub seq: u32,
    pub timestamp: SimTime,
    pub position: [f64; 3],
    /// Next leader if this one fails; `0xFFFF` when none.
    pub successor: NodeId,
    /// Nodes granted ranging slots this superframe, in rotation order.
    pub grants: Vec<NodeId>,
    /// Leader's neighbors with link quality 0..=255.
    pub neighbors: Vec<(NodeId, u8)>,
}

pub const NO_SUCCESSOR: NodeId = 0xFFFF;

const BEACON_FIXED: usize = 1 + 2 + 4 + 8 + 12 + 2 + 1 + 1;

impl Beacon {
    /// Serialized payload; the neighbor list is truncated (highest quality
    /// first) so the beacon fits one frame.
    pub fn encode(&self) -> Vec<u8> {
        let mut grants = self.grants.clone();
        let max_grants = (MAX_PAYLOAD_LEN - BEACON_FIXED) / 2;
        grants.truncate(max_grants);
        let room = (MAX_PAYLOAD_LEN - BEACON_FIXED - 2 * grants.len()) / 3;
        let mut nbrs = self.neighbors.clone();
        nbrs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        nbrs.truncate(room);

        let mut out = Vec::with_capacity(MAX_PAYLOAD_LEN);
        out.push(BEACON_DISPATCH);
        out.extend_from_slice(&self.leader.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.timestamp.as_ps().to_le_bytes());
        for c in self.position {
            out.extend_from_slice(&((c * 1000.0).round() as i32).to_le_bytes());
        }
        out.extend_from_slice(&self.successor.to_le_bytes());
        out.push(grants.len() as u8);
        for g in &grants {
            out.extend_from_slice(&g.to_le_bytes());
        }
        out.push(nbrs.len() as u8);
        for (id, q) in &nbrs {
            out.extend_from_slice(&id.to_le_bytes());
            out.push(*q);
        }
        debug_assert!(out.len() <= MAX_PAYLOAD_LEN);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, MacError> {
        let bad = || MacError::MalformedBeacon;
        if b.len() < BEACON_FIXED || b[0] != BEACON_DISPATCH {
            return Err(bad());
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let leader = u16_at(1);
        let seq = u32::from_le_bytes(b[3..7].try_into().unwrap());
        let timestamp = SimTime(u64::from_le_bytes(b[7..15].try_into().unwrap()));
        let mut position = [0.0; 3];
        for (k, p) in position.iter_mut().enumerate() {
            let o = 15 + 4 * k;
            *p = i32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as f64 / 1000.0;
        }
        let successor = u16_at(27);
        let ng = b[29] as usize;
        let mut i = 30;
        if b.len() < i + 2 * ng + 1 {
            return Err(bad());
        }
        let grants = (0..ng).map(|k| u16_at(i + 2 * k)).collect();
        i += 2 * ng;
        let nn = b[i] as usize;
        i += 1;
        if b.len() != i + 3 * nn {
            return Err(bad());
        }
        let neighbors = (0..nn)
            .map(|k| (u16_at(i + 3 * k), b[i + 3 * k + 2]))
            .collect();
        Ok(Self {
            leader,
            seq,
            timestamp,
            position,
            successor,
            grants,
            neighbors,
        })
    }
}

/// A node's oscillator and its beacon-disciplined correction.
///
/// `local_time(t) = t + offset + drift × (t − last_sync)`. Each sync also
/// refines `rate_estimate`, the node's own view of its drift, which is used
/// to discipline slot timing and to compensate ranging reply delays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalClock {
    pub offset_ps: f64,
    pub drift_ppm: f64,
    pub last_sync: SimTime,
    pub last_seq: Option<u32>,
    pub rate_estimate_ppm: f64,
    pub synced: bool,
}

impl LocalClock {
    pub fn new(drift_ppm: f64) -> Self {
        Self {
            offset_ps: 0.0,
            drift_ppm,
            last_sync: SimTime::ZERO,
            last_seq: None,
            rate_estimate_ppm: 0.0,
            synced: false,
        }
    }

    /// A reference clock: zero drift, synchronized from the start.
    pub fn reference() -> Self {
        Self {
            synced: true,
            ..Self::new(0.0)
        }
    }

    fn elapsed(&self, t: SimTime) -> f64 {
        t.signed_diff(self.last_sync) as f64
    }

    /// Raw oscillator reading at true time `t`, in picoseconds.
    pub fn local_ps(&self, t: SimTime) -> f64 {
        t.as_ps() as f64 + self.offset_ps + self.drift_ppm * 1e-6 * self.elapsed(t)
    }

    pub fn local_time(&self, t: SimTime) -> SimTime {
        SimTime(self.local_ps(t).round().max(0.0) as u64)
    }

    /// Reading corrected by the estimated rate.
    pub fn disciplined_ps(&self, t: SimTime) -> f64 {
        let rate = (self.drift_ppm - self.rate_estimate_ppm) * 1e-6;
        t.as_ps() as f64 + self.offset_ps + rate * self.elapsed(t)
    }

    pub fn disciplined_time(&self, t: SimTime) -> SimTime {
        SimTime(self.disciplined_ps(t).round().max(0.0) as u64)
    }

    /// True time at which the disciplined clock reads `local`.
    pub fn true_time_of(&self, local: SimTime) -> SimTime {
        let rate = (self.drift_ppm - self.rate_estimate_ppm) * 1e-6;
        let base = self.last_sync.as_ps() as f64;
        let t = base + (local.as_ps() as f64 - self.offset_ps - base) / (1.0 + rate);
        SimTime(t.round().max(0.0) as u64)
    }

    /// True time at which the raw oscillator reads `local`.
    pub fn true_time_of_raw(&self, local: SimTime) -> SimTime {
        let base = self.last_sync.as_ps() as f64;
        let t = base + (local.as_ps() as f64 - self.offset_ps - base) / (1.0 + self.drift_ppm * 1e-6);
        SimTime(t.round().max(0.0) as u64)
    }

    pub fn is_synchronized(&self, now: SimTime) -> bool {
        self.synced
            && now.saturating_sub(self.last_sync).as_ps()
                <= SYNC_VALID_SUPERFRAMES * SUPERFRAME.as_ps()
    }
}

/// Aligns `clock` so that at true time `arrival` it reads the beacon
/// timestamp plus the propagation time over `distance_estimate`.
pub fn sync_from_beacon(
    clock: &LocalClock,
    beacon: &Beacon,
    arrival: SimTime,
    distance_estimate: f64,
) -> Result<LocalClock, MacError> {
    if let Some(last) = clock.last_seq {
        if beacon.seq <= last {
            return Err(MacError::StaleBeacon {
                last,
                got: beacon.seq,
            });
        }
    }
    let target = beacon.timestamp.as_ps() as f64 + propagation_delay(distance_estimate).as_ps() as f64;
    let mut next = *clock;
    if clock.synced {
        let elapsed = clock.elapsed(arrival);
        if elapsed > 0.0 {
            let residual = clock.disciplined_ps(arrival) - target;
            next.rate_estimate_ppm += residual / elapsed * 1e6;
        }
    }
    next.offset_ps = target - arrival.as_ps() as f64;
    next.last_sync = arrival;
    next.last_seq = Some(beacon.seq);
    next.synced = true;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beacon(seq: u32, ts: SimTime) -> Beacon {
        Beacon {
            leader: 1,
            seq,
            timestamp: ts,
            position: [0.0; 3],
            successor: NO_SUCCESSOR,
            grants: vec![],
            neighbors: vec![],
        }
    }

    #[test]
    fn three_leaders_one_ms() {
        let s = build_schedule(&[30, 10, 20], 1_000).unwrap();
        assert_eq!(s.slot_count(), 100);
        assert_eq!(s.count(SlotKind::Beacon), 3);
        assert_eq!(s.count(SlotKind::Ranging), 94);
        assert_eq!(s.count(SlotKind::LeaderData), 3);
        assert_eq!(s.slots[0].owner, Some(10));
        assert_eq!(s.slots[99].owner, Some(30));
    }

    #[test]
    fn one_leader_ten_ms() {
        let s = build_schedule(&[4], 10_000).unwrap();
        assert_eq!(s.slot_count(), 10);
        assert_eq!(
            (s.count(SlotKind::Beacon), s.count(SlotKind::Ranging), s.count(SlotKind::LeaderData)),
            (1, 8, 1)
        );
    }

    #[test]
    fn schedule_errors() {
        assert_eq!(build_schedule(&[], 1_000), Err(MacError::NoLeaders));
        assert_eq!(build_schedule(&[1], 3_000), Err(MacError::BadSlotLength(3_000)));
    }

    #[test]
    fn slot_lookup() {
        let s = build_schedule(&[1, 2, 3], 1_000).unwrap();
        let (a, into) = slot_at(&s, SimTime::ZERO);
        assert_eq!((a.kind, a.index, into), (SlotKind::Beacon, 0, SimTime::ZERO));
        let (b, _) = slot_at(&s, SimTime::from_us(99_500));
        assert_eq!((b.kind, b.index), (SlotKind::LeaderData, 99));
        assert_eq!(slot_at(&s, SimTime::from_ms(150)), slot_at(&s, SimTime::from_ms(50)));
    }

    #[test]
    fn ranging_slots_alternate_between_zones() {
        let s = build_schedule(&[1, 2, 3], 1_000).unwrap();
        assert_eq!(s.ranging_zone(3), Some(0));
        assert_eq!(s.ranging_zone(4), Some(1));
        assert_eq!(s.ranging_zone(5), Some(2));
        assert_eq!(s.ranging_zone(0), None);
        let total: usize = (0..3).map(|z| s.zone_ranging_slots(z).len()).sum();
        assert_eq!(total, 94);
    }

    #[test]
    fn transmit_permissions() {
        let s = build_schedule(&[1, 2, 3], 1_000).unwrap();
        let len = s.slot_length;
        let mid = SimTime::from_us(500);
        let air = SimTime::from_us(100);
        assert!(may_transmit(1, &s.slots[0], None, mid, air, len, DEFAULT_GUARD, true));
        assert!(!may_transmit(1, &s.slots[98], None, mid, air, len, DEFAULT_GUARD, true));
        assert!(!may_transmit(1, &s.slots[0], None, SimTime::from_us(10), air, len, DEFAULT_GUARD, true));
        assert!(!may_transmit(1, &s.slots[0], None, mid, air, len, DEFAULT_GUARD, false));
        let g = Grant {
            slot: 7,
            grantee: 42,
            leader: 2,
        };
        assert!(may_transmit(42, &s.slots[7], Some(&g), mid, air, len, DEFAULT_GUARD, true));
        assert!(may_transmit(2, &s.slots[7], Some(&g), mid, air, len, DEFAULT_GUARD, true));
        assert!(!may_transmit(43, &s.slots[7], Some(&g), mid, air, len, DEFAULT_GUARD, true));
        assert!(!may_transmit(42, &s.slots[8], Some(&g), mid, air, len, DEFAULT_GUARD, true));
    }

    #[test]
    fn beacon_roundtrip_and_truncation() {
        let mut b = beacon(77, SimTime::from_ms(7_700));
        b.position = [1.5, -2.25, 0.0];
        b.grants = vec![5, 6, 7];
        b.neighbors = (0..40).map(|i| (100 + i, (i * 6) as u8)).collect();
        let bytes = b.encode();
        assert!(bytes.len() <= MAX_PAYLOAD_LEN);
        let d = Beacon::decode(&bytes).unwrap();
        assert_eq!(d.grants, b.grants);
        assert_eq!(d.position, b.position);
        assert_eq!(d.neighbors[0], (139, 234));
        assert!(d.neighbors.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(d.neighbors.len() < 40);
    }

    #[test]
    fn zero_drift_exact_sync() {
        let c = LocalClock::new(0.0);
        let arrival = SimTime::from_ms(100) + propagation_delay(6.0);
        let s = sync_from_beacon(&c, &beacon(1, SimTime::from_ms(100)), arrival, 6.0).unwrap();
        assert_eq!(s.local_time(arrival), SimTime::from_ms(100) + propagation_delay(6.0));
        assert_eq!(s.local_time(SimTime::from_ms(150)), SimTime::from_ms(150));
    }

    #[test]
    fn twenty_ppm_drift_stays_within_two_us() {
        let mut c = LocalClock::new(20.0);
        let mut worst: f64 = 0.0;
        for k in 1..=20u64 {
            let t = SimTime::from_ms(100 * k);
            let before = (c.local_ps(t) - t.as_ps() as f64).abs();
            if c.synced {
                worst = worst.max(before);
            }
            c = sync_from_beacon(&c, &beacon(k as u32, t), t, 0.0).unwrap();
        }
        assert!(worst <= 2e6, "{worst}");
        assert!((c.rate_estimate_ppm - 20.0).abs() < 1e-3);
        let t = SimTime::from_ms(2_050);
        assert!((c.disciplined_ps(t) - t.as_ps() as f64).abs() < 10.0);
    }

    #[test]
    fn stale_beacon_leaves_clock_unchanged() {
        let c = sync_from_beacon(&LocalClock::new(3.0), &beacon(5, SimTime::from_ms(500)), SimTime::from_ms(500), 0.0)
            .unwrap();
        assert_eq!(
            sync_from_beacon(&c, &beacon(5, SimTime::from_ms(600)), SimTime::from_ms(600), 0.0),
            Err(MacError::StaleBeacon { last: 5, got: 5 })
        );
    }

    #[test]
    fn true_time_inverts_disciplined_time() {
        let mut c = LocalClock::new(-13.0);
        c.offset_ps = 12_345.0;
        c.rate_estimate_ppm = -12.0;
        c.last_sync = SimTime::from_ms(10);
        let local = SimTime::from_ms(73);
        let t = c.true_time_of(local);
        assert!(c.disciplined_time(t).as_ps().abs_diff(local.as_ps()) <= 1);
    }
}
