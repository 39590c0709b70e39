//! Single-sided two-way ranging with a dual-ToA consistency check on every
//! received ranging message.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, NodeId, RadioConfig, SimTime, SPEED_OF_LIGHT_M_PER_NS};
use crate::mac::{sync_from_beacon, Beacon, LocalClock, NO_SUCCESSOR, SUPERFRAME};
use crate::phy::{Frame, ImpairmentSignature, TimelineShift, ToaModel, ToaPair};
use crate::rng;

pub const INIT_DISPATCH: u8 = 0x03;
pub const RESPONSE_DISPATCH: u8 = 0x04;
pub const FINAL_DISPATCH: u8 = 0x05;

/// Offsets of the three ranging messages inside a ranging slot. The
/// response is sent a fixed reply delay after the initiation arrives.
pub const INIT_OFFSET: SimTime = SimTime::from_us(50);
pub const FINAL_OFFSET: SimTime = SimTime::from_us(500);

#[derive(Debug, Error, PartialEq)]
pub enum RangingError {
    #[error("non-causal timestamps")]
    NonCausal,
    #[error("tau must be positive, got {0} ns")]
    NonPositiveTau(f64),
    #[error("malformed ranging message")]
    Malformed,
    #[error("session is {0:?}, cannot move to {1:?}")]
    BadTransition(SessionState, SessionState),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangingConfig {
    /// Maximum tolerated |toa_sts − toa_phy|, ns.
    pub tau_ns: f64,
    pub reply_delay_us: u64,
    /// Divide each interval by the node's estimated clock rate.
    pub compensate_drift: bool,
}

impl Default for RangingConfig {
    fn default() -> Self {
        Self {
            tau_ns: 1.0,
            reply_delay_us: 200,
            compensate_drift: true,
        }
    }
}

impl RangingConfig {
    pub fn reply_delay(&self) -> SimTime {
        SimTime::from_us(self.reply_delay_us)
    }
}

/// `((t4 − t1) − (t3 − t2)) / 2`, all in ns.
pub fn sstwr_tof(t1: f64, t2: f64, t3: f64, t4: f64) -> Result<f64, RangingError> {
    if !(t4 > t1) || t3 < t2 {
        return Err(RangingError::NonCausal);
    }
    Ok(((t4 - t1) - (t3 - t2)) / 2.0)
}

/// SS-TWR with each round-trip interval divided by `1 + rate` of the clock
/// that measured it. Rates in ppm.
pub fn sstwr_tof_compensated(
    t1: f64,
    t2: f64,
    t3: f64,
    t4: f64,
    initiator_rate_ppm: f64,
    responder_rate_ppm: f64,
) -> Result<f64, RangingError> {
    if !(t4 > t1) || t3 < t2 {
        return Err(RangingError::NonCausal);
    }
    let ri = (t4 - t1) / (1.0 + initiator_rate_ppm * 1e-6);
    let rr = (t3 - t2) / (1.0 + responder_rate_ppm * 1e-6);
    Ok((ri - rr) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Consistency {
    Ok,
    Invalidated { discrepancy_ns: f64 },
}

/// Ok iff |toa_sts − toa_phy| ≤ tau.
pub fn check_toa_consistency(pair: &ToaPair, tau_ns: f64) -> Result<Consistency, RangingError> {
    if !(tau_ns > 0.0) {
        return Err(RangingError::NonPositiveTau(tau_ns));
    }
    let d = pair.discrepancy_ps() as f64 / 1_000.0;
    Ok(if d <= tau_ns {
        Consistency::Ok
    } else {
        Consistency::Invalidated { discrepancy_ns: d }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Init,
    Responded,
    Final,
    Complete,
    Invalidated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Init,
    Response,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InvalidationReason {
    ToaMismatch { message: MessageKind, discrepancy_ns: f64 },
    NonCausal,
}

impl std::fmt::Display for InvalidationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InvalidationReason::ToaMismatch {
                message,
                discrepancy_ns,
            } => write!(f, "toa_mismatch({message:?},{discrepancy_ns:.3}ns)"),
            InvalidationReason::NonCausal => write!(f, "non_causal"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeResult {
    pub distance_m: f64,
    pub tof_ns: f64,
    pub valid: bool,
    pub invalidation_reason: Option<InvalidationReason>,
}

impl RangeResult {
    pub fn from_tof(tof_ns: f64) -> Self {
        Self {
            distance_m: tof_ns * SPEED_OF_LIGHT_M_PER_NS,
            tof_ns,
            valid: true,
            invalidation_reason: None,
        }
    }

    pub fn invalid(reason: InvalidationReason) -> Self {
        Self {
            distance_m: f64::NAN,
            tof_ns: f64::NAN,
            valid: false,
            invalidation_reason: Some(reason),
        }
    }
}

/// Wire form of the three ranging messages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangingMessage {
    Init { session: u8 },
    /// Responder's local receive and transmit stamps and its rate estimate.
    Response {
        session: u8,
        t2: SimTime,
        t3: SimTime,
        rate_ppb: i32,
    },
    /// Initiator's verdict: distance in mm when valid.
    Final { session: u8, distance_mm: Option<u32> },
}

impl RangingMessage {
    pub fn encode(&self) -> Vec<u8> {
        match *self {
            RangingMessage::Init { session } => vec![INIT_DISPATCH, session],
            RangingMessage::Response {
                session,
                t2,
                t3,
                rate_ppb,
            } => {
                let mut v = vec![RESPONSE_DISPATCH, session];
                v.extend_from_slice(&t2.as_ps().to_le_bytes());
                v.extend_from_slice(&t3.as_ps().to_le_bytes());
                v.extend_from_slice(&rate_ppb.to_le_bytes());
                v
            }
            RangingMessage::Final {
                session,
                distance_mm,
            } => {
                let mut v = vec![FINAL_DISPATCH, session];
                v.extend_from_slice(&distance_mm.unwrap_or(u32::MAX).to_le_bytes());
                v
            }
        }
    }

    pub fn decode(b: &[u8]) -> Result<Self, RangingError> {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        match (b.first(), b.len()) {
            (Some(&INIT_DISPATCH), 2) => Ok(RangingMessage::Init { session: b[1] }),
            (Some(&RESPONSE_DISPATCH), 22) => Ok(RangingMessage::Response {
                session: b[1],
                t2: SimTime(u64_at(2)),
                t3: SimTime(u64_at(10)),
                rate_ppb: i32::from_le_bytes(b[18..22].try_into().unwrap()),
            }),
            (Some(&FINAL_DISPATCH), 6) => {
                let mm = u32::from_le_bytes(b[2..6].try_into().unwrap());
                Ok(RangingMessage::Final {
                    session: b[1],
                    distance_mm: (mm != u32::MAX).then_some(mm),
                })
            }
            _ => Err(RangingError::Malformed),
        }
    }

    pub fn is_ranging(payload: &[u8]) -> bool {
        matches!(
            payload.first(),
            Some(&INIT_DISPATCH | &RESPONSE_DISPATCH | &FINAL_DISPATCH)
        )
    }
}

/// One node's view of a ranging exchange. Timestamps are raw local clock
/// readings of the node that took them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangingSession {
    pub initiator: NodeId,
    pub responder: NodeId,
    pub id: u8,
    pub t1: Option<SimTime>,
    pub t2: Option<SimTime>,
    pub t3: Option<SimTime>,
    pub t4: Option<SimTime>,
    pub toa_pairs: Vec<ToaPair>,
    pub state: SessionState,
    pub invalidation: Option<InvalidationReason>,
}

impl RangingSession {
    pub fn new(initiator: NodeId, responder: NodeId, id: u8) -> Self {
        Self {
            initiator,
            responder,
            id,
            t1: None,
            t2: None,
            t3: None,
            t4: None,
            toa_pairs: Vec::new(),
            state: SessionState::Init,
            invalidation: None,
        }
    }

    fn advance(&mut self, to: SessionState) -> Result<(), RangingError> {
        if to <= self.state || self.state == SessionState::Invalidated {
            return Err(RangingError::BadTransition(self.state, to));
        }
        self.state = to;
        Ok(())
    }

    fn invalidate(&mut self, reason: InvalidationReason) -> InvalidationReason {
        self.state = SessionState::Invalidated;
        self.invalidation = Some(reason);
        reason
    }

    fn check(&mut self, pair: ToaPair, message: MessageKind, tau_ns: f64) -> Result<(), InvalidationReason> {
        self.toa_pairs.push(pair);
        match check_toa_consistency(&pair, tau_ns) {
            Ok(Consistency::Ok) => Ok(()),
            Ok(Consistency::Invalidated { discrepancy_ns }) => Err(self.invalidate(InvalidationReason::ToaMismatch {
                message,
                discrepancy_ns,
            })),
            Err(_) => Err(self.invalidate(InvalidationReason::NonCausal)),
        }
    }

    /// Initiator: records the transmit stamp of the initiation message.
    pub fn start(&mut self, t1_local: SimTime) -> RangingMessage {
        self.t1 = Some(t1_local);
        RangingMessage::Init { session: self.id }
    }

    /// Responder: validates the initiation and returns the response with
    /// its local transmit stamp `t3 = t2 + reply_delay`.
    pub fn on_init(
        &mut self,
        pair: ToaPair,
        clock: &LocalClock,
        cfg: &RangingConfig,
    ) -> Result<RangingMessage, InvalidationReason> {
        self.check(pair, MessageKind::Init, cfg.tau_ns)?;
        let t2 = clock.local_time(pair.toa_sts);
        let t3 = t2 + cfg.reply_delay();
        self.t2 = Some(t2);
        self.t3 = Some(t3);
        let _ = self.advance(SessionState::Responded);
        Ok(RangingMessage::Response {
            session: self.id,
            t2,
            t3,
            rate_ppb: (clock.rate_estimate_ppm * 1_000.0).round() as i32,
        })
    }

    /// Initiator: validates the response and computes the range.
    pub fn on_response(
        &mut self,
        pair: ToaPair,
        msg: &RangingMessage,
        clock: &LocalClock,
        cfg: &RangingConfig,
    ) -> Result<RangeResult, InvalidationReason> {
        self.check(pair, MessageKind::Response, cfg.tau_ns)?;
        let RangingMessage::Response { t2, t3, rate_ppb, .. } = *msg else {
            return Err(self.invalidate(InvalidationReason::NonCausal));
        };
        let t4 = clock.local_time(pair.toa_sts);
        self.t2 = Some(t2);
        self.t3 = Some(t3);
        self.t4 = Some(t4);
        let t1 = self.t1.unwrap_or(SimTime::ZERO);
        let ns = |t: SimTime| t.as_ps() as f64 / 1_000.0;
        let (ri, rr) = if cfg.compensate_drift {
            (clock.rate_estimate_ppm, rate_ppb as f64 / 1_000.0)
        } else {
            (0.0, 0.0)
        };
        match sstwr_tof_compensated(ns(t1), ns(t2), ns(t3), ns(t4), ri, rr) {
            Ok(tof) => {
                let _ = self.advance(SessionState::Final);
                Ok(RangeResult::from_tof(tof))
            }
            Err(_) => Err(self.invalidate(InvalidationReason::NonCausal)),
        }
    }

    /// Responder: validates the final message; the session completes.
    pub fn on_final(&mut self, pair: ToaPair, cfg: &RangingConfig) -> Result<(), InvalidationReason> {
        self.check(pair, MessageKind::Final, cfg.tau_ns)?;
        self.state = SessionState::Complete;
        Ok(())
    }

    /// Initiator: marks completion after sending the final message.
    pub fn complete(&mut self) {
        if self.state != SessionState::Invalidated {
            self.state = SessionState::Complete;
        }
    }
}

/// Two radios at a fixed distance, for standalone sessions.
#[derive(Clone, Debug)]
pub struct LinkSetup {
    pub distance_m: f64,
    pub initiator_drift_ppm: f64,
    pub responder_drift_ppm: f64,
    pub toa_model: ToaModel,
    pub shift: TimelineShift,
    pub initiator_signature: ImpairmentSignature,
    pub responder_signature: ImpairmentSignature,
    /// Sync both clocks to two reference beacons before ranging, so each
    /// has a rate estimate.
    pub presync: bool,
    pub seed: u64,
}

impl LinkSetup {
    pub fn ideal(distance_m: f64) -> Self {
        Self {
            distance_m,
            initiator_drift_ppm: 0.0,
            responder_drift_ppm: 0.0,
            toa_model: ToaModel::Ideal,
            shift: TimelineShift::default(),
            initiator_signature: ImpairmentSignature::IDEAL,
            responder_signature: ImpairmentSignature::IDEAL,
            presync: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SessionOutcome {
    Completed(RangeResult),
    Invalidated(InvalidationReason),
    Timeout,
}

impl SessionOutcome {
    pub fn result(&self) -> Option<&RangeResult> {
        match self {
            SessionOutcome::Completed(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Ev {
    Send(Vec<u8>),
    Deliver(u64),
}

const INITIATOR: NodeId = 1;
const RESPONDER: NodeId = 2;

/// Runs init → response → final inside one ranging slot on a private
/// engine and returns the initiator's outcome. The responder's session is
/// returned too so callers can inspect both views.
pub fn run_session(link: &LinkSetup, cfg: &RangingConfig) -> (SessionOutcome, RangingSession, RangingSession) {
    let mut eng: Engine<Ev> = Engine::new(RadioConfig::default(), false);
    eng.medium.add_node(INITIATOR, [0.0; 3], 0);
    eng.medium.add_node(RESPONDER, [link.distance_m, 0.0, 0.0], 0);

    let mut clocks = [
        LocalClock::new(link.initiator_drift_ppm),
        LocalClock::new(link.responder_drift_ppm),
    ];
    let mut slot_start = SimTime::ZERO;
    if link.presync {
        for seq in 1..=2u32 {
            let t = SUPERFRAME * seq as u64;
            let b = Beacon {
                leader: 0,
                seq,
                timestamp: t,
                position: [0.0; 3],
                successor: NO_SUCCESSOR,
                grants: vec![],
                neighbors: vec![],
            };
            for c in clocks.iter_mut() {
                *c = sync_from_beacon(c, &b, t, 0.0).expect("fresh beacon");
            }
        }
        slot_start = SUPERFRAME * 2 + SimTime::from_ms(3);
    }
    let mut toa_rng = rng::stream(link.seed, &[rng::purpose::TOA]);
    let mut ini = RangingSession::new(INITIATOR, RESPONDER, (link.seed & 0xFF) as u8);
    let mut rsp = RangingSession::new(INITIATOR, RESPONDER, ini.id);
    let mut outcome = SessionOutcome::Timeout;
    let mut tx_times = std::collections::HashMap::new();

    let init_true = clocks[0].true_time_of(clocks[0].disciplined_time(slot_start) + INIT_OFFSET);
    let t1 = clocks[0].local_time(init_true);
    let init = ini.start(t1);
    eng.schedule_at(init_true, INITIATOR, Ev::Send(init.encode())).unwrap();
    let final_true = clocks[0].true_time_of(clocks[0].disciplined_time(slot_start) + FINAL_OFFSET);
    let slot_end = slot_start + SimTime::from_ms(1);

    eng.run_until(slot_end, |e, ev| {
        let me = ev.target;
        let peer = if me == INITIATOR { RESPONDER } else { INITIATOR };
        match ev.payload {
            Ev::Send(payload) => {
                let now = e.now();
                let frame = Frame::new(me, peer, 0, 0, payload).unwrap().with_sts();
                tx_times.insert(me, now);
                e.transmit(me, frame.encode(), now, |_, id| Ev::Deliver(id)).unwrap();
            }
            Ev::Deliver(id) => {
                let Some(rx) = e.medium.take_reception(id) else { return };
                if rx.corrupted {
                    return;
                }
                let Ok(frame) = Frame::decode(&rx.bytes) else { return };
                let Ok(msg) = RangingMessage::decode(&frame.payload) else { return };
                let sig = if peer == INITIATOR {
                    &link.initiator_signature
                } else {
                    &link.responder_signature
                };
                let tx_time = tx_times[&peer];
                let Ok(pair) = link.toa_model.measure(tx_time, link.distance_m, sig, link.shift, &mut toa_rng) else {
                    return;
                };
                match (me, msg) {
                    (RESPONDER, RangingMessage::Init { .. }) => {
                        if let Ok(resp) = rsp.on_init(pair, &clocks[1], cfg) {
                            let RangingMessage::Response { t3, .. } = resp else { unreachable!() };
                            let at = clocks[1].true_time_of_raw(t3);
                            e.schedule_at(at.max(e.now()), RESPONDER, Ev::Send(resp.encode())).unwrap();
                        }
                    }
                    (INITIATOR, m @ RangingMessage::Response { .. }) => match ini.on_response(pair, &m, &clocks[0], cfg) {
                        Ok(r) => {
                            let fin = RangingMessage::Final {
                                session: ini.id,
                                distance_mm: Some((r.distance_m * 1000.0).round().max(0.0) as u32),
                            };
                            outcome = SessionOutcome::Completed(r);
                            ini.complete();
                            let at = final_true.max(e.now());
                            e.schedule_at(at, INITIATOR, Ev::Send(fin.encode())).unwrap();
                        }
                        Err(reason) => outcome = SessionOutcome::Invalidated(reason),
                    },
                    (RESPONDER, RangingMessage::Final { .. }) => {
                        let _ = rsp.on_final(pair, cfg);
                    }
                    _ => {}
                }
            }
        }
    });
    if let (SessionOutcome::Timeout, Some(reason)) = (&outcome, rsp.invalidation) {
        outcome = SessionOutcome::Invalidated(reason);
    }
    (outcome, ini, rsp)
}
