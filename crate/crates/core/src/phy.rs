//! Physical layer: the on-air frame, synthetic channel impulse responses with
//! per-device hardware impairments, dual time-of-arrival estimation and the
//! attack hooks that displace the two ToA timelines independently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crc::{Crc, CRC_16_KERMIT};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{propagation_delay, NodeId, SimTime};
use crate::rng;

pub const MAX_FRAME_LEN: usize = 127;
/// Frame control 2, sequence 1, PAN id 2, dst 2, src 2, checksum 2.
pub const MAC_HEADER_LEN: usize = 11;
pub const MAX_PAYLOAD_LEN: usize = MAX_FRAME_LEN - MAC_HEADER_LEN;
pub const BROADCAST: NodeId = 0xFFFF;

const FC_DATA: u16 = 0x0001;
const FC_STS: u16 = 0x8000;
const FCS: Crc<u16> = Crc::<u16>::new(&CRC_16_KERMIT);

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD_LEN}")]
    PayloadTooLarge(usize),
    #[error("frame of {0} bytes is outside 11..=127")]
    BadFrameLength(usize),
    #[error("frame checksum mismatch")]
    ChecksumMismatch,
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("no tap reaches the leading-edge threshold")]
    Undetectable,
    #[error("channel impulse response has no finite nonzero tap")]
    InvalidCir,
    #[error("unknown link {0}-{1}")]
    UnknownLink(NodeId, NodeId),
    #[error("attack magnitude must be positive, got {0} ns")]
    NonPositiveMagnitude(f64),
}

/// MAC frame in the 802.15.4 short-address style. The checksum is computed
/// on encode and verified on decode; it is not stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub seq: u8,
    pub pan_id: u16,
    pub dst: NodeId,
    pub src: NodeId,
    pub payload: Vec<u8>,
    pub has_sts: bool,
}

impl Frame {
    pub fn new(src: NodeId, dst: NodeId, pan_id: u16, seq: u8, payload: Vec<u8>) -> Result<Self, PhyError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(PhyError::PayloadTooLarge(payload.len()));
        }
        Ok(Self {
            seq,
            pan_id,
            dst,
            src,
            payload,
            has_sts: false,
        })
    }

    pub fn with_sts(mut self) -> Self {
        self.has_sts = true;
        self
    }

    pub fn wire_len(&self) -> usize {
        MAC_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        let fc = FC_DATA | if self.has_sts { FC_STS } else { 0 };
        out.extend_from_slice(&fc.to_le_bytes());
        out.push(self.seq);
        out.extend_from_slice(&self.pan_id.to_le_bytes());
        out.extend_from_slice(&self.dst.to_le_bytes());
        out.extend_from_slice(&self.src.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let fcs = FCS.checksum(&out);
        out.extend_from_slice(&fcs.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PhyError> {
        if bytes.len() < MAC_HEADER_LEN || bytes.len() > MAX_FRAME_LEN {
            return Err(PhyError::BadFrameLength(bytes.len()));
        }
        let (body, fcs) = bytes.split_at(bytes.len() - 2);
        if FCS.checksum(body) != u16::from_le_bytes([fcs[0], fcs[1]]) {
            return Err(PhyError::ChecksumMismatch);
        }
        let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
        Ok(Self {
            has_sts: u16_at(0) & FC_STS != 0,
            seq: body[2],
            pan_id: u16_at(3),
            dst: u16_at(5),
            src: u16_at(7),
            payload: body[9..].to_vec(),
        })
    }
}

/// Hardware impairment parameters of one transmitter, drawn once from its
/// device seed. All values are dimensionless (per tap where applicable).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentSignature {
    /// Relative stretch of the trailing edge, signed.
    pub pulse_asymmetry: f64,
    pub ringing_amplitude: f64,
    pub ringing_decay: f64,
    /// Ringing oscillation in radians per tap.
    pub ringing_frequency: f64,
    /// Carrier-offset phase rotation in radians per tap, signed.
    pub phase_slope: f64,
}

impl ImpairmentSignature {
    /// Impairment-free reference transmitter.
    pub const IDEAL: ImpairmentSignature = ImpairmentSignature {
        pulse_asymmetry: 0.0,
        ringing_amplitude: 0.0,
        ringing_decay: 1.0,
        ringing_frequency: 1.0,
        phase_slope: 0.0,
    };

    pub fn from_device_seed(device_seed: u64) -> Self {
        let mut r = rng::stream(device_seed, &[rng::purpose::SIGNATURE]);
        let mut signed = |lo: f64, hi: f64| {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            sign * r.random_range(lo..hi)
        };
        let pulse_asymmetry = signed(0.10, 0.40);
        let phase_slope = signed(0.10, 0.35);
        Self {
            pulse_asymmetry,
            ringing_amplitude: r.random_range(0.15..0.30),
            ringing_decay: r.random_range(0.10..0.50),
            ringing_frequency: r.random_range(0.40..2.80),
            phase_slope,
        }
    }
}

/// Shape and sampling of synthesized responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CirConfig {
    pub taps: usize,
    pub tap_spacing_ps: u64,
    /// Leading edge rises linearly over this many taps to the peak.
    pub ramp_taps: f64,
    /// Trailing edge e-folding length of the ideal pulse, taps.
    pub trailing_taps: f64,
    /// First-path threshold as a fraction of the peak magnitude.
    pub leading_edge_threshold: f64,
}

impl Default for CirConfig {
    fn default() -> Self {
        Self {
            taps: 128,
            tap_spacing_ps: 1_000,
            ramp_taps: 3.0,
            trailing_taps: 1.2,
            leading_edge_threshold: 0.4,
        }
    }
}

impl CirConfig {
    /// Envelope and phase of a pulse at `x` taps after its origin.
    pub fn pulse(&self, x: f64, sig: &ImpairmentSignature) -> Complex64 {
        if x < 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let env = if x < self.ramp_taps {
            x / self.ramp_taps
        } else {
            let y = x - self.ramp_taps;
            (-y / (self.trailing_taps * (1.0 + sig.pulse_asymmetry))).exp()
                + sig.ringing_amplitude
                    * (-sig.ringing_decay * y).exp()
                    * (sig.ringing_frequency * y).sin()
        };
        Complex64::from_polar(1.0, sig.phase_slope * (x - self.ramp_taps)) * env
    }

    /// Impairment-free magnitudes with the peak at index `peak`.
    pub fn template_magnitudes(&self, peak: usize) -> Vec<f64> {
        (0..self.taps)
            .map(|k| {
                let j = circular_offset(k, peak, self.taps);
                self.pulse(j as f64 + self.ramp_taps, &ImpairmentSignature::IDEAL)
                    .norm()
            })
            .collect()
    }
}

/// Signed circular distance from `center` to `k`, in `[-n/2, n/2)`.
fn circular_offset(k: usize, center: usize, n: usize) -> i64 {
    let n = n as i64;
    let mut j = (k as i64 - center as i64).rem_euclid(n);
    if j >= n / 2 {
        j -= n;
    }
    j
}

/// Per-timeline displacement in picoseconds applied by attack hooks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineShift {
    pub sts_ps: i64,
    pub phy_ps: i64,
}

impl TimelineShift {
    pub fn is_zero(&self) -> bool {
        self.sts_ps == 0 && self.phy_ps == 0
    }
}

/// Channel impulse response on a receiver tap grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cir {
    pub taps: Vec<Complex64>,
    pub tap_spacing_ps: u64,
    /// Time of tap 0.
    pub window_start: SimTime,
    pub true_toa: SimTime,
    pub shift: TimelineShift,
}

impl Cir {
    pub fn new(taps: Vec<Complex64>, tap_spacing_ps: u64, window_start: SimTime, true_toa: SimTime) -> Result<Self, PhyError> {
        let cir = Self {
            taps,
            tap_spacing_ps,
            window_start,
            true_toa,
            shift: TimelineShift::default(),
        };
        cir.validate()?;
        Ok(cir)
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        let finite = self.taps.iter().all(|t| t.re.is_finite() && t.im.is_finite());
        let nonzero = self.taps.iter().any(|t| t.norm_sqr() > 0.0);
        if finite && nonzero {
            Ok(())
        } else {
            Err(PhyError::InvalidCir)
        }
    }

    pub fn with_shift(mut self, shift: TimelineShift) -> Self {
        self.shift = shift;
        self
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            taps: self.taps.iter().map(|t| t * k).collect(),
            ..self.clone()
        }
    }

    /// Index and magnitude of the strongest tap (first on ties).
    pub fn peak(&self) -> (usize, f64) {
        self.taps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, t)| {
                let m = t.norm();
                if m > bm {
                    (i, m)
                } else {
                    (bi, bm)
                }
            })
    }

    /// `tap,real,imag` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tap,real,imag\n");
        for (i, t) in self.taps.iter().enumerate() {
            let _ = writeln!(s, "{},{:.17e},{:.17e}", i, t.re, t.im);
        }
        s
    }
}

/// Synthesizes responses for one receiver configuration.
#[derive(Clone, Debug, Default)]
pub struct CirSynthesizer {
    pub config: CirConfig,
}

impl CirSynthesizer {
    pub fn new(config: CirConfig) -> Self {
        Self { config }
    }

    /// Line-of-sight response of a frame sent at `tx_time` over `distance` m.
    ///
    /// The tap grid is anchored so the pulse peak falls on a tap; the peak
    /// index is the arrival time modulo the window. Amplitude falls as 1/d.
    /// `noise_snr_db` is total signal energy over total noise energy across
    /// the window; `None` disables noise.
    pub fn synthesize(
        &self,
        tx_time: SimTime,
        distance: f64,
        sig: &ImpairmentSignature,
        noise_snr_db: Option<f64>,
        seed: u64,
    ) -> Result<Cir, PhyError> {
        if !(distance > 0.0) {
            return Err(PhyError::NonPositiveDistance(distance));
        }
        let c = &self.config;
        let n = c.taps;
        let ts = c.tap_spacing_ps;
        let true_toa = tx_time + propagation_delay(distance);
        let ramp_ps = (c.ramp_taps * ts as f64).round() as u64;
        let peak_time = true_toa + SimTime(ramp_ps);
        let peak_idx = ((peak_time.0 / ts) % n as u64) as usize;
        let window_start = SimTime(peak_time.0 - peak_idx as u64 * ts);

        let mut r = rng::stream(seed, &[rng::purpose::CIR]);
        let carrier = Complex64::from_polar(1.0 / distance, r.random_range(0.0..std::f64::consts::TAU));
        let mut taps: Vec<Complex64> = (0..n)
            .map(|k| {
                let j = circular_offset(k, peak_idx, n);
                c.pulse(j as f64 + c.ramp_taps, sig) * carrier
            })
            .collect();

        if let Some(snr_db) = noise_snr_db {
            let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
            let var = energy / 10f64.powf(snr_db / 10.0) / n as f64;
            let sd = (var / 2.0).sqrt();
            for t in taps.iter_mut() {
                let re: f64 = r.sample(StandardNormal);
                let im: f64 = r.sample(StandardNormal);
                *t += Complex64::new(re * sd, im * sd);
            }
        }
        Cir::new(taps, ts, window_start, true_toa)
    }
}

/// [`CirSynthesizer::synthesize`] with default shape, transmit time zero.
pub fn synthesize_cir(
    distance: f64,
    signature: &ImpairmentSignature,
    noise_snr_db: Option<f64>,
    seed: u64,
) -> Result<Cir, PhyError> {
    CirSynthesizer::default().synthesize(SimTime::ZERO, distance, signature, noise_snr_db, seed)
}

/// Which ToA timeline to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToaMethod {
    /// Scrambled timestamp sequence.
    Sts,
    /// PHY synchronization header.
    PhyHeader,
}

/// First-path estimate: the earliest tap of the run leading up to the peak
/// whose magnitude reaches `threshold` × peak, refined by linear
/// interpolation on the leading edge and referred back to the pulse origin.
pub fn measure_toa_with(cir: &Cir, method: ToaMethod, config: &CirConfig) -> Result<SimTime, PhyError> {
    let n = cir.taps.len();
    let (peak, peak_mag) = cir.peak();
    if n == 0 || !(peak_mag > 0.0) || !peak_mag.is_finite() {
        return Err(PhyError::Undetectable);
    }
    let thr = config.leading_edge_threshold * peak_mag;
    let mag = |i: i64| cir.taps[i.rem_euclid(n as i64) as usize].norm();

    let mut k = peak as i64;
    let mut steps = 0;
    while steps + 1 < n && mag(k - 1) >= thr {
        k -= 1;
        steps += 1;
    }
    if mag(k) < thr {
        return Err(PhyError::Undetectable);
    }
    let below = mag(k - 1);
    let frac = if steps + 1 < n {
        (thr - below) / (mag(k) - below)
    } else {
        0.0
    };
    let crossing = (k - 1) as f64 + frac;
    let origin_taps = crossing - config.leading_edge_threshold * config.ramp_taps;
    let ps = cir.window_start.0 as f64 + origin_taps * cir.tap_spacing_ps as f64;
    let shift = match method {
        ToaMethod::Sts => cir.shift.sts_ps,
        ToaMethod::PhyHeader => cir.shift.phy_ps,
    };
    Ok(SimTime::from_ps(ps.round().max(0.0) as u64).offset_by(shift))
}

pub fn measure_toa(cir: &Cir, method: ToaMethod) -> Result<SimTime, PhyError> {
    measure_toa_with(cir, method, &CirConfig::default())
}

/// The two independent arrival estimates of one received frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToaPair {
    pub toa_sts: SimTime,
    pub toa_phy: SimTime,
}

impl ToaPair {
    /// |toa_sts − toa_phy| in picoseconds.
    pub fn discrepancy_ps(&self) -> u64 {
        self.toa_sts.0.abs_diff(self.toa_phy.0)
    }
}

/// How receivers estimate arrival times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToaModel {
    /// Exact arrival on both timelines.
    Ideal,
    /// Independent zero-mean Gaussian error per timeline.
    Gaussian { sigma_ps: f64 },
    /// Two synthesized responses (STS and header) measured by leading edge.
    Cir { snr_db: f64 },
}

impl Default for ToaModel {
    fn default() -> Self {
        ToaModel::Gaussian { sigma_ps: 50.0 }
    }
}

impl ToaModel {
    /// Measures both timelines of a frame sent at `tx_time` over `distance`,
    /// then applies `shift`. Arrival estimates never precede `tx_time`.
    pub fn measure<R: Rng>(
        &self,
        tx_time: SimTime,
        distance: f64,
        signature: &ImpairmentSignature,
        shift: TimelineShift,
        rng: &mut R,
    ) -> Result<ToaPair, PhyError> {
        let true_toa = tx_time + propagation_delay(distance);
        let (sts, phy) = match self {
            ToaModel::Ideal => (true_toa, true_toa),
            ToaModel::Gaussian { sigma_ps } => {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (
                    true_toa.offset_by((a * sigma_ps).round() as i64),
                    true_toa.offset_by((b * sigma_ps).round() as i64),
                )
            }
            ToaModel::Cir { snr_db } => {
                let synth = CirSynthesizer::default();
                let d = distance.max(1e-3);
                let s1: u64 = rng.random();
                let s2: u64 = rng.random();
                let sts_cir = synth.synthesize(tx_time, d, signature, Some(*snr_db), s1)?;
                let phy_cir = synth.synthesize(tx_time, d, signature, Some(*snr_db), s2)?;
                (
                    measure_toa_with(&sts_cir, ToaMethod::Sts, &synth.config)?,
                    measure_toa_with(&phy_cir, ToaMethod::PhyHeader, &synth.config)?,
                )
            }
        };
        Ok(ToaPair {
            toa_sts: sts.offset_by(shift.sts_ps).max(tx_time),
            toa_phy: phy.offset_by(shift.phy_ps).max(tx_time),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Ghost early path on the STS timeline.
    StsAdvance,
    /// Late arrival forced on the header timeline.
    PhyDelay,
}

fn link_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

/// Attack hooks keyed by undirected link.
#[derive(Clone, Debug, Default)]
pub struct AttackInjector {
    known: BTreeSet<(NodeId, NodeId)>,
    active: BTreeMap<(NodeId, NodeId), TimelineShift>,
}

impl AttackInjector {
    pub fn new<I: IntoIterator<Item = (NodeId, NodeId)>>(links: I) -> Self {
        Self {
            known: links.into_iter().map(|(a, b)| link_key(a, b)).collect(),
            active: BTreeMap::new(),
        }
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId) {
        self.known.insert(link_key(a, b));
    }

    pub fn inject(&mut self, kind: AttackKind, magnitude_ns: f64, link: (NodeId, NodeId)) -> Result<(), PhyError> {
        if !(magnitude_ns > 0.0) {
            return Err(PhyError::NonPositiveMagnitude(magnitude_ns));
        }
        let key = link_key(link.0, link.1);
        if !self.known.contains(&key) {
            return Err(PhyError::UnknownLink(link.0, link.1));
        }
        let ps = (magnitude_ns * 1_000.0).round() as i64;
        let shift = self.active.entry(key).or_default();
        match kind {
            AttackKind::StsAdvance => shift.sts_ps -= ps,
            AttackKind::PhyDelay => shift.phy_ps += ps,
        }
        Ok(())
    }

    pub fn clear(&mut self, link: (NodeId, NodeId)) {
        self.active.remove(&link_key(link.0, link.1));
    }

    pub fn shift(&self, a: NodeId, b: NodeId) -> TimelineShift {
        self.active.get(&link_key(a, b)).copied().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_roundtrip_and_checksum() {
        let f = Frame::new(3, 9, 0xCAFE, 17, vec![1, 2, 3]).unwrap().with_sts();
        let bytes = f.encode();
        assert_eq!(bytes.len(), MAC_HEADER_LEN + 3);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[10] ^= 0x40;
        assert_eq!(Frame::decode(&bad), Err(PhyError::ChecksumMismatch));
    }

    #[test]
    fn payload_limit_is_116() {
        assert!(Frame::new(1, 2, 0, 0, vec![0; 116]).is_ok());
        assert_eq!(Frame::new(1, 2, 0, 0, vec![0; 117]), Err(PhyError::PayloadTooLarge(117)));
        assert_eq!(Frame::new(1, 2, 0, 0, vec![0; 116]).unwrap().encode().len(), 127);
    }

    #[test]
    fn same_inputs_same_cir() {
        let sig = ImpairmentSignature::from_device_seed(4);
        let a = synthesize_cir(7.5, &sig, Some(20.0), 99).unwrap();
        let b = synthesize_cir(7.5, &sig, Some(20.0), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_distance_halves_peak() {
        let sig = ImpairmentSignature::from_device_seed(11);
        let a = synthesize_cir(5.0, &sig, None, 1).unwrap();
        let b = synthesize_cir(10.0, &sig, None, 1).unwrap();
        let ratio = a.peak().1 / b.peak().1;
        assert!((ratio - 2.0).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn distinct_devices_differ_near_peak_only_by_shape() {
        let a = synthesize_cir(6.0, &ImpairmentSignature::from_device_seed(1), None, 5).unwrap();
        let b = synthesize_cir(6.0, &ImpairmentSignature::from_device_seed(2), None, 5).unwrap();
        let (p, _) = a.peak();
        assert_eq!(p, b.peak().0);
        let n = a.taps.len();
        let differs = (1..=8).any(|j| {
            let k = (p + j) % n;
            (a.taps[k] - b.taps[k]).norm() > 1e-6
        });
        assert!(differs);
    }

    #[test]
    fn signatures_are_fixed_per_seed() {
        assert_eq!(
            ImpairmentSignature::from_device_seed(8),
            ImpairmentSignature::from_device_seed(8)
        );
        assert_ne!(
            ImpairmentSignature::from_device_seed(8),
            ImpairmentSignature::from_device_seed(9)
        );
    }

    #[test]
    fn clean_ten_metre_toa_is_exact_on_both_timelines() {
        let sig = ImpairmentSignature::from_device_seed(3);
        let cir = synthesize_cir(10.0, &sig, None, 0).unwrap();
        for m in [ToaMethod::Sts, ToaMethod::PhyHeader] {
            let t = measure_toa(&cir, m).unwrap();
            assert!(t.0.abs_diff(cir.true_toa.0) <= 50, "{m:?}: {} vs {}", t.0, cir.true_toa.0);
        }
    }

    #[test]
    fn sts_advance_moves_only_sts() {
        let sig = ImpairmentSignature::from_device_seed(3);
        let mut inj = AttackInjector::new([(1, 2)]);
        inj.inject(AttackKind::StsAdvance, 10.0, (2, 1)).unwrap();
        let cir = synthesize_cir(10.0, &sig, None, 0).unwrap().with_shift(inj.shift(1, 2));
        let clean = synthesize_cir(10.0, &sig, None, 0).unwrap();
        let sts = measure_toa(&cir, ToaMethod::Sts).unwrap();
        let phy = measure_toa(&cir, ToaMethod::PhyHeader).unwrap();
        assert_eq!(sts.signed_diff(measure_toa(&clean, ToaMethod::Sts).unwrap()), -10_000);
        assert_eq!(phy, measure_toa(&clean, ToaMethod::PhyHeader).unwrap());
    }

    #[test]
    fn phy_delay_moves_only_header() {
        let mut inj = AttackInjector::new([(1, 2)]);
        inj.inject(AttackKind::PhyDelay, 5.0, (1, 2)).unwrap();
        assert_eq!(inj.shift(1, 2), TimelineShift { sts_ps: 0, phy_ps: 5_000 });
    }

    #[test]
    fn attack_on_unknown_link_or_nonpositive_magnitude() {
        let mut inj = AttackInjector::new([(1, 2)]);
        assert_eq!(inj.inject(AttackKind::PhyDelay, 1.0, (1, 3)), Err(PhyError::UnknownLink(1, 3)));
        assert!(matches!(
            inj.inject(AttackKind::PhyDelay, 0.0, (1, 2)),
            Err(PhyError::NonPositiveMagnitude(_))
        ));
    }

    #[test]
    fn zero_cir_is_undetectable() {
        let cir = Cir {
            taps: vec![Complex64::new(0.0, 0.0); 16],
            tap_spacing_ps: 1000,
            window_start: SimTime::ZERO,
            true_toa: SimTime::ZERO,
            shift: TimelineShift::default(),
        };
        assert_eq!(measure_toa(&cir, ToaMethod::Sts), Err(PhyError::Undetectable));
        assert_eq!(cir.validate(), Err(PhyError::InvalidCir));
    }

    #[test]
    fn nonpositive_distance_rejected() {
        let sig = ImpairmentSignature::IDEAL;
        assert!(matches!(synthesize_cir(0.0, &sig, None, 0), Err(PhyError::NonPositiveDistance(_))));
    }

    #[test]
    fn toa_model_clamps_to_transmit_time() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let shift = TimelineShift { sts_ps: -50_000, phy_ps: 0 };
        let pair = ToaModel::Ideal
            .measure(SimTime::from_us(1), 3.0, &ImpairmentSignature::IDEAL, shift, &mut r)
            .unwrap();
        assert_eq!(pair.toa_sts, SimTime::from_us(1));
        assert_eq!(pair.toa_phy, SimTime::from_us(1) + propagation_delay(3.0));
    }

    #[test]
    fn csv_export_has_one_row_per_tap() {
        let cir = synthesize_cir(4.0, &ImpairmentSignature::IDEAL, None, 0).unwrap();
        let csv = cir.to_csv();
        assert_eq!(csv.lines().count(), cir.taps.len() + 1);
        assert!(csv.starts_with("tap,real,imag\n0,"));
    }
}
