//! Key policy enforcement and CIR fingerprinting: preprocessing, a
//! template-deviation embedding, enrollment anchors and re-identification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{NodeId, SimTime};
use crate::phy::{Cir, CirConfig};
use crate::ranging::RangeResult;

pub const DEFAULT_PEAK_INDEX: usize = 32;
pub const EMBEDDING_DIM: usize = 64;
const HALF_WINDOW: usize = 16;
pub const MIN_ENROLLMENT_SAMPLES: usize = 10;
pub const DEFAULT_RFF_THRESHOLD: f64 = 0.9;
/// A range proof older than this many superframes no longer counts.
pub const PROOF_FRESHNESS_SUPERFRAMES: u64 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SecurityError {
    #[error("CIR has no nonzero tap")]
    AllZero,
    #[error("enrollment needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("registry line {line}: {msg}")]
    Registry { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyPolicy {
    pub max_distance_m: f64,
    pub max_frames_per_superframe: u32,
    pub rff_required: bool,
    pub rff_threshold: f64,
}

impl Default for KeyPolicy {
    fn default() -> Self {
        Self {
            max_distance_m: 10.0,
            max_frames_per_superframe: 100,
            rff_required: true,
            rff_threshold: DEFAULT_RFF_THRESHOLD,
        }
    }
}

impl KeyPolicy {
    pub fn validate(&self) -> Result<(), SecurityError> {
        if !(self.max_distance_m > 0.0) {
            return Err(SecurityError::InvalidPolicy("max_distance_m must be positive"));
        }
        if self.max_frames_per_superframe < 1 {
            return Err(SecurityError::InvalidPolicy("max_frames_per_superframe must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.rff_threshold) {
            return Err(SecurityError::InvalidPolicy("rff_threshold must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Normalized, peak-centred CIR.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedCir {
    pub taps: Vec<Complex64>,
    pub peak: usize,
}

/// Divides every tap by the peak magnitude and rotates the taps circularly
/// so the peak lands at `p`.
pub fn preprocess_cir_at(raw: &Cir, p: usize) -> Result<ProcessedCir, SecurityError> {
    let n = raw.taps.len();
    let (peak, mag) = raw.peak();
    if n == 0 || !(mag > 0.0) || !mag.is_finite() {
        return Err(SecurityError::AllZero);
    }
    let shift = (p + n - peak % n) % n;
    let mut taps = vec![Complex64::new(0.0, 0.0); n];
    for (i, t) in raw.taps.iter().enumerate() {
        taps[(i + shift) % n] = t / mag;
    }
    Ok(ProcessedCir { taps, peak: p % n })
}

pub fn preprocess_cir(raw: &Cir) -> Result<ProcessedCir, SecurityError> {
    preprocess_cir_at(raw, DEFAULT_PEAK_INDEX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintEmbedding(pub Vec<f64>);

impl FingerprintEmbedding {
    /// First basis vector; stands in for an impairment-free response.
    pub fn fallback() -> Self {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = 1.0;
        Self(v)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm())
    }

    fn normalized(v: Vec<f64>) -> Self {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            Self::fallback()
        } else {
            Self(v.into_iter().map(|x| x / n).collect())
        }
    }
}

/// 32 magnitude deviations from the ideal template followed by 32 quadrature
/// phase deviations relative to the peak, over taps `P-16 .. P+15`.
pub fn extract_embedding(p: &ProcessedCir) -> FingerprintEmbedding {
    extract_embedding_with(p, &CirConfig::default())
}

pub fn extract_embedding_with(p: &ProcessedCir, config: &CirConfig) -> FingerprintEmbedding {
    let n = p.taps.len();
    let template = CirConfig {
        taps: n,
        ..config.clone()
    }
    .template_magnitudes(p.peak);
    let reference = p.taps[p.peak];
    let unit = if reference.norm() > 0.0 {
        reference.conj() / reference.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    let mut v = Vec::with_capacity(EMBEDDING_DIM);
    let window: Vec<usize> = (0..2 * HALF_WINDOW)
        .map(|j| (p.peak + n + j - HALF_WINDOW) % n)
        .collect();
    for &k in &window {
        v.push(p.taps[k].norm() - template[k]);
    }
    for &k in &window {
        v.push((p.taps[k] * unit).im);
    }
    FingerprintEmbedding::normalized(v)
}

/// Raw CIR to embedding.
pub fn fingerprint(raw: &Cir) -> Result<FingerprintEmbedding, SecurityError> {
    Ok(extract_embedding(&preprocess_cir(raw)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRecord {
    pub device: NodeId,
    pub anchor: FingerprintEmbedding,
    pub enrolled_at: SimTime,
    pub samples: usize,
}

/// Anchor = normalized mean of at least [`MIN_ENROLLMENT_SAMPLES`] embeddings.
pub fn enroll(device: NodeId, embeddings: &[FingerprintEmbedding], at: SimTime) -> Result<EnrollmentRecord, SecurityError> {
    if embeddings.len() < MIN_ENROLLMENT_SAMPLES {
        return Err(SecurityError::TooFewSamples {
            needed: MIN_ENROLLMENT_SAMPLES,
            got: embeddings.len(),
        });
    }
    let mut mean = vec![0.0; EMBEDDING_DIM];
    for e in embeddings {
        for (m, x) in mean.iter_mut().zip(&e.0) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= embeddings.len() as f64;
    }
    Ok(EnrollmentRecord {
        device,
        anchor: FingerprintEmbedding::normalized(mean),
        enrolled_at: at,
        samples: embeddings.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffVerdict {
    pub accept: bool,
    pub similarity: f64,
}

pub fn reidentify(query: &FingerprintEmbedding, record: &EnrollmentRecord, threshold: f64) -> RffVerdict {
    let similarity = query.cosine(&record.anchor);
    RffVerdict {
        accept: similarity >= threshold,
        similarity,
    }
}

/// Node-local store of enrollment anchors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    pub records: BTreeMap<NodeId, EnrollmentRecord>,
}

impl Registry {
    pub fn insert(&mut self, r: EnrollmentRecord) {
        self.records.insert(r.device, r);
    }

    pub fn get(&self, device: NodeId) -> Option<&EnrollmentRecord> {
        self.records.get(&device)
    }

    /// One line per device: id then the 64 anchor components.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in self.records.values() {
            let _ = write!(s, "{}", r.device);
            for x in &r.anchor.0 {
                let _ = write!(s, ",{x:.17e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SecurityError> {
        let mut reg = Registry::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |msg: String| SecurityError::Registry { line: i + 1, msg };
            let mut parts = line.split(',');
            let device: NodeId = parts
                .next()
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| err(format!("device id: {e}")))?;
            let v: Vec<f64> = parts
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(format!("component: {e}")))?;
            if v.len() != EMBEDDING_DIM {
                return Err(err(format!("expected {EMBEDDING_DIM} components, got {}", v.len())));
            }
            reg.insert(EnrollmentRecord {
                device,
                anchor: FingerprintEmbedding(v),
                enrolled_at: SimTime::ZERO,
                samples: MIN_ENROLLMENT_SAMPLES,
            });
        }
        Ok(reg)
    }
}

/// A valid range measurement usable for proximity checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityProof {
    pub distance_m: f64,
    pub superframe: u64,
}

impl ProximityProof {
    /// `None` for invalidated results.
    pub fn from_result(r: &RangeResult, superframe: u64) -> Option<Self> {
        (r.valid && r.distance_m.is_finite()).then_some(Self {
            distance_m: r.distance_m,
            superframe,
        })
    }

    pub fn is_fresh(&self, now: u64) -> bool {
        now.saturating_sub(self.superframe) <= PROOF_FRESHNESS_SUPERFRAMES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoProofOfProximity,
    Proximity,
    Rate,
    Rff,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoProofOfProximity => "no-proof-of-proximity",
            DenyReason::Proximity => "proximity",
            DenyReason::Rate => "rate",
            DenyReason::Rff => "rff",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

/// Stateless policy check. `measured_distance` must come from a valid range.
pub fn enforce_policy(
    policy: &KeyPolicy,
    measured_distance: Option<f64>,
    frames_this_superframe: u32,
    rff: Option<RffVerdict>,
) -> Decision {
    let Some(d) = measured_distance else {
        return Decision::Deny(DenyReason::NoProofOfProximity);
    };
    if d > policy.max_distance_m {
        return Decision::Deny(DenyReason::Proximity);
    }
    if policy.rff_required && !rff.is_some_and(|v| v.accept) {
        return Decision::Deny(DenyReason::Rff);
    }
    if frames_this_superframe >= policy.max_frames_per_superframe {
        return Decision::Deny(DenyReason::Rate);
    }
    Decision::Allow
}

/// Per-link policy state: freshest proof, RFF verdict and a token bucket
/// refilled to the budget at every superframe.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkGuard {
    pub proof: Option<ProximityProof>,
    pub rff: Option<RffVerdict>,
    superframe: u64,
    used: u32,
}

impl LinkGuard {
    pub fn record_range(&mut self, r: &RangeResult, superframe: u64) {
        if let Some(p) = ProximityProof::from_result(r, superframe) {
            self.proof = Some(p);
        }
    }

    /// Checks one frame and consumes a token when allowed.
    pub fn admit(&mut self, policy: &KeyPolicy, superframe: u64) -> Decision {
        if superframe != self.superframe {
            self.superframe = superframe;
            self.used = 0;
        }
        let d = self.proof.filter(|p| p.is_fresh(superframe)).map(|p| p.distance_m);
        let decision = enforce_policy(policy, d, self.used, self.rff);
        if decision == Decision::Allow {
            self.used += 1;
        }
        decision
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::{synthesize_cir, ImpairmentSignature};
    use crate::ranging::{InvalidationReason, MessageKind};

    fn cir(seed: u64) -> Cir {
        synthesize_cir(8.0, &ImpairmentSignature::from_device_seed(seed), None, seed + 100).unwrap()
    }

    #[test]
    fn scaling_does_not_change_processing() {
        let c = cir(1);
        let a = preprocess_cir(&c).unwrap();
        let b = preprocess_cir(&c.scaled(3.0)).unwrap();
        for (x, y) in a.taps.iter().zip(&b.taps) {
            assert!((x - y).norm() < 1e-12);
        }
        let ea = extract_embedding(&a);
        let eb = extract_embedding(&b);
        assert!(ea.0.iter().zip(&eb.0).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn peak_moves_to_p() {
        let mut taps = vec![Complex64::new(0.0, 0.0); 128];
        taps[12] = Complex64::new(2.0, 0.0);
        taps[13] = Complex64::new(1.0, 0.0);
        let raw = Cir::new(taps, 1000, SimTime::ZERO, SimTime::ZERO).unwrap();
        let p = preprocess_cir(&raw).unwrap();
        assert_eq!(p.peak, 32);
        assert_eq!(p.taps[32], Complex64::new(1.0, 0.0));
        assert_eq!(p.taps[33], Complex64::new(0.5, 0.0));

        let mut unit = vec![Complex64::new(0.0, 0.0); 128];
        unit[32] = Complex64::new(1.0, 0.0);
        unit[40] = Complex64::new(0.0, 0.25);
        let raw = Cir::new(unit.clone(), 1000, SimTime::ZERO, SimTime::ZERO).unwrap();
        assert_eq!(preprocess_cir(&raw).unwrap().taps, unit);
    }

    #[test]
    fn all_zero_rejected() {
        let raw = Cir {
            taps: vec![Complex64::new(0.0, 0.0); 8],
            tap_spacing_ps: 1000,
            window_start: SimTime::ZERO,
            true_toa: SimTime::ZERO,
            shift: Default::default(),
        };
        assert_eq!(preprocess_cir(&raw), Err(SecurityError::AllZero));
    }

    #[test]
    fn ideal_pulse_maps_to_fallback() {
        let c = synthesize_cir(5.0, &ImpairmentSignature::IDEAL, None, 3).unwrap();
        assert_eq!(fingerprint(&c).unwrap(), FingerprintEmbedding::fallback());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let a = fingerprint(&cir(5)).unwrap();
        assert_eq!(a, fingerprint(&cir(5)).unwrap());
        assert_eq!(a.0.len(), EMBEDDING_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn enrollment_rules() {
        let e = fingerprint(&cir(2)).unwrap();
        let r = enroll(2, &vec![e.clone(); 10], SimTime::ZERO).unwrap();
        assert!(r.anchor.0.iter().zip(&e.0).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(
            enroll(2, &vec![e.clone(); 9], SimTime::ZERO),
            Err(SecurityError::TooFewSamples { needed: 10, got: 9 })
        );
        let v = reidentify(&e, &r, 0.9);
        assert!(v.accept && (v.similarity - 1.0).abs() < 1e-12);
        let mut orth = vec![0.0; EMBEDDING_DIM];
        let (i, _) = r.anchor.0.iter().enumerate().fold((0, f64::MAX), |b, (i, x)| {
            if x.abs() < b.1 {
                (i, x.abs())
            } else {
                b
            }
        });
        orth[i] = 1.0;
        let mut o = FingerprintEmbedding(orth);
        let dot: f64 = o.0.iter().zip(&r.anchor.0).map(|(a, b)| a * b).sum();
        for (x, a) in o.0.iter_mut().zip(&r.anchor.0) {
            *x -= dot * a;
        }
        let v = reidentify(&o, &r, 0.9);
        assert!(!v.accept && v.similarity.abs() < 1e-12);
    }

    #[test]
    fn registry_text_roundtrip() {
        let mut reg = Registry::default();
        let e = fingerprint(&cir(8)).unwrap();
        reg.insert(enroll(8, &vec![e; 10], SimTime::ZERO).unwrap());
        let back = Registry::from_text(&reg.to_text()).unwrap();
        assert_eq!(back.get(8).unwrap().anchor, reg.get(8).unwrap().anchor);
        assert!(matches!(Registry::from_text("1,2,3"), Err(SecurityError::Registry { line: 1, .. })));
    }

    #[test]
    fn policy_examples() {
        let p = KeyPolicy::default();
        let ok = Some(RffVerdict {
            accept: true,
            similarity: 0.97,
        });
        assert_eq!(enforce_policy(&p, Some(5.0), 0, ok), Decision::Allow);
        assert_eq!(enforce_policy(&p, Some(15.0), 0, ok), Decision::Deny(DenyReason::Proximity));
        assert_eq!(enforce_policy(&p, Some(5.0), 100, ok), Decision::Deny(DenyReason::Rate));
        assert_eq!(enforce_policy(&p, None, 0, ok), Decision::Deny(DenyReason::NoProofOfProximity));
        let bad = Some(RffVerdict {
            accept: false,
            similarity: 0.2,
        });
        assert_eq!(enforce_policy(&p, Some(5.0), 0, bad), Decision::Deny(DenyReason::Rff));
        assert!(KeyPolicy {
            max_distance_m: 0.0,
            ..p.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn invalidated_ranges_give_no_proof() {
        let bad = RangeResult::invalid(InvalidationReason::ToaMismatch {
            message: MessageKind::Init,
            discrepancy_ns: 10.0,
        });
        let mut g = LinkGuard::default();
        g.record_range(&bad, 1);
        assert_eq!(g.proof, None);
        assert_eq!(
            g.admit(&KeyPolicy::default(), 1),
            Decision::Deny(DenyReason::NoProofOfProximity)
        );
    }

    #[test]
    fn bucket_refills_each_superframe_and_proofs_go_stale() {
        let p = KeyPolicy {
            max_frames_per_superframe: 3,
            rff_required: false,
            ..KeyPolicy::default()
        };
        let mut g = LinkGuard::default();
        g.record_range(&RangeResult::from_tof(10.0), 0);
        let allowed = |g: &mut LinkGuard, sf| (0..5).filter(|_| g.admit(&p, sf) == Decision::Allow).count();
        assert_eq!(allowed(&mut g, 0), 3);
        assert_eq!(allowed(&mut g, 1), 3);
        assert_eq!(allowed(&mut g, 11), 0);
    }
}
