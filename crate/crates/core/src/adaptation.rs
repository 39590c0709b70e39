//! IPv6 over UWB frames: a compact header compression scheme and
//! fragmentation into MAC payloads.
//!
//! Compressed header layout:
//!
//! ```text
//! byte 0   dispatch 0x7A
//! byte 1   b7 TC elided | b6 FL elided | b5 NH is UDP | b4..3 HL code
//!          (00 inline, 01 = 1, 10 = 64, 11 = 255) | b2 zero
//!          | b1 src derived from link source | b0 dst derived from link dest
//! byte 2   b7..6 src mode | b5..4 dst mode | b3..0 zero
//!          mode 00 full 16 bytes, 01 fe80::/64 with 8-byte IID,
//!          10 fe80::ff:fe00:XXXX with 2 bytes
//! inline   TC(1) FL(3) NH(1) HL(1) src dst, each only when not elided
//! ```
//!
//! Fragment headers: FRAG1 `11000sss ssssssss tag(2)`, FRAGN
//! `11100sss ssssssss tag(2) offset(1)`, offset in 8-byte units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::NodeId;
use crate::phy::MAX_PAYLOAD_LEN;

pub const IPHC_DISPATCH: u8 = 0x7A;
pub const IPV6_HEADER_LEN: usize = 40;
pub const MIN_COMPRESSED_LEN: usize = 3;
pub const MAX_COMPRESSED_LEN: usize = 41;
pub const NH_UDP: u8 = 17;

pub const FRAG1_HEADER_LEN: usize = 4;
pub const FRAGN_HEADER_LEN: usize = 5;
const FRAG1_DISPATCH: u8 = 0b1100_0000;
const FRAGN_DISPATCH: u8 = 0b1110_0000;
/// Largest datagram expressible in the 11-bit size field.
pub const MAX_DATAGRAM_LEN: usize = 0x07FF;
pub const DEFAULT_REASSEMBLY_TIMEOUT: u64 = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdaptationError {
    #[error("IPv6 version must be 6, got {0}")]
    BadVersion(u8),
    #[error("unknown dispatch 0x{0:02X}")]
    UnknownDispatch(u8),
    #[error("compressed header truncated")]
    Truncated,
    #[error("reserved address mode")]
    ReservedMode,
    #[error("empty datagram")]
    EmptyDatagram,
    #[error("datagram of {0} bytes exceeds {MAX_DATAGRAM_LEN}")]
    DatagramTooLarge(usize),
    #[error("fragment capacity {0} too small")]
    CapacityTooSmall(usize),
    #[error("malformed fragment")]
    MalformedFragment,
    #[error("fragment overlaps inconsistent data")]
    InconsistentOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ipv6Header {
    pub traffic_class: u8,
    /// 20 significant bits.
    pub flow_label: u32,
    pub payload_length: u16,
    pub next_header: u8,
    pub hop_limit: u8,
    pub src: [u8; 16],
    pub dst: [u8; 16],
}

impl Ipv6Header {
    pub fn to_bytes(&self) -> [u8; IPV6_HEADER_LEN] {
        let mut b = [0u8; IPV6_HEADER_LEN];
        let word = (6u32 << 28) | ((self.traffic_class as u32) << 20) | (self.flow_label & 0xF_FFFF);
        b[0..4].copy_from_slice(&word.to_be_bytes());
        b[4..6].copy_from_slice(&self.payload_length.to_be_bytes());
        b[6] = self.next_header;
        b[7] = self.hop_limit;
        b[8..24].copy_from_slice(&self.src);
        b[24..40].copy_from_slice(&self.dst);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, AdaptationError> {
        if b.len() < IPV6_HEADER_LEN {
            return Err(AdaptationError::Truncated);
        }
        let word = u32::from_be_bytes(b[0..4].try_into().unwrap());
        let version = (word >> 28) as u8;
        if version != 6 {
            return Err(AdaptationError::BadVersion(version));
        }
        Ok(Self {
            traffic_class: (word >> 20) as u8,
            flow_label: word & 0xF_FFFF,
            payload_length: u16::from_be_bytes([b[4], b[5]]),
            next_header: b[6],
            hop_limit: b[7],
            src: b[8..24].try_into().unwrap(),
            dst: b[24..40].try_into().unwrap(),
        })
    }
}

/// `fe80::ff:fe00:XXXX` built from a 16-bit short address.
pub fn link_local_from_short(addr: NodeId) -> [u8; 16] {
    let mut a = [0u8; 16];
    a[0] = 0xFE;
    a[1] = 0x80;
    a[11] = 0xFF;
    a[12] = 0xFE;
    a[14..16].copy_from_slice(&addr.to_be_bytes());
    a
}

fn is_link_local_prefix(a: &[u8; 16]) -> bool {
    a[0] == 0xFE && a[1] == 0x80 && a[2..8].iter().all(|b| *b == 0)
}

#[derive(Clone, Copy)]
enum Mode {
    Full,
    Iid64,
    Short16,
}

fn address_mode(a: &[u8; 16]) -> Mode {
    if a[..8] == [0xFE, 0x80, 0, 0, 0, 0, 0, 0] && a[8..14] == [0, 0, 0, 0xFF, 0xFE, 0] {
        Mode::Short16
    } else if is_link_local_prefix(a) {
        Mode::Iid64
    } else {
        Mode::Full
    }
}

/// Compressed header bytes, dispatch first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompressedHeader(pub Vec<u8>);

impl CompressedHeader {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

pub fn compress(h: &Ipv6Header, link_src: NodeId, link_dst: NodeId) -> CompressedHeader {
    let mut flags = 0u8;
    let mut modes = 0u8;
    let mut inline = Vec::with_capacity(MAX_COMPRESSED_LEN);

    if h.traffic_class == 0 {
        flags |= 0x80;
    } else {
        inline.push(h.traffic_class);
    }
    let fl = h.flow_label & 0xF_FFFF;
    if fl == 0 {
        flags |= 0x40;
    } else {
        inline.extend_from_slice(&fl.to_be_bytes()[1..]);
    }
    if h.next_header == NH_UDP {
        flags |= 0x20;
    } else {
        inline.push(h.next_header);
    }
    match h.hop_limit {
        1 => flags |= 0b01 << 3,
        64 => flags |= 0b10 << 3,
        255 => flags |= 0b11 << 3,
        hl => inline.push(hl),
    }
    for (addr, link, flag, shift) in [(&h.src, link_src, 0x02u8, 6u8), (&h.dst, link_dst, 0x01, 4)] {
        if *addr == link_local_from_short(link) {
            flags |= flag;
            continue;
        }
        match address_mode(addr) {
            Mode::Full => inline.extend_from_slice(addr),
            Mode::Iid64 => {
                modes |= 0b01 << shift;
                inline.extend_from_slice(&addr[8..]);
            }
            Mode::Short16 => {
                modes |= 0b10 << shift;
                inline.extend_from_slice(&addr[14..]);
            }
        }
    }
    let mut out = Vec::with_capacity(3 + inline.len());
    out.push(IPHC_DISPATCH);
    out.push(flags);
    out.push(modes);
    out.extend_from_slice(&inline);
    CompressedHeader(out)
}

/// Inverse of [`compress`]. Returns the header and the number of bytes consumed.
pub fn decompress(
    bytes: &[u8],
    link_src: NodeId,
    link_dst: NodeId,
    payload_length: u16,
) -> Result<(Ipv6Header, usize), AdaptationError> {
    match bytes.first() {
        None => return Err(AdaptationError::Truncated),
        Some(&IPHC_DISPATCH) => {}
        Some(&d) => return Err(AdaptationError::UnknownDispatch(d)),
    }
    if bytes.len() < MIN_COMPRESSED_LEN {
        return Err(AdaptationError::Truncated);
    }
    let flags = bytes[1];
    let modes = bytes[2];
    if flags & 0x04 != 0 || modes & 0x0F != 0 {
        return Err(AdaptationError::ReservedMode);
    }
    let mut i = 3;
    let mut take = |n: usize| -> Result<&[u8], AdaptationError> {
        let s = bytes.get(i..i + n).ok_or(AdaptationError::Truncated)?;
        i += n;
        Ok(s)
    };
    let traffic_class = if flags & 0x80 != 0 { 0 } else { take(1)?[0] };
    let flow_label = if flags & 0x40 != 0 {
        0
    } else {
        let s = take(3)?;
        u32::from_be_bytes([0, s[0], s[1], s[2]])
    };
    let next_header = if flags & 0x20 != 0 { NH_UDP } else { take(1)?[0] };
    let hop_limit = match (flags >> 3) & 0b11 {
        0b01 => 1,
        0b10 => 64,
        0b11 => 255,
        _ => take(1)?[0],
    };
    let mut addrs = [[0u8; 16]; 2];
    for (k, (flag, shift, link)) in [(0x02u8, 6u8, link_src), (0x01, 4, link_dst)].into_iter().enumerate() {
        let mode = (modes >> shift) & 0b11;
        if flags & flag != 0 {
            if mode != 0 {
                return Err(AdaptationError::ReservedMode);
            }
            addrs[k] = link_local_from_short(link);
            continue;
        }
        addrs[k] = match mode {
            0b00 => take(16)?.try_into().unwrap(),
            0b01 => {
                let mut a = [0u8; 16];
                a[0] = 0xFE;
                a[1] = 0x80;
                a[8..].copy_from_slice(take(8)?);
                a
            }
            0b10 => {
                let mut a = link_local_from_short(0);
                a[14..].copy_from_slice(take(2)?);
                a
            }
            _ => return Err(AdaptationError::ReservedMode),
        };
    }
    let header = Ipv6Header {
        traffic_class,
        flow_label,
        payload_length,
        next_header,
        hop_limit,
        src: addrs[0],
        dst: addrs[1],
    };
    Ok((header, i))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentKind {
    Frag1,
    FragN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentHeader {
    pub kind: FragmentKind,
    pub datagram_size: u16,
    pub datagram_tag: u16,
    /// In 8-byte units; zero for FRAG1.
    pub offset: u8,
}

impl FragmentHeader {
    pub fn len(&self) -> usize {
        match self.kind {
            FragmentKind::Frag1 => FRAG1_HEADER_LEN,
            FragmentKind::FragN => FRAGN_HEADER_LEN,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        let d = match self.kind {
            FragmentKind::Frag1 => FRAG1_DISPATCH,
            FragmentKind::FragN => FRAGN_DISPATCH,
        };
        out.push(d | ((self.datagram_size >> 8) as u8 & 0x07));
        out.push(self.datagram_size as u8);
        out.extend_from_slice(&self.datagram_tag.to_be_bytes());
        if self.kind == FragmentKind::FragN {
            out.push(self.offset);
        }
    }

    /// Parses a fragment header; `None` when `b` is not a fragment.
    pub fn decode(b: &[u8]) -> Option<Result<(Self, &[u8]), AdaptationError>> {
        let first = *b.first()?;
        let kind = match first & 0xF8 {
            FRAG1_DISPATCH => FragmentKind::Frag1,
            FRAGN_DISPATCH => FragmentKind::FragN,
            _ => return None,
        };
        let hl = if kind == FragmentKind::Frag1 {
            FRAG1_HEADER_LEN
        } else {
            FRAGN_HEADER_LEN
        };
        if b.len() <= hl {
            return Some(Err(AdaptationError::MalformedFragment));
        }
        let h = Self {
            kind,
            datagram_size: (((first & 0x07) as u16) << 8) | b[1] as u16,
            datagram_tag: u16::from_be_bytes([b[2], b[3]]),
            offset: if kind == FragmentKind::FragN { b[4] } else { 0 },
        };
        Some(Ok((h, &b[hl..])))
    }
}

pub fn is_fragment(payload: &[u8]) -> bool {
    matches!(payload.first().map(|b| b & 0xF8), Some(FRAG1_DISPATCH | FRAGN_DISPATCH))
}

/// Splits `datagram` into MAC payloads of at most [`MAX_PAYLOAD_LEN`] bytes.
pub fn fragment(datagram: &[u8], tag: u16) -> Result<Vec<Vec<u8>>, AdaptationError> {
    fragment_with_capacity(datagram, tag, MAX_PAYLOAD_LEN)
}

/// As [`fragment`] with payloads of at most `capacity` bytes. A datagram
/// no longer than the first fragment's data would be is returned whole,
/// without a fragment header.
pub fn fragment_with_capacity(datagram: &[u8], tag: u16, capacity: usize) -> Result<Vec<Vec<u8>>, AdaptationError> {
    if datagram.is_empty() {
        return Err(AdaptationError::EmptyDatagram);
    }
    if datagram.len() > MAX_DATAGRAM_LEN {
        return Err(AdaptationError::DatagramTooLarge(datagram.len()));
    }
    let first = (capacity.saturating_sub(FRAG1_HEADER_LEN) / 8) * 8;
    let rest = (capacity.saturating_sub(FRAGN_HEADER_LEN) / 8) * 8;
    if first == 0 || rest == 0 {
        return Err(AdaptationError::CapacityTooSmall(capacity));
    }
    if datagram.len() <= first {
        return Ok(vec![datagram.to_vec()]);
    }
    let size = datagram.len() as u16;
    let mut out = Vec::new();
    let mut f = Vec::with_capacity(capacity);
    FragmentHeader {
        kind: FragmentKind::Frag1,
        datagram_size: size,
        datagram_tag: tag,
        offset: 0,
    }
    .encode(&mut f);
    f.extend_from_slice(&datagram[..first]);
    out.push(f);
    let mut pos = first;
    while pos < datagram.len() {
        let end = (pos + rest).min(datagram.len());
        let mut f = Vec::with_capacity(capacity);
        FragmentHeader {
            kind: FragmentKind::FragN,
            datagram_size: size,
            datagram_tag: tag,
            offset: (pos / 8) as u8,
        }
        .encode(&mut f);
        f.extend_from_slice(&datagram[pos..end]);
        out.push(f);
        pos = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReassemblyOutcome {
    Pending,
    Complete(Vec<u8>),
    Duplicate,
}

#[derive(Clone, Debug)]
struct Partial {
    data: Vec<u8>,
    covered: Vec<bool>,
    remaining: usize,
    started: u64,
}

/// Per-(source, tag, size) reassembly buffers of one receiver.
#[derive(Clone, Debug)]
pub struct Reassembler {
    timeout_superframes: u64,
    buffers: BTreeMap<(NodeId, u16, u16), Partial>,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(DEFAULT_REASSEMBLY_TIMEOUT)
    }
}

impl Reassembler {
    pub fn new(timeout_superframes: u64) -> Self {
        Self {
            timeout_superframes,
            buffers: BTreeMap::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.buffers.len()
    }

    /// Adds one fragment received at superframe `now`. Inconsistent overlap
    /// discards the whole buffer.
    pub fn insert(&mut self, src: NodeId, fragment: &[u8], now: u64) -> Result<ReassemblyOutcome, AdaptationError> {
        let (h, body) = FragmentHeader::decode(fragment).ok_or(AdaptationError::MalformedFragment)??;
        let size = h.datagram_size as usize;
        let start = h.offset as usize * 8;
        if size == 0 || start + body.len() > size {
            return Err(AdaptationError::MalformedFragment);
        }
        let key = (src, h.datagram_tag, h.datagram_size);
        let p = self.buffers.entry(key).or_insert_with(|| Partial {
            data: vec![0; size],
            covered: vec![false; size],
            remaining: size,
            started: now,
        });
        let mut fresh = 0;
        for (k, byte) in body.iter().enumerate() {
            let i = start + k;
            if p.covered[i] {
                if p.data[i] != *byte {
                    self.buffers.remove(&key);
                    return Err(AdaptationError::InconsistentOverlap);
                }
            } else {
                fresh += 1;
            }
        }
        if fresh == 0 {
            return Ok(ReassemblyOutcome::Duplicate);
        }
        for (k, byte) in body.iter().enumerate() {
            let i = start + k;
            if !p.covered[i] {
                p.covered[i] = true;
                p.data[i] = *byte;
                p.remaining -= 1;
            }
        }
        if p.remaining == 0 {
            let p = self.buffers.remove(&key).unwrap();
            return Ok(ReassemblyOutcome::Complete(p.data));
        }
        Ok(ReassemblyOutcome::Pending)
    }

    /// Drops buffers older than the timeout; returns their keys.
    pub fn expire(&mut self, now: u64) -> Vec<(NodeId, u16, u16)> {
        let t = self.timeout_superframes;
        let dead: Vec<_> = self
            .buffers
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.started) >= t)
            .map(|(k, _)| *k)
            .collect();
        for k in &dead {
            self.buffers.remove(k);
        }
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn best_case() -> Ipv6Header {
        Ipv6Header {
            traffic_class: 0,
            flow_label: 0,
            payload_length: 8,
            next_header: NH_UDP,
            hop_limit: 64,
            src: link_local_from_short(0x0102),
            dst: link_local_from_short(0x0304),
        }
    }

    #[test]
    fn header_serializes_to_forty_bytes() {
        let h = best_case();
        let b = h.to_bytes();
        assert_eq!(b[0] >> 4, 6);
        assert_eq!(Ipv6Header::from_bytes(&b), Ok(h));
        let mut v4 = b;
        v4[0] = 0x45;
        assert_eq!(Ipv6Header::from_bytes(&v4), Err(AdaptationError::BadVersion(4)));
    }

    #[test]
    fn best_case_is_three_bytes() {
        let c = compress(&best_case(), 0x0102, 0x0304);
        assert_eq!(c.len(), 3);
        let (h, used) = decompress(c.as_bytes(), 0x0102, 0x0304, 8).unwrap();
        assert_eq!((h, used), (best_case(), 3));
    }

    #[test]
    fn worst_case_is_forty_one_bytes() {
        let mut h = best_case();
        h.traffic_class = 0x2E;
        h.flow_label = 0x12345;
        h.hop_limit = 63;
        h.next_header = 58;
        h.src = [0x20, 0x01, 0x0d, 0xb8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        h.dst = [0x20, 0x01, 0x0d, 0xb8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2];
        let c = compress(&h, 1, 2);
        assert_eq!(c.len(), 41);
        assert_eq!(decompress(c.as_bytes(), 1, 2, 8).unwrap().0, h);
    }

    #[test]
    fn decompress_errors() {
        let mut c = compress(&best_case(), 0x0102, 0x0304).0;
        assert_eq!(decompress(&c[..2], 1, 2, 0), Err(AdaptationError::Truncated));
        c[0] = 0x41;
        assert_eq!(decompress(&c, 1, 2, 0), Err(AdaptationError::UnknownDispatch(0x41)));
    }

    #[test]
    fn link_local_modes() {
        let mut h = best_case();
        h.src = link_local_from_short(0x0BEE);
        h.dst = [0xFE, 0x80, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8];
        let c = compress(&h, 0x0102, 0x0304);
        assert_eq!(c.len(), 3 + 2 + 8);
        assert_eq!(decompress(c.as_bytes(), 0x0102, 0x0304, 8).unwrap().0, h);
    }

    #[test]
    fn fragment_sizes() {
        let d: Vec<u8> = (0..1280u32).map(|i| i as u8).collect();
        let f = fragment(&d, 7).unwrap();
        assert_eq!(f.len(), 13);
        assert_eq!(f[0].len() - FRAG1_HEADER_LEN, 112);
        assert!(f[1..12].iter().all(|x| x.len() - FRAGN_HEADER_LEN == 104));
        assert_eq!(f[12].len() - FRAGN_HEADER_LEN, 24);
        assert!(f.iter().all(|x| x.len() <= MAX_PAYLOAD_LEN));
        assert_eq!(fragment(&[0; 100], 1).unwrap(), vec![vec![0; 100]]);
        let two = fragment(&[1; 113], 1).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].len() - FRAGN_HEADER_LEN, 1);
        assert_eq!(fragment(&[], 1), Err(AdaptationError::EmptyDatagram));
    }

    #[test]
    fn reassembly_reversed_with_duplicates() {
        let d: Vec<u8> = (0..1280u32).map(|i| (i * 7) as u8).collect();
        let frags = fragment(&d, 42).unwrap();
        let mut r = Reassembler::default();
        assert_eq!(r.insert(5, &frags[3], 0), Ok(ReassemblyOutcome::Pending));
        assert_eq!(r.insert(5, &frags[3], 0), Ok(ReassemblyOutcome::Duplicate));
        let mut out = None;
        for f in frags.iter().rev() {
            if let Ok(ReassemblyOutcome::Complete(v)) = r.insert(5, f, 1) {
                out = Some(v);
            }
        }
        assert_eq!(out, Some(d));
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn lost_fragment_expires() {
        let d = vec![9u8; 1280];
        let frags = fragment(&d, 1).unwrap();
        let mut r = Reassembler::default();
        for (i, f) in frags.iter().enumerate() {
            if i != 7 {
                assert_eq!(r.insert(2, f, 3), Ok(ReassemblyOutcome::Pending));
            }
        }
        assert!(r.expire(22).is_empty());
        assert_eq!(r.expire(23).len(), 1);
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn inconsistent_overlap_discards() {
        let d = vec![1u8; 300];
        let frags = fragment(&d, 3).unwrap();
        let mut r = Reassembler::default();
        r.insert(1, &frags[1], 0).unwrap();
        let mut bad = frags[1].clone();
        *bad.last_mut().unwrap() = 2;
        assert_eq!(r.insert(1, &bad, 0), Err(AdaptationError::InconsistentOverlap));
        assert_eq!(r.pending(), 0);
    }
}
