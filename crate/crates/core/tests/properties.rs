use proptest::prelude::*;

use sovereign_uwb::adaptation::{
    compress, decompress, fragment, Ipv6Header, ReassemblyOutcome, Reassembler, MAX_DATAGRAM_LEN,
};
use sovereign_uwb::mesh::{compute_routes, MeshPacket, TopologyGraph};
use sovereign_uwb::phy::{Frame, MAX_PAYLOAD_LEN};
use sovereign_uwb::secrecy::outage_quantile;

fn header() -> impl Strategy<Value = Ipv6Header> {
    (
        any::<u8>(),
        0u32..(1 << 20),
        any::<u16>(),
        any::<u8>(),
        any::<u8>(),
        any::<[u8; 16]>(),
        any::<[u8; 16]>(),
    )
        .prop_map(|(traffic_class, flow_label, payload_length, next_header, hop_limit, src, dst)| Ipv6Header {
            traffic_class,
            flow_label,
            payload_length,
            next_header,
            hop_limit,
            src,
            dst,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn header_roundtrip(h in header(), ls: u16, ld: u16) {
        let c = compress(&h, ls, ld);
        let (back, used) = decompress(c.as_bytes(), ls, ld, h.payload_length).unwrap();
        prop_assert_eq!(used, c.len());
        prop_assert_eq!(back.to_bytes(), h.to_bytes());
        prop_assert!(c.len() >= 3 && c.len() <= 41);
    }

    #[test]
    fn fragments_reassemble_in_any_order(
        d in prop::collection::vec(any::<u8>(), 1..=MAX_DATAGRAM_LEN),
        tag: u16,
        order in any::<prop::sample::Index>(),
    ) {
        let mut frags = fragment(&d, tag).unwrap();
        prop_assert!(frags.iter().all(|f| f.len() <= MAX_PAYLOAD_LEN));
        if d.len() <= 112 {
            prop_assert_eq!(frags, vec![d]);
            return Ok(());
        }
        let k = order.index(frags.len());
        frags.rotate_left(k);
        let last = frags.len() - 1;
        frags.swap(0, last);
        let mut r = Reassembler::default();
        let mut out = None;
        for f in &frags {
            if let ReassemblyOutcome::Complete(x) = r.insert(1, f, 0).unwrap() {
                out = Some(x);
            }
        }
        prop_assert_eq!(out, Some(d));
    }

    #[test]
    fn frame_roundtrip(src: u16, dst: u16, pan: u16, seq: u8, sts: bool,
                       payload in prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD_LEN)) {
        let mut f = Frame::new(src, dst, pan, seq, payload).unwrap();
        if sts { f = f.with_sts(); }
        let bytes = f.encode();
        prop_assert!(bytes.len() <= 127);
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn mesh_roundtrip(src: u16, dst: u16, seq: u16, payload in prop::collection::vec(any::<u8>(), 0..100)) {
        let p = MeshPacket::new(src, dst, seq, payload);
        prop_assert_eq!(MeshPacket::decode(&p.encode().unwrap()).unwrap(), p);
    }

    #[test]
    fn quantile_is_monotone_in_epsilon(mut s in prop::collection::vec(0.0f64..10.0, 1..400), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut t = s.clone();
        prop_assert!(outage_quantile(&mut s, lo) <= outage_quantile(&mut t, hi));
    }

    #[test]
    fn next_hops_never_loop(n in 2u16..14, edges in prop::collection::vec((0u16..14, 0u16..14, 1u8..=255), 0..40)) {
        let mut g = TopologyGraph::default();
        for v in 0..n {
            g.add_vertex(v, true);
        }
        for (a, b, q) in edges {
            if a < n && b < n && a != b {
                g.upsert_edge(a, b, q as f64 / 255.0, 0);
            }
        }
        let tables: Vec<_> = (0..n).map(|s| compute_routes(&g, s).unwrap()).collect();
        for src in 0..n {
            for dst in 0..n {
                if src == dst { continue; }
                let mut at = src;
                let mut steps = 0;
                while at != dst {
                    match tables[at as usize].next_hop(dst) {
                        Some(h) => at = h,
                        None => break,
                    }
                    steps += 1;
                    prop_assert!(steps <= n, "loop from {} to {}", src, dst);
                }
                let reachable = tables[src as usize].next_hop(dst).is_some();
                prop_assert_eq!(reachable, at == dst);
            }
        }
    }
}
