//! Header compression for link-local traffic and fragmentation of a
//! minimum-MTU datagram, reassembled out of order.

use sovereign_uwb::adaptation::{
    compress, decompress, fragment, link_local_from_short, Ipv6Header, ReassemblyOutcome, Reassembler,
};

fn main() {
    let h = Ipv6Header {
        traffic_class: 0,
        flow_label: 0,
        payload_length: 8,
        next_header: 17,
        hop_limit: 64,
        src: link_local_from_short(0x11),
        dst: link_local_from_short(0x22),
    };
    let c = compress(&h, 0x11, 0x22);
    let (back, used) = decompress(c.as_bytes(), 0x11, 0x22, h.payload_length).expect("decompress");
    println!("40-byte header -> {} bytes, round trip exact: {}", used, back == h);

    let datagram: Vec<u8> = (0..1280u32).map(|i| (i * 7) as u8).collect();
    let mut frags = fragment(&datagram, 0x0BEE).expect("fragment");
    println!("1280-byte datagram -> {} fragments of at most {} bytes", frags.len(), frags.iter().map(Vec::len).max().unwrap());
    frags.reverse();
    let mut r = Reassembler::default();
    for f in &frags {
        if let ReassemblyOutcome::Complete(d) = r.insert(0x11, f, 0).expect("insert") {
            println!("reassembled in reverse order, identical: {}", d == datagram);
        }
    }
}
