//! Secrecy-outage map of a room served by two access points, drawn as ASCII.

use sovereign_uwb::network::parse_config;
use sovereign_uwb::secrecy::build_map;

fn main() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/secrecy_room.json")).unwrap();
    let cfg = parse_config(&text).expect("config");
    let scen = cfg.secrecy.as_ref().expect("secrecy section");
    let map = build_map(scen, &cfg.propagation, cfg.seed, None).expect("map");
    let shades = [' ', '.', ':', '+', '#'];
    for iy in (0..map.ny).rev() {
        let row: String = (0..map.nx)
            .map(|ix| shades[map.cells[iy * map.nx + ix].level.min(4) as usize])
            .collect();
        println!("|{row}|");
    }
    let best = map.cells.iter().map(|c| c.rate).fold(0.0, f64::max);
    println!("levels ' .:+#' by rate; epsilon {}, best cell {best:.2} bit/s/Hz", map.epsilon);
}
