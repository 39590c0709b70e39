//! Runs the shipped 40-node, 3-zone scenario and prints its metrics.

use sovereign_uwb::network::{parse_config, run_scenario};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/reference.json").to_string());
    let text = std::fs::read_to_string(&path).expect("read scenario");
    let cfg = parse_config(&text).expect("valid scenario");
    let out = run_scenario(cfg).expect("runnable scenario");
    if let Some(e) = &out.error {
        eprintln!("{e}");
    }
    print!("{}", out.metrics.to_json());
    if std::env::var_os("SHOW_TRACE").is_some() {
        print!("{}", out.trace);
    }
}
