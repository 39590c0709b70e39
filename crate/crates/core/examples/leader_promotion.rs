//! The zone leader dies; the longest-running full member takes over.

use sovereign_uwb::network::{parse_config, run_scenario};

fn main() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/promotion.json")).unwrap();
    let out = run_scenario(parse_config(&text).expect("config")).expect("valid");
    for line in out.trace.lines() {
        if ["kill", "leader_lost", "promote", "adopt_leader", "alarm"]
            .iter()
            .any(|k| line.split('\t').nth(2) == Some(k))
        {
            println!("{line}");
        }
    }
    println!("delivery ratio {:.4}", out.metrics.delivery_ratio);
}
