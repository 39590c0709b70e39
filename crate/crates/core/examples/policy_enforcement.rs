//! Key policy gating smart devices: proximity, fingerprint and slot ownership.

use sovereign_uwb::network::{parse_config, run_scenario};

fn main() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/security.json")).unwrap();
    let out = run_scenario(parse_config(&text).expect("config")).expect("valid");
    let mut shown = std::collections::BTreeSet::new();
    for line in out.trace.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let key = (f[1].to_string(), f[2].to_string());
        if ["associate", "associate_reject", "policy_deny", "violation", "attack"].contains(&f[2]) && shown.insert(key) {
            println!("{line}");
        }
    }
    let m = &out.metrics;
    println!("denials by reason: {:?}", m.policy_denials);
    println!("slot violations {}, attack detections {}", m.slot_violations, m.attack_detections);
}
