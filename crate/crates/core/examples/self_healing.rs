//! A forwarder dies mid-run; the flow is rerouted through the other branch.

use sovereign_uwb::network::{parse_config, run_scenario};

fn main() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/diamond.json")).unwrap();
    let out = run_scenario(parse_config(&text).expect("config")).expect("valid");
    for line in out.trace.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let interesting = matches!(f[2], "kill" | "link_down" | "drop")
            || (f[2] == "fwd" && f[1] == "1" && line.contains("next=3"));
        if interesting {
            println!("{line}");
            if f[2] == "fwd" {
                break;
            }
        }
    }
    println!("delivery ratio {:.4}", out.metrics.delivery_ratio);
}
