//! Enrol five devices from noisy channel captures and re-identify fresh ones.

use sovereign_uwb::phy::{synthesize_cir, ImpairmentSignature};
use sovereign_uwb::security::{enroll, fingerprint, reidentify, DEFAULT_RFF_THRESHOLD};

fn main() {
    let sig = |d: u64| ImpairmentSignature::from_device_seed(0xD0 + d);
    let records: Vec<_> = (0..5u64)
        .map(|d| {
            let embs: Vec<_> = (0..10)
                .map(|k| fingerprint(&synthesize_cir(5.0, &sig(d), Some(20.0), 100 * d + k).unwrap()).unwrap())
                .collect();
            enroll(d as u16, &embs, Default::default()).unwrap()
        })
        .collect();

    for d in 0..5u64 {
        let q = fingerprint(&synthesize_cir(8.0, &sig(d), Some(20.0), 9_000 + d).unwrap()).unwrap();
        let verdicts: Vec<_> = records.iter().map(|r| reidentify(&q, r, DEFAULT_RFF_THRESHOLD)).collect();
        let row: Vec<String> = verdicts
            .iter()
            .map(|v| format!("{:5.2}{}", v.similarity, if v.accept { "*" } else { " " }))
            .collect();
        let pick = verdicts
            .iter()
            .enumerate()
            .filter(|(_, v)| v.accept)
            .max_by(|a, b| a.1.similarity.total_cmp(&b.1.similarity))
            .map(|(i, _)| i.to_string())
            .unwrap_or_else(|| "none".into());
        println!("capture of device {d}: {}  -> {pick}", row.join(" "));
    }
    println!("* = accepted at threshold {DEFAULT_RFF_THRESHOLD}");
}
