#![allow(dead_code)]

use std::path::PathBuf;

use sovereign_uwb::network::{parse_config, ScenarioConfig};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn scenario(name: &str) -> ScenarioConfig {
    let text = std::fs::read_to_string(scenario_path(name)).expect("scenario file");
    parse_config(&text).expect("scenario parses")
}

/// One trace record: time in ps, node (None for system lines), kind, fields.
#[derive(Clone, Debug)]
pub struct Line {
    pub t_ps: u64,
    pub node: Option<u16>,
    pub kind: String,
    pub rest: String,
}

impl Line {
    pub fn field(&self, key: &str) -> Option<&str> {
        self.rest
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
    }

    pub fn num(&self, key: &str) -> Option<u64> {
        self.field(key)?.parse().ok()
    }

    pub fn superframe(&self) -> u64 {
        self.t_ps / 100_000_000_000
    }
}

pub fn parse_trace(trace: &str) -> Vec<Line> {
    trace
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut it = l.splitn(4, '\t');
            let t_ps = it.next().unwrap().parse().expect("time column");
            let node = it.next().unwrap().parse().ok();
            let kind = it.next().unwrap_or("").to_string();
            let rest = it.next().unwrap_or("").to_string();
            Line { t_ps, node, kind, rest }
        })
        .collect()
}

/// Prints the one-line verdict for a criterion and fails the test on FAIL.
pub fn report(id: &str, ok: bool, detail: impl std::fmt::Display) {
    use std::io::Write;
    let line = format!("[{}] criterion {id}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}
