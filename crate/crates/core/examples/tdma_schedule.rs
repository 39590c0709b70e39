//! Superframe layout for three zones and its slot accounting.

use sovereign_uwb::mac::{build_schedule, SlotKind};

fn main() {
    let s = build_schedule(&[1, 14, 27], 1000).expect("schedule");
    println!(
        "{} slots: {} beacon, {} ranging, {} leader-data",
        s.slot_count(),
        s.count(SlotKind::Beacon),
        s.count(SlotKind::Ranging),
        s.count(SlotKind::LeaderData)
    );
    for z in 0..3 {
        let i = s.leader_data_slot(z);
        println!("zone {z}: leader-data slot {i} starts at {} ms", s.slot_start(i).as_ps() / 1_000_000_000);
    }
    print!("{}", s.dump().lines().take(8).collect::<Vec<_>>().join("\n"));
    println!("\n...");
}
