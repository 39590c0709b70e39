//! Double-sided two-way ranging with clock drift, then an STS-advance attack
//! caught by the dual-timeline check.

use sovereign_uwb::phy::{AttackInjector, AttackKind, ToaModel};
use sovereign_uwb::ranging::{run_session, LinkSetup, RangingConfig, SessionOutcome};

fn main() {
    let cfg = RangingConfig::default();
    let honest = LinkSetup {
        initiator_drift_ppm: 15.0,
        responder_drift_ppm: -12.0,
        toa_model: ToaModel::Gaussian { sigma_ps: 50.0 },
        seed: 1,
        ..LinkSetup::ideal(10.0)
    };
    match run_session(&honest, &cfg).0 {
        SessionOutcome::Completed(r) => println!("honest link: {:.4} m at 10 m true distance", r.distance_m),
        other => println!("honest link: {other:?}"),
    }

    for ns in [5.0, 20.0, 50.0] {
        let mut inj = AttackInjector::new([(1, 2)]);
        inj.inject(AttackKind::StsAdvance, ns, (1, 2)).expect("inject");
        let attacked = LinkSetup {
            shift: inj.shift(1, 2),
            ..honest.clone()
        };
        println!("STS advanced by {ns} ns: {:?}", run_session(&attacked, &cfg).0);
    }
}
