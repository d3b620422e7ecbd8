use courselab::elicitation::QueryAlgorithm;
use courselab::harness::Scenario;
use courselab::mechanism::{run_mechanism, Market, MechanismConfig, MechanismKind};
use courselab::reporting::MistakeProfile;

fn small() -> Scenario {
    Scenario {
        m: 12,
        n_students: 10,
        max_courses: 3,
        n_popular: 4,
        ..Scenario::default()
    }
}

fn config(kind: MechanismKind, seed: u64) -> MechanismConfig {
    MechanismConfig {
        kind,
        seed,
        ..MechanismConfig::default()
    }
}

#[test]
fn mlcm_with_everyone_opted_out_is_course_match() {
    for i in 0..3 {
        let market = small().market(7, i).unwrap();
        let cm = run_mechanism(&market, &config(MechanismKind::Cm, i as u64)).unwrap();
        let ml = run_mechanism(
            &market,
            &MechanismConfig {
                n_queries: 0,
                opt_in: Some(vec![false; market.n()]),
                ..config(MechanismKind::Mlcm, i as u64)
            },
        )
        .unwrap();
        assert_eq!(ml.allocation, cm.allocation);
        assert_eq!(ml.prices, cm.prices);
        assert_eq!(ml.utilities, cm.utilities);
    }
}

#[test]
fn full_preferences_and_no_mistakes_coincide_for_additive_students() {
    let scenario = Scenario {
        additive: true,
        ..small()
    };
    for i in 0..3 {
        let instance = scenario.instance(11, i).unwrap();
        let market = Market::prepare(instance, MistakeProfile::none(), i as u64).unwrap();
        let star = run_mechanism(&market, &config(MechanismKind::CmStar, 1)).unwrap();
        let nm = run_mechanism(&market, &config(MechanismKind::CmNoMistakes, 1)).unwrap();
        let cm = run_mechanism(&market, &config(MechanismKind::Cm, 1)).unwrap();
        assert_eq!(star.allocation, nm.allocation);
        assert_eq!(star.prices, nm.prices);
        assert_eq!(star.allocation, cm.allocation);
    }
}

#[test]
fn runs_are_deterministic() {
    let market = small().market(3, 0).unwrap();
    for kind in [MechanismKind::Cm, MechanismKind::Mlcm, MechanismKind::Rsd] {
        let cfg = MechanismConfig {
            n_queries: 3,
            query_algorithm: QueryAlgorithm::Obis,
            ..config(kind, 5)
        };
        assert_eq!(run_mechanism(&market, &cfg).unwrap(), run_mechanism(&market, &cfg).unwrap());
    }
}

#[test]
fn allocations_are_feasible() {
    let market = small().market(5, 0).unwrap();
    let caps = market.instance.catalog.capacities();
    for kind in [
        MechanismKind::Cm,
        MechanismKind::CmStar,
        MechanismKind::CmNoMistakes,
        MechanismKind::Mlcm,
        MechanismKind::MlcmProjected,
        MechanismKind::Rsd,
    ] {
        let r = run_mechanism(
            &market,
            &MechanismConfig {
                n_queries: 2,
                projection_samples: 300,
                ..config(kind, 2)
            },
        )
        .unwrap();
        assert!(courselab::market::is_feasible(&r.allocation, &caps, &market.space), "{kind:?}");
        assert_eq!(r.utilities, market.true_utilities(&r.allocation));
    }
}
