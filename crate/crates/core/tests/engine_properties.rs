use fmo_petasim::*;
use proptest::prelude::*;

fn config() -> EngineConfig {
    EngineConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counters_follow_pair_classification(n_f in 3usize..12, seed in 0u64..1000, threshold in 3.0f64..12.0) {
        let sys = generate_chain(n_f, 2, 4.0, seed).unwrap();
        let cls = classify_pairs(&sys, threshold).unwrap();
        let r = fmo2_total_energy(&sys, &cls, &config()).unwrap();
        prop_assert!(r.converged);
        let c = r.counters;
        prop_assert_eq!(c.monomer_solves, (n_f * r.monomer.iterations_used) as u64);
        prop_assert_eq!(c.scf_dimer_solves, cls.scf_pairs.len() as u64);
        prop_assert_eq!(c.es_evaluations, cls.es_pairs.len() as u64);
        prop_assert_eq!(r.dimers.len(), n_f * (n_f - 1) / 2);
    }

    #[test]
    fn charges_are_conserved(n_f in 2usize..10, seed in 0u64..1000) {
        let sys = generate_chain(n_f, 3, 3.5, seed).unwrap();
        let mono = scc_loop(&sys, &config(), &mut WorkCounters::default()).unwrap();
        for (s, f) in mono.charges.fragment_sums().iter().zip(&sys.fragments) {
            prop_assert!((s - f.net_charge).abs() <= 1e-12);
        }
        let oracle = full_system_oracle(&sys, &config()).unwrap();
        for (s, f) in oracle.charges.fragment_sums().iter().zip(&sys.fragments) {
            prop_assert!((s - f.net_charge).abs() <= 1e-12);
        }
    }

    #[test]
    fn energy_is_invariant_under_fragment_order(n_f in 3usize..9, seed in 0u64..1000, rot in 1usize..8) {
        let sys = generate_chain(n_f, 2, 4.0, seed).unwrap();
        let mut frags = sys.fragments.clone();
        frags.rotate_left(rot % n_f);
        frags.reverse();
        let permuted = FragmentSystem::new("permuted", frags).unwrap();
        let cfg = config();
        let a = fmo2_total_energy(&sys, &classify_pairs(&sys, 6.0).unwrap(), &cfg).unwrap();
        let b = fmo2_total_energy(&permuted, &classify_pairs(&permuted, 6.0).unwrap(), &cfg).unwrap();
        prop_assert!((a.total_energy - b.total_energy).abs() <= 1e-7 * a.total_energy.abs().max(1.0));
    }

    #[test]
    fn frozen_dimer_equals_es_correction(seed in 0u64..1000) {
        let sys = generate_chain(2, 2, 5.0, seed).unwrap();
        let cfg = config();
        let mono = scc_loop(&sys, &cfg, &mut WorkCounters::default()).unwrap();
        let frozen = solve_scf_dimer(&sys, &mono, (0, 1), &cfg, DimerMode::Frozen).unwrap()
            - mono.embedded_energies[0]
            - mono.embedded_energies[1];
        let es = es_dimer_correction(&sys, &mono, (0, 1), &cfg).unwrap();
        prop_assert!((frozen - es).abs() <= 1e-10 * es.abs().max(1e-6));
    }

    #[test]
    fn scf_pairs_grow_with_threshold(seed in 0u64..1000, lo in 2.0f64..8.0, extra in 0.0f64..8.0) {
        let sys = generate_chain(10, 2, 4.0, seed).unwrap();
        let a = classify_pairs(&sys, lo).unwrap();
        let b = classify_pairs(&sys, lo + extra).unwrap();
        prop_assert!(a.scf_pairs.iter().all(|p| b.scf_pairs.contains(p)));
        prop_assert_eq!(a.n_pairs(), b.n_pairs());
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let sys = generate_chain(3, 2, 4.0, 1).unwrap();
    assert!(classify_pairs(&sys, 0.0).is_err());
    assert!(classify_pairs(&sys, f64::NAN).is_err());
    let bad = EngineConfig {
        damping: 0.0,
        ..EngineConfig::default()
    };
    assert!(scc_loop(&sys, &bad, &mut WorkCounters::default()).is_err());
    assert!(FragmentSystem::from_json_str("{").is_err());
}

#[test]
fn system_json_round_trip() {
    let sys = generate_chain(4, 3, 4.0, 9).unwrap();
    let back = FragmentSystem::from_json_str(&sys.to_json().unwrap()).unwrap();
    assert_eq!(sys, back);
}
