mod common;

use proptest::prelude::*;
use stackroute_core::market::{synth_market, AttributeRanges};
use stackroute_core::{potential, solve_equilibrium, solve_equilibrium_with, wardrop_gap, SolverOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn equilibrium_is_certified(seed in any::<u64>(), n in 1usize..8, m in 2usize..8) {
        let market = synth_market(seed, n, m, &AttributeRanges::default()).unwrap();
        let r = solve_equilibrium(&market).unwrap();
        prop_assert!(r.wardrop_gap <= 1e-8);
        prop_assert!(r.kkt_residual <= 1e-8);
        prop_assert!((wardrop_gap(&r.flow, &market).unwrap() - r.wardrop_gap).abs() <= 1e-12);
        for (i, u) in market.users().iter().enumerate() {
            let row = r.flow.row(i);
            prop_assert!(row.iter().all(|f| *f >= 0.0));
            let total: f64 = row.iter().sum();
            prop_assert!((total - u.demand).abs() <= 1e-9 * u.demand.max(1.0));
        }
    }

    #[test]
    fn random_starts_reach_the_same_equilibrium(seed in any::<u64>(), start in any::<u64>()) {
        let market = synth_market(seed, 4, 5, &AttributeRanges::default()).unwrap();
        let a = solve_equilibrium(&market).unwrap();
        let b = solve_equilibrium_with(&market, &SolverOptions::default(), Some(&common::random_start(&market, start))).unwrap();
        prop_assert!(a.flow.max_abs_diff(&b.flow) <= 1e-6);
    }

    #[test]
    fn equilibrium_minimizes_the_potential(seed in any::<u64>(), start in any::<u64>()) {
        let market = synth_market(seed, 3, 4, &AttributeRanges::default()).unwrap();
        let r = solve_equilibrium(&market).unwrap();
        let other = common::random_start(&market, start);
        prop_assert!(r.potential <= potential(&other, &market).unwrap() + 1e-9);
    }
}
