use proptest::prelude::*;
use stackroute_core::market::{synth_market, AttributeRanges};
use stackroute_core::pricing::{optimize_price_exact, optimize_price_sweep, profit, profit_curve, uniform_grid};
use stackroute_core::SweepOptions;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_price_earns_nothing(seed in any::<u64>(), n in 1usize..5, m in 2usize..6) {
        let market = synth_market(seed, n, m, &AttributeRanges::default()).unwrap();
        prop_assert_eq!(profit(0.0, &market).unwrap().0, 0.0);
    }

    #[test]
    fn sweep_agrees_with_exact(seed in any::<u64>()) {
        let market = synth_market(seed, 2, 3, &AttributeRanges::default()).unwrap();
        let exact = optimize_price_exact(&market).unwrap();
        let sweep = optimize_price_sweep(&market, &SweepOptions::default()).unwrap();
        prop_assert!(sweep.best_profit <= exact.best_profit * (1.0 + 1e-9) + 1e-12);
        prop_assert!(sweep.best_profit >= 0.999 * exact.best_profit);
    }

    #[test]
    fn reported_profit_is_attained(seed in any::<u64>()) {
        let market = synth_market(seed, 3, 4, &AttributeRanges::default()).unwrap();
        let r = optimize_price_sweep(&market, &SweepOptions::default()).unwrap();
        let (again, _) = profit(r.best_price, &market).unwrap();
        prop_assert!((again - r.best_profit).abs() <= 1e-8 * r.best_profit.max(1e-12));
        prop_assert!(r.curve.iter().all(|c| c.profit <= r.best_profit));
    }
}

#[test]
fn profit_curve_has_no_jumps() {
    for seed in 0..5 {
        let market = synth_market(seed, 3, 4, &AttributeRanges::default()).unwrap();
        let curve = profit_curve(&market, &uniform_grid(market.price_cap(), 801)).unwrap();
        let steps: Vec<f64> = curve.windows(2).map(|w| (w[1].profit - w[0].profit).abs()).collect();
        for k in 1..steps.len() - 1 {
            // A jump would dwarf both neighbouring increments.
            let local = steps[k - 1].max(steps[k + 1]);
            assert!(steps[k] <= 3.0 * local + 1e-9, "seed {seed} step {k}: {} vs {local}", steps[k]);
        }
    }
}

#[test]
fn doubling_coarse_points_never_loses_more_than_tolerance() {
    for seed in 0..20 {
        let market = synth_market(seed, 3, 5, &AttributeRanges::default()).unwrap();
        let a = optimize_price_sweep(&market, &SweepOptions::default()).unwrap();
        let b = optimize_price_sweep(
            &market,
            &SweepOptions {
                coarse_points: 128,
                ..Default::default()
            },
        )
        .unwrap();
        let tol = SweepOptions::default().tolerance(market.price_cap());
        assert!(b.best_profit >= a.best_profit - tol * market.total_demand(), "seed {seed}");
    }
}
