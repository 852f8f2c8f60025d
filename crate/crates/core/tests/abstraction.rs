mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stackroute_core::abstraction::{aggregate, curve_loss, curve_loss_between, validation_prices, RivalScores};
use stackroute_core::market::{synth_market, AttributeRanges};
use stackroute_core::ScorerModel;

fn perturbed_scorer(seed: u64) -> ScorerModel {
    // A fresh scorer is constant; round-trip a perturbed parameter vector so
    // the scores actually depend on the features.
    let model = ScorerModel::new(seed);
    let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    for (k, p) in v["params"].as_array_mut().unwrap().iter_mut().enumerate() {
        let x = p.as_f64().unwrap() + 0.2 * ((k as f64 * 0.7 + seed as f64).sin());
        *p = serde_json::json!(x);
    }
    ScorerModel::from_json(&v.to_string()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn scores_are_permutation_equivariant(seed in any::<u64>(), m in 3usize..10, perm_seed in any::<u64>()) {
        let market = synth_market(seed, 3, m, &AttributeRanges::default()).unwrap();
        let mut perm: Vec<usize> = (0..m - 1).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let scorer = perturbed_scorer(seed % 7);
        let a = scorer.score(&market).unwrap();
        let b = scorer.score(&common::permute_rivals(&market, &perm)).unwrap();
        for (q, &j) in perm.iter().enumerate() {
            prop_assert!((b.sum_scores[q] - a.sum_scores[j]).abs() <= 1e-10);
            prop_assert!((b.avg_scores[q] - a.avg_scores[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn aggregate_is_a_convex_combination(seed in any::<u64>(), m in 3usize..10, k in 1usize..3) {
        let market = synth_market(seed, 2, m, &AttributeRanges::default()).unwrap();
        let scores = perturbed_scorer(seed % 5).score(&market).unwrap();
        let abs = aggregate(&market, &scores, k).unwrap();
        prop_assert_eq!(abs.market.target(), market.target());
        let s = market.target_index();
        let s_new = abs.market.target_index();
        for i in 0..market.n_users() {
            prop_assert_eq!(abs.market.delay(i, s_new), market.delay(i, s));
        }
        if abs.has_aggregate {
            let a = abs.kept_indices.len();
            let agg = &abs.market.providers()[a];
            prop_assert!(agg.capacity > 0.0);
            let members = &abs.aggregated_indices;
            let within = |v: f64, f: &dyn Fn(usize) -> f64| {
                let lo = members.iter().map(|&j| f(j)).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|&j| f(j)).fold(f64::NEG_INFINITY, f64::max);
                v >= lo - 1e-12 && v <= hi + 1e-12
            };
            prop_assert!(within(agg.price, &|j| market.providers()[j].price));
            prop_assert!(within(agg.perceived_value, &|j| market.params().biases[j]));
            for i in 0..market.n_users() {
                prop_assert!(within(abs.market.delay(i, a), &|j| market.delay(i, j)));
            }
        }
    }

    #[test]
    fn identity_abstraction_has_zero_curve_loss(seed in any::<u64>(), m in 2usize..7) {
        let market = synth_market(seed, 2, m, &AttributeRanges::default()).unwrap();
        let prices = validation_prices(market.price_cap(), 8);
        let loss = curve_loss(&perturbed_scorer(1), &market, m - 1, &prices).unwrap();
        prop_assert_eq!(loss, 0.0);
    }
}

#[test]
fn identical_rivals_get_identical_scores() {
    let base = synth_market(2, 2, 4, &AttributeRanges::default()).unwrap();
    // Rival 1 copies rival 0.
    let mut providers = base.providers().to_vec();
    providers[1] = providers[0].clone();
    providers[1].id = "twin".into();
    let mut users = base.users().to_vec();
    for u in &mut users {
        u.delays[1] = u.delays[0];
    }
    let mut params = base.params().clone();
    params.biases[1] = params.biases[0];
    let market = stackroute_core::Market::new(providers, users, params, base.price_cap()).unwrap();
    let s = perturbed_scorer(3).score(&market).unwrap();
    assert_eq!(s.sum_scores[0], s.sum_scores[1]);
    assert_eq!(s.avg_scores[0], s.avg_scores[1]);
}

#[test]
fn normalization_is_scale_free_for_the_identity() {
    let market = synth_market(6, 2, 4, &AttributeRanges::default()).unwrap();
    let scaled = market.with_demands(&market.demands().iter().map(|d| d * 3.0).collect::<Vec<_>>()).unwrap();
    let prices = validation_prices(market.price_cap(), 8);
    let abs = aggregate(&scaled, &RivalScores::uniform(3), 3).unwrap();
    assert_eq!(curve_loss_between(&scaled, &abs.market, &prices).unwrap(), 0.0);
}
