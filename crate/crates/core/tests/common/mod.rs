#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackroute_core::{FlowMatrix, Market, PreferenceParams, UserGroup};

/// Same market with rivals reordered by `perm` (new position `q` holds old rival `perm[q]`).
pub fn permute_rivals(market: &Market, perm: &[usize]) -> Market {
    let s = market.target_index();
    let mut order: Vec<usize> = perm.to_vec();
    order.push(s);
    let providers = order.iter().map(|&j| market.providers()[j].clone()).collect();
    let users = market
        .users()
        .iter()
        .map(|u| UserGroup {
            id: u.id.clone(),
            demand: u.demand,
            delays: order.iter().map(|&j| u.delays[j]).collect(),
        })
        .collect();
    let p = market.params();
    let biases = order.iter().map(|&j| p.biases[j]).collect();
    Market::new(providers, users, PreferenceParams::new(p.w_q, p.w_d, biases), market.price_cap()).unwrap()
}

/// A feasible flow with random positive splits of each user's demand.
pub fn random_start(market: &Market, seed: u64) -> FlowMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = market.n_providers();
    let rows: Vec<Vec<f64>> = market
        .users()
        .iter()
        .map(|u| {
            let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|x| u.demand * x / total).collect()
        })
        .collect();
    FlowMatrix::from_rows(&rows).unwrap()
}
