use sha2::{Digest, Sha256};

use crate::market::Market;

pub const FEATURE_VERSION: u32 = 1;
pub const N_FEATURES: usize = 9;
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "price",
    "bias",
    "log_capacity",
    "mean_delay",
    "min_delay",
    "price_gap",
    "bias_gap",
    "log_capacity_gap",
    "weighted_delay_gap",
];
/// Floor on the per-feature standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-9;

pub type Features = [f64; N_FEATURES];

/// Hex SHA-256 of the feature version and names; stored in model files.
pub fn schema_hash() -> String {
    let mut h = Sha256::new();
    h.update(format!("stackroute-features-v{FEATURE_VERSION}:").as_bytes());
    h.update(FEATURE_NAMES.join(",").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Unstandardized features of every rival, in market order.
pub fn raw_rival_features(market: &Market) -> Vec<Features> {
    let s = market.target_index();
    let target = market.target();
    let users = market.users();
    let total: f64 = users.iter().map(|u| u.demand).sum();
    let b_s = market.params().biases[s];
    (0..s)
        .map(|j| {
            let p = &market.providers()[j];
            let b = market.params().biases[j];
            let delays = users.iter().map(|u| u.delays[j]);
            let n = users.len().max(1) as f64;
            let mean_delay = if users.is_empty() { 0.0 } else { delays.clone().sum::<f64>() / n };
            let min_delay = if users.is_empty() { 0.0 } else { delays.fold(f64::INFINITY, f64::min) };
            let weighted_gap = if total > 0.0 {
                users.iter().map(|u| u.demand * (u.delays[j] - u.delays[s])).sum::<f64>() / total
            } else {
                0.0
            };
            [
                p.price,
                b,
                p.capacity.ln(),
                mean_delay,
                min_delay,
                p.price - target.price,
                b - b_s,
                p.capacity.ln() - target.capacity.ln(),
                weighted_gap,
            ]
        })
        .collect()
}

/// Raw features standardized per column over the market's rivals.
pub fn rival_features(market: &Market) -> Vec<Features> {
    let mut rows = raw_rival_features(market);
    standardize(&mut rows);
    rows
}

pub(crate) fn standardize(rows: &mut [Features]) {
    if rows.is_empty() {
        return;
    }
    let r = rows.len() as f64;
    for c in 0..N_FEATURES {
        let mean = rows.iter().map(|x| x[c]).sum::<f64>() / r;
        let var = rows.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / r;
        let sd = var.sqrt().max(STD_FLOOR);
        for x in rows.iter_mut() {
            x[c] = (x[c] - mean) / sd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::{provider, user};
    use crate::market::{synth_market, AttributeRanges, PreferenceParams};

    #[test]
    fn self_difference_is_zero() {
        let m = Market::new(
            vec![
                provider("twin", 3.0, 10.0, 1.0, false),
                provider("other", 5.0, 20.0, 2.0, false),
                provider("s", 3.0, 10.0, 1.0, true),
            ],
            vec![user("u", 4.0, &[0.5, 1.0, 0.5])],
            PreferenceParams::new(1.0, 1.0, vec![1.0, 2.0, 1.0]),
            10.0,
        )
        .unwrap();
        let raw = raw_rival_features(&m);
        assert_eq!(&raw[0][5..], &[0.0; 4]);
        assert!((raw[1][5] - 2.0).abs() < 1e-15);
        assert!((raw[1][8] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_rivals_identical_features() {
        let m = Market::new(
            vec![
                provider("a", 3.0, 10.0, 1.0, false),
                provider("b", 3.0, 10.0, 1.0, false),
                provider("c", 1.0, 5.0, 0.0, false),
                provider("s", 2.0, 8.0, 0.5, true),
            ],
            vec![user("u", 4.0, &[0.5, 0.5, 0.1, 0.2])],
            PreferenceParams::new(1.0, 1.0, vec![1.0, 1.0, 0.0, 0.5]),
            10.0,
        )
        .unwrap();
        let f = rival_features(&m);
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn columns_are_standardized() {
        let m = synth_market(3, 4, 9, &AttributeRanges::default()).unwrap();
        let f = rival_features(&m);
        for c in 0..N_FEATURES {
            let mean = f.iter().map(|x| x[c]).sum::<f64>() / f.len() as f64;
            let var = f.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / f.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn schema_hash_is_stable_hex() {
        let h = schema_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, schema_hash());
    }
}
