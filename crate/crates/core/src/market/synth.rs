use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Market, PreferenceParams, Provider, UserGroup};
use crate::error::{Error, Result};

/// Closed interval `[low, high]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Range { low, high }
    }

    fn check(&self, name: &str, min: f64) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite()) || self.low > self.high {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] is empty or inverted",
                self.low, self.high
            )));
        }
        if self.low < min {
            return Err(Error::Config(format!(
                "{name} range lower bound {} below {min}",
                self.low
            )));
        }
        Ok(())
    }

    pub(crate) fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.low + (self.high - self.low) * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeRanges {
    pub price: Range,
    pub capacity: Range,
    pub delay: Range,
    pub demand: Range,
    pub bias: Range,
    pub price_cap: f64,
    pub w_q: f64,
    pub w_d: f64,
}

impl Default for AttributeRanges {
    fn default() -> Self {
        AttributeRanges {
            price: Range::new(1.0, 10.0),
            capacity: Range::new(5.0, 40.0),
            delay: Range::new(0.2, 2.0),
            demand: Range::new(10.0, 40.0),
            bias: Range::new(0.0, 4.0),
            price_cap: 20.0,
            w_q: 1.0,
            w_d: 1.0,
        }
    }
}

impl AttributeRanges {
    pub fn validate(&self) -> Result<()> {
        self.price.check("price", 0.0)?;
        self.capacity.check("capacity", f64::MIN_POSITIVE)?;
        self.delay.check("delay", 0.0)?;
        self.demand.check("demand", 0.0)?;
        self.bias.check("bias", 0.0)?;
        if !(self.price_cap.is_finite() && self.price_cap > 0.0) {
            return Err(Error::Config(format!("price cap {} must be > 0", self.price_cap)));
        }
        if self.price.high > self.price_cap {
            return Err(Error::Config(format!(
                "price range upper bound {} exceeds the price cap {}",
                self.price.high, self.price_cap
            )));
        }
        if !(self.w_q.is_finite() && self.w_q > 0.0 && self.w_d.is_finite() && self.w_d >= 0.0) {
            return Err(Error::Config("w_q must be > 0 and w_d >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic random market: the same `(seed, n, m, ranges)` always gives
/// a bit-identical result. Providers are `rival-0 .. rival-{m-2}` then `target`.
pub fn synth_market(
    seed: u64,
    n_users: usize,
    m_providers: usize,
    ranges: &AttributeRanges,
) -> Result<Market> {
    if n_users < 1 || m_providers < 2 {
        return Err(Error::Config(format!(
            "need at least 1 user and 2 providers, got {n_users} and {m_providers}"
        )));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let providers: Vec<Provider> = (0..m_providers)
        .map(|j| {
            let is_target = j + 1 == m_providers;
            Provider {
                id: if is_target {
                    "target".to_string()
                } else {
                    format!("rival-{j}")
                },
                price: ranges.price.sample(&mut rng),
                capacity: ranges.capacity.sample(&mut rng),
                perceived_value: ranges.bias.sample(&mut rng),
                is_target,
            }
        })
        .collect();
    let users = (0..n_users)
        .map(|i| UserGroup {
            id: format!("user-{i}"),
            demand: ranges.demand.sample(&mut rng),
            delays: (0..m_providers).map(|_| ranges.delay.sample(&mut rng)).collect(),
        })
        .collect();
    let biases = providers.iter().map(|p| p.perceived_value).collect();
    let params = PreferenceParams::new(ranges.w_q, ranges.w_d, biases);
    Market::new(providers, users, params, ranges.price_cap)
}
