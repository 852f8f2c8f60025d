//! Game instances: providers, user groups, preference weights.
//!
//! Provider order is significant everywhere in the crate: rivals come first
//! and the target provider is always the last column of every `n × m` matrix.

mod ingest;
mod synth;

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::equilibrium::FlowMatrix;
use crate::error::{Error, Result};

pub use ingest::{
    build_market, capacity_from_usage, load_performance_csv, load_usage_csv, BuildOptions,
    DateRange, PerformanceRecord, UsageRecord,
};
pub use synth::{synth_market, AttributeRanges, Range};

/// Relative row-sum mismatch that [`ObservedDay::new`] silently renormalizes.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provider {
    pub id: String,
    /// Dollars per million tokens.
    pub price: f64,
    pub capacity: f64,
    pub perceived_value: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    pub id: String,
    /// Millions of tokens per period.
    pub demand: f64,
    /// Access delay to each provider, seconds.
    pub delays: Vec<f64>,
}

/// Preference weights `(w_p, w_q, w_d)` plus per-provider perceived values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParams {
    pub w_p: f64,
    pub w_q: f64,
    pub w_d: f64,
    pub biases: Vec<f64>,
}

impl PreferenceParams {
    /// `w_p` is pinned to 1 for identifiability.
    pub fn new(w_q: f64, w_d: f64, biases: Vec<f64>) -> Self {
        PreferenceParams {
            w_p: 1.0,
            w_q,
            w_d,
            biases,
        }
    }

    /// `(1, 1, 1, 0)`, the starting point before any calibration.
    pub fn unit(m: usize) -> Self {
        PreferenceParams::new(1.0, 1.0, vec![0.0; m])
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.w_p != 1.0 {
            return Err(Error::invalid(format!("w_p must be exactly 1, got {}", self.w_p)));
        }
        if !(self.w_q.is_finite() && self.w_q >= 0.0) {
            return Err(Error::invalid(format!("w_q must be finite and >= 0, got {}", self.w_q)));
        }
        if !(self.w_d.is_finite() && self.w_d >= 0.0) {
            return Err(Error::invalid(format!("w_d must be finite and >= 0, got {}", self.w_d)));
        }
        if self.biases.len() != m {
            return Err(Error::Shape(format!(
                "{} biases for {} providers",
                self.biases.len(),
                m
            )));
        }
        if let Some((j, b)) = self
            .biases
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b >= 0.0))
        {
            return Err(Error::invalid(format!("bias {j} must be finite and >= 0, got {b}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarketConfig", into = "MarketConfig")]
pub struct Market {
    providers: Vec<Provider>,
    users: Vec<UserGroup>,
    params: PreferenceParams,
    price_cap: f64,
}

/// On-disk shape of a [`Market`]; validated on the way in.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MarketConfig {
    providers: Vec<Provider>,
    users: Vec<UserGroup>,
    params: PreferenceParams,
    price_cap: f64,
}

impl TryFrom<MarketConfig> for Market {
    type Error = Error;

    fn try_from(c: MarketConfig) -> Result<Self> {
        Market::new(c.providers, c.users, c.params, c.price_cap)
    }
}

impl From<Market> for MarketConfig {
    fn from(m: Market) -> Self {
        MarketConfig {
            providers: m.providers,
            users: m.users,
            params: m.params,
            price_cap: m.price_cap,
        }
    }
}

impl Market {
    pub fn new(
        providers: Vec<Provider>,
        users: Vec<UserGroup>,
        params: PreferenceParams,
        price_cap: f64,
    ) -> Result<Self> {
        let m = providers.len();
        if m == 0 {
            return Err(Error::invalid("market has no providers"));
        }
        let targets = providers.iter().filter(|p| p.is_target).count();
        if targets != 1 {
            return Err(Error::invalid(format!(
                "exactly one target provider required, found {targets}"
            )));
        }
        if !providers[m - 1].is_target {
            return Err(Error::invalid("the target provider must be stored last"));
        }
        for p in &providers {
            if !(p.capacity.is_finite() && p.capacity > 0.0) {
                return Err(Error::invalid(format!(
                    "provider `{}`: capacity must be > 0, got {}",
                    p.id, p.capacity
                )));
            }
            if !(p.price.is_finite() && p.price >= 0.0) {
                return Err(Error::invalid(format!(
                    "provider `{}`: price must be >= 0, got {}",
                    p.id, p.price
                )));
            }
            if !(p.perceived_value.is_finite() && p.perceived_value >= 0.0) {
                return Err(Error::invalid(format!(
                    "provider `{}`: perceived value must be >= 0, got {}",
                    p.id, p.perceived_value
                )));
            }
        }
        for u in &users {
            if !(u.demand.is_finite() && u.demand >= 0.0) {
                return Err(Error::invalid(format!(
                    "user `{}`: demand must be >= 0, got {}",
                    u.id, u.demand
                )));
            }
            if u.delays.len() != m {
                return Err(Error::Shape(format!(
                    "user `{}` has {} delays for {} providers",
                    u.id,
                    u.delays.len(),
                    m
                )));
            }
            if u.delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(Error::invalid(format!("user `{}`: delays must be >= 0", u.id)));
            }
        }
        params.validate(m)?;
        for (j, p) in providers.iter().enumerate() {
            if params.biases[j] != p.perceived_value {
                return Err(Error::invalid(format!(
                    "params.biases[{j}] = {} disagrees with provider `{}` perceived value {}",
                    params.biases[j], p.id, p.perceived_value
                )));
            }
        }
        if !(price_cap.is_finite() && price_cap > 0.0) {
            return Err(Error::invalid(format!("price cap must be > 0, got {price_cap}")));
        }
        let target_price = providers[m - 1].price;
        if target_price > price_cap {
            return Err(Error::invalid(format!(
                "target price {target_price} exceeds the price cap {price_cap}"
            )));
        }
        Ok(Market {
            providers,
            users,
            params,
            price_cap,
        })
    }

    pub fn providers(&self) -> &[Provider] {
        &self.providers
    }

    pub fn users(&self) -> &[UserGroup] {
        &self.users
    }

    pub fn params(&self) -> &PreferenceParams {
        &self.params
    }

    pub fn price_cap(&self) -> f64 {
        self.price_cap
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }

    pub fn target_index(&self) -> usize {
        self.providers.len() - 1
    }

    pub fn target(&self) -> &Provider {
        &self.providers[self.target_index()]
    }

    pub fn rivals(&self) -> &[Provider] {
        &self.providers[..self.target_index()]
    }

    pub fn total_demand(&self) -> f64 {
        self.users.iter().map(|u| u.demand).sum()
    }

    pub fn delay(&self, i: usize, j: usize) -> f64 {
        self.users[i].delays[j]
    }

    pub fn demands(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.demand).collect()
    }

    pub fn with_target_price(&self, price: f64) -> Result<Market> {
        if !(price.is_finite() && (0.0..=self.price_cap).contains(&price)) {
            return Err(Error::Argument(format!(
                "target price {price} outside [0, {}]",
                self.price_cap
            )));
        }
        let mut out = self.clone();
        let t = out.target_index();
        out.providers[t].price = price;
        Ok(out)
    }

    /// Replace `θ`, keeping provider perceived values in sync with `params.biases`.
    pub fn with_params(&self, params: PreferenceParams) -> Result<Market> {
        params.validate(self.n_providers())?;
        let mut out = self.clone();
        for (p, b) in out.providers.iter_mut().zip(&params.biases) {
            p.perceived_value = *b;
        }
        out.params = params;
        Ok(out)
    }

    pub fn with_demands(&self, demands: &[f64]) -> Result<Market> {
        if demands.len() != self.n_users() {
            return Err(Error::Shape(format!(
                "{} demands for {} users",
                demands.len(),
                self.n_users()
            )));
        }
        let mut users = self.users.clone();
        for (u, d) in users.iter_mut().zip(demands) {
            u.demand = *d;
        }
        Market::new(self.providers.clone(), users, self.params.clone(), self.price_cap)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Market> {
        serde_json::from_str::<MarketConfig>(text)?.try_into()
    }

    pub fn load(path: &Path) -> Result<Market> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Market::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-day objective factors `O_t`: prices, capacities and delays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayObjective {
    pub prices: Vec<f64>,
    pub capacities: Vec<f64>,
    /// `n × m`, row per user.
    pub delays: Vec<Vec<f64>>,
}

impl DayObjective {
    pub fn from_market(market: &Market) -> Self {
        DayObjective {
            prices: market.providers().iter().map(|p| p.price).collect(),
            capacities: market.providers().iter().map(|p| p.capacity).collect(),
            delays: market.users().iter().map(|u| u.delays.clone()).collect(),
        }
    }
}

/// One day of observed routing: `F^real_t`, `D_it` and `O_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDay {
    pub date: NaiveDate,
    pub flows: FlowMatrix,
    pub demands: Vec<f64>,
    pub objective: DayObjective,
}

impl ObservedDay {
    /// Validates shapes and renormalizes rows whose sum is within
    /// [`ROW_SUM_TOLERANCE`] of the stated demand.
    pub fn new(
        date: NaiveDate,
        mut flows: FlowMatrix,
        demands: Vec<f64>,
        objective: DayObjective,
    ) -> Result<Self> {
        let (n, m) = (flows.n_users(), flows.n_providers());
        if demands.len() != n {
            return Err(Error::Shape(format!("{} demands for {n} flow rows", demands.len())));
        }
        if objective.prices.len() != m || objective.capacities.len() != m {
            return Err(Error::Shape(format!("objective factors do not match {m} providers")));
        }
        if objective.delays.len() != n || objective.delays.iter().any(|r| r.len() != m) {
            return Err(Error::Shape(format!("delay matrix is not {n} x {m}")));
        }
        if objective.capacities.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid(format!("{date}: capacities must be > 0")));
        }
        if flows.values().iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid(format!("{date}: flows must be finite and >= 0")));
        }
        for (i, &d) in demands.iter().enumerate() {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::invalid(format!("{date}: demand of user {i} must be >= 0")));
            }
            let sum: f64 = flows.row(i).iter().sum();
            let scale = d.abs().max(sum.abs());
            if (sum - d).abs() > ROW_SUM_TOLERANCE * scale {
                return Err(Error::invalid(format!(
                    "{date}: flows of user {i} sum to {sum}, demand is {d}"
                )));
            }
            if sum > 0.0 && sum != d {
                let k = d / sum;
                flows.row_mut(i).iter_mut().for_each(|f| *f *= k);
            }
        }
        Ok(ObservedDay {
            date,
            flows,
            demands,
            objective,
        })
    }

    pub fn n_users(&self) -> usize {
        self.flows.n_users()
    }

    pub fn n_providers(&self) -> usize {
        self.flows.n_providers()
    }

    /// A market carrying this day's objective factors, demands and `theta`.
    /// Provider and user ids are positional; the last provider is the target.
    pub fn to_market(&self, theta: &PreferenceParams) -> Result<Market> {
        let m = self.n_providers();
        theta.validate(m)?;
        let providers = (0..m)
            .map(|j| Provider {
                id: format!("provider-{j}"),
                price: self.objective.prices[j],
                capacity: self.objective.capacities[j],
                perceived_value: theta.biases[j],
                is_target: j + 1 == m,
            })
            .collect();
        let users = self
            .demands
            .iter()
            .zip(&self.objective.delays)
            .enumerate()
            .map(|(i, (&demand, delays))| UserGroup {
                id: format!("user-{i}"),
                demand,
                delays: delays.clone(),
            })
            .collect();
        let cap = self.objective.prices.iter().cloned().fold(1.0, f64::max);
        Market::new(providers, users, theta.clone(), cap)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn provider(id: &str, price: f64, capacity: f64, b: f64, target: bool) -> Provider {
        Provider {
            id: id.to_string(),
            price,
            capacity,
            perceived_value: b,
            is_target: target,
        }
    }

    pub(crate) fn user(id: &str, demand: f64, delays: &[f64]) -> UserGroup {
        UserGroup {
            id: id.to_string(),
            demand,
            delays: delays.to_vec(),
        }
    }

    fn two_provider() -> Market {
        Market::new(
            vec![provider("a", 1.0, 1.0, 0.0, false), provider("s", 2.0, 1.0, 0.0, true)],
            vec![user("u", 10.0, &[0.0, 0.0])],
            PreferenceParams::unit(2),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn target_must_be_last_and_unique() {
        let err = Market::new(
            vec![provider("s", 1.0, 1.0, 0.0, true), provider("a", 1.0, 1.0, 0.0, false)],
            vec![],
            PreferenceParams::unit(2),
            5.0,
        );
        assert!(err.is_err());
        let err = Market::new(
            vec![provider("a", 1.0, 1.0, 0.0, true), provider("s", 1.0, 1.0, 0.0, true)],
            vec![],
            PreferenceParams::unit(2),
            5.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_bad_attributes() {
        let bad_cap = Market::new(
            vec![provider("s", 1.0, 0.0, 0.0, true)],
            vec![],
            PreferenceParams::unit(1),
            5.0,
        );
        assert!(bad_cap.is_err());
        let bad_delay = Market::new(
            vec![provider("s", 1.0, 1.0, 0.0, true)],
            vec![user("u", 1.0, &[0.1, 0.2])],
            PreferenceParams::unit(1),
            5.0,
        );
        assert!(matches!(bad_delay, Err(Error::Shape(_))));
        let over_cap = Market::new(
            vec![provider("s", 6.0, 1.0, 0.0, true)],
            vec![],
            PreferenceParams::unit(1),
            5.0,
        );
        assert!(over_cap.is_err());
        let mut params = PreferenceParams::unit(1);
        params.w_p = 2.0;
        let bad_wp = Market::new(vec![provider("s", 1.0, 1.0, 0.0, true)], vec![], params, 5.0);
        assert!(bad_wp.is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = two_provider()
            .with_params(PreferenceParams::new(0.1 + 0.2, 1.0 / 3.0, vec![0.7, 1e-17]))
            .unwrap();
        let back = Market::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn with_params_keeps_biases_in_sync() {
        let m = two_provider()
            .with_params(PreferenceParams::new(2.0, 0.5, vec![1.0, 3.0]))
            .unwrap();
        assert_eq!(m.providers()[1].perceived_value, 3.0);
        assert_eq!(m.params().biases, vec![1.0, 3.0]);
    }

    #[test]
    fn target_price_bounds() {
        let m = two_provider();
        assert!(m.with_target_price(10.0).is_ok());
        assert!(matches!(m.with_target_price(10.5), Err(Error::Argument(_))));
        assert!(m.with_target_price(-1.0).is_err());
    }

    #[test]
    fn observed_day_renormalizes_small_mismatch() {
        let date = NaiveDate::from_ymd_opt(2025, 7, 5).unwrap();
        let flows = FlowMatrix::from_rows(&[vec![5.0, 5.0 + 4e-6]]).unwrap();
        let objective = DayObjective {
            prices: vec![1.0, 2.0],
            capacities: vec![1.0, 1.0],
            delays: vec![vec![0.0, 0.0]],
        };
        let day = ObservedDay::new(date, flows, vec![10.0], objective.clone()).unwrap();
        let sum: f64 = day.flows.row(0).iter().sum();
        assert!((sum - 10.0).abs() < 1e-12);

        let flows = FlowMatrix::from_rows(&[vec![5.0, 5.1]]).unwrap();
        assert!(ObservedDay::new(date, flows, vec![10.0], objective).is_err());
    }
}
