//! Game abstraction: keep the most important rivals, collapse the rest into
//! one score-weighted aggregate rival, and learn the scores so the target's
//! profit curve survives the reduction.

mod features;
mod scorer;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Market, PreferenceParams, Provider, UserGroup};
use crate::pricing::ProfitOracle;

pub use features::{
    raw_rival_features, rival_features, schema_hash, Features, FEATURE_NAMES, FEATURE_VERSION, N_FEATURES,
    STD_FLOOR,
};
pub use scorer::{ScorerModel, DEFAULT_WIDTH, MODEL_FORMAT_VERSION};
pub use train::{scenario_suite, train_scorer, train_scorer_from, validation_prices, TrainOptions, TrainReport};

pub const AGGREGATE_ID: &str = "aggregate";

/// Two importance scores per rival, in market order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RivalScores {
    /// Multiplies capacity in the aggregate's summed capacity.
    pub sum_scores: Vec<f64>,
    /// Ranks rivals and weights the aggregate's averaged attributes.
    pub avg_scores: Vec<f64>,
}

impl RivalScores {
    pub fn uniform(rivals: usize) -> Self {
        RivalScores {
            sum_scores: vec![1.0; rivals],
            avg_scores: vec![1.0; rivals],
        }
    }

    pub fn len(&self) -> usize {
        self.avg_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.avg_scores.is_empty()
    }

    fn validate(&self, rivals: usize) -> Result<()> {
        if self.sum_scores.len() != rivals || self.avg_scores.len() != rivals {
            return Err(Error::Shape(format!(
                "{} sum and {} avg scores for {rivals} rivals",
                self.sum_scores.len(),
                self.avg_scores.len()
            )));
        }
        let all = self.sum_scores.iter().chain(&self.avg_scores);
        if all.clone().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Argument("scores must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractedMarket {
    /// Kept rivals in original order, then the aggregate (if any), then the target.
    pub market: Market,
    pub kept_indices: Vec<usize>,
    pub aggregated_indices: Vec<usize>,
    /// Avg scores of the aggregated rivals normalized to sum to one.
    pub aggregate_weights: Vec<f64>,
    pub scores: RivalScores,
    /// False for the identity abstraction.
    pub has_aggregate: bool,
}

/// Rival indices by descending `key`, ties by original index.
fn ranked(key: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    order
}

fn check_k(market: &Market, k: usize) -> Result<usize> {
    let rivals = market.target_index();
    if rivals == 0 {
        return Err(Error::Argument("market has no rivals to abstract".into()));
    }
    if k < 1 || k > rivals {
        return Err(Error::Argument(format!("K must lie in 1..={rivals}, got {k}")));
    }
    Ok(rivals)
}

/// Attributes of the aggregate rival before it is placed in a market.
struct Aggregate {
    price: f64,
    capacity: f64,
    bias: f64,
    delays: Vec<f64>,
    weights: Vec<f64>,
}

fn collapse(market: &Market, members: &[usize], scores: &RivalScores) -> Result<Aggregate> {
    let total: f64 = members.iter().map(|&j| scores.avg_scores[j]).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let weights: Vec<f64> = members.iter().map(|&j| scores.avg_scores[j] / total).collect();
    let providers = market.providers();
    let biases = &market.params().biases;
    let mean = |value: &dyn Fn(usize) -> f64| members.iter().zip(&weights).map(|(&j, w)| w * value(j)).sum::<f64>();
    let capacity: f64 = members.iter().map(|&j| scores.sum_scores[j] * providers[j].capacity).sum();
    if !(capacity > 0.0 && capacity.is_finite()) {
        return Err(Error::Degenerate(format!("aggregate capacity {capacity} must be > 0")));
    }
    Ok(Aggregate {
        price: mean(&|j| providers[j].price),
        capacity,
        bias: mean(&|j| biases[j]),
        delays: market.users().iter().map(|u| mean(&|j| u.delays[j])).collect(),
        weights,
    })
}

/// Builds a market from selected original rivals plus `copies` replicas of
/// an aggregate, each holding `1/copies` of its capacity.
fn assemble(market: &Market, kept: &[usize], agg: Option<(&Aggregate, usize)>) -> Result<Market> {
    let s = market.target_index();
    let mut providers: Vec<Provider> = kept.iter().map(|&j| market.providers()[j].clone()).collect();
    let mut biases: Vec<f64> = kept.iter().map(|&j| market.params().biases[j]).collect();
    let mut agg_delays: &[f64] = &[];
    let mut copies = 0;
    if let Some((a, c)) = agg {
        copies = c;
        agg_delays = &a.delays;
        for c in 0..copies {
            providers.push(Provider {
                id: if copies == 1 { AGGREGATE_ID.to_string() } else { format!("{AGGREGATE_ID}-{c}") },
                price: a.price,
                capacity: a.capacity / copies as f64,
                perceived_value: a.bias,
                is_target: false,
            });
            biases.push(a.bias);
        }
    }
    providers.push(market.target().clone());
    biases.push(market.params().biases[s]);
    let users = market
        .users()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut delays: Vec<f64> = kept.iter().map(|&j| u.delays[j]).collect();
            delays.extend(std::iter::repeat_n(agg_delays.get(i).copied().unwrap_or(0.0), copies));
            delays.push(u.delays[s]);
            UserGroup {
                id: u.id.clone(),
                demand: u.demand,
                delays,
            }
        })
        .collect();
    let p = market.params();
    Market::new(
        providers,
        users,
        PreferenceParams::new(p.w_q, p.w_d, biases),
        market.price_cap(),
    )
}

/// Keeps the `k − 1` rivals with the highest avg score and merges the others
/// into one aggregate rival. `k` equal to the rival count returns the market
/// unchanged.
pub fn aggregate(market: &Market, scores: &RivalScores, k: usize) -> Result<AbstractedMarket> {
    let rivals = check_k(market, k)?;
    scores.validate(rivals)?;
    if k == rivals {
        return Ok(AbstractedMarket {
            market: market.clone(),
            kept_indices: (0..rivals).collect(),
            aggregated_indices: Vec::new(),
            aggregate_weights: Vec::new(),
            scores: scores.clone(),
            has_aggregate: false,
        });
    }
    let order = ranked(&scores.avg_scores);
    let mut kept = order[..k - 1].to_vec();
    kept.sort_unstable();
    let mut members = order[k - 1..].to_vec();
    members.sort_unstable();
    let agg = collapse(market, &members, scores)?;
    Ok(AbstractedMarket {
        market: assemble(market, &kept, Some((&agg, 1)))?,
        kept_indices: kept,
        aggregated_indices: members,
        aggregate_weights: agg.weights,
        scores: scores.clone(),
        has_aggregate: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    /// Keep the cheapest rivals.
    Min,
    /// Replace all rivals by identical copies of their mean.
    Avg,
}

/// Scores that make [`aggregate`] reproduce a heuristic's selection.
///
/// MIN ranks rivals by ascending price (avg score `R − rank`) with unit sum
/// scores. AVG uses uniform scores; its replication into `k` copies happens in
/// [`abstract_with_heuristic`].
pub fn heuristic_scores(market: &Market, kind: Heuristic, k: usize) -> Result<RivalScores> {
    let rivals = check_k(market, k)?;
    Ok(match kind {
        Heuristic::Avg => RivalScores::uniform(rivals),
        Heuristic::Min => {
            let neg_price: Vec<f64> = market.rivals().iter().map(|p| -p.price).collect();
            let mut avg = vec![0.0; rivals];
            for (rank, j) in ranked(&neg_price).into_iter().enumerate() {
                avg[j] = (rivals - rank) as f64;
            }
            RivalScores {
                sum_scores: vec![1.0; rivals],
                avg_scores: avg,
            }
        }
    })
}

pub fn abstract_with_heuristic(market: &Market, kind: Heuristic, k: usize) -> Result<AbstractedMarket> {
    let scores = heuristic_scores(market, kind, k)?;
    match kind {
        Heuristic::Min => aggregate(market, &scores, k),
        Heuristic::Avg => {
            let rivals = market.target_index();
            let members: Vec<usize> = (0..rivals).collect();
            let agg = collapse(market, &members, &scores)?;
            Ok(AbstractedMarket {
                market: assemble(market, &[], Some((&agg, k)))?,
                kept_indices: Vec::new(),
                aggregated_indices: members,
                aggregate_weights: agg.weights,
                scores,
                has_aggregate: true,
            })
        }
    }
}

/// Checks a set of curve sample prices against `market`.
pub(crate) fn check_prices(market: &Market, prices: &[f64]) -> Result<()> {
    if prices.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 price samples, got {}", prices.len())));
    }
    let cap = market.price_cap();
    if let Some(p) = prices.iter().find(|p| !(0.0..=cap).contains(*p)) {
        return Err(Error::Argument(format!("price sample {p} outside [0, {cap}]")));
    }
    Ok(())
}

/// `(1/L) Σ_k ((Y_k − Ŷ_k) / ‖Y‖_∞)²` for given profit vectors; 0 when `Y` is all zero.
pub fn normalized_mse(original: &[f64], abstracted: &[f64]) -> f64 {
    let norm = original.iter().fold(0.0f64, |acc, y| acc.max(y.abs()));
    if norm == 0.0 {
        return 0.0;
    }
    let sum: f64 = original.iter().zip(abstracted).map(|(y, z)| ((y - z) / norm).powi(2)).sum();
    sum / original.len() as f64
}

fn profits(market: &Market, prices: &[f64]) -> Result<Vec<f64>> {
    let oracle = ProfitOracle::new(market)?;
    prices.iter().map(|&p| oracle.eval(p).map(|c| c.profit)).collect()
}

/// Curve loss between an original market and a given abstraction of it.
pub fn curve_loss_between(original: &Market, abstracted: &Market, prices: &[f64]) -> Result<f64> {
    check_prices(original, prices)?;
    if original == abstracted {
        return Ok(0.0);
    }
    Ok(normalized_mse(&profits(original, prices)?, &profits(abstracted, prices)?))
}

/// Curve loss of the abstraction produced by `scorer` at `k`.
pub fn curve_loss(scorer: &ScorerModel, market: &Market, k: usize, prices: &[f64]) -> Result<f64> {
    let abs = aggregate(market, &scorer.score(market)?, k)?;
    curve_loss_between(market, &abs.market, prices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::{provider, user};
    use crate::market::{synth_market, AttributeRanges};
    use crate::pricing::{profit, uniform_grid};

    fn four_rivals() -> Market {
        Market::new(
            vec![
                provider("r1", 2.0, 10.0, 1.0, false),
                provider("r2", 4.0, 20.0, 2.0, false),
                provider("r3", 6.0, 30.0, 0.0, false),
                provider("r4", 8.0, 40.0, 3.0, false),
                provider("s", 5.0, 15.0, 1.5, true),
            ],
            vec![
                user("u1", 10.0, &[0.1, 0.2, 0.3, 0.4, 0.5]),
                user("u2", 20.0, &[1.0, 0.8, 0.6, 0.4, 0.2]),
            ],
            PreferenceParams::new(1.0, 1.0, vec![1.0, 2.0, 0.0, 3.0, 1.5]),
            20.0,
        )
        .unwrap()
    }

    #[test]
    fn weighted_aggregate_by_hand() {
        let m = four_rivals();
        let scores = RivalScores {
            sum_scores: vec![1.0, 0.5, 2.0, 0.25],
            avg_scores: vec![0.4, 0.3, 0.2, 0.1],
        };
        let a = aggregate(&m, &scores, 2).unwrap();
        assert_eq!(a.kept_indices, vec![0]);
        assert_eq!(a.aggregated_indices, vec![1, 2, 3]);
        let agg = &a.market.providers()[1];
        // Weights 0.3, 0.2, 0.1 over a total of 0.6.
        let close = |x: f64, y: f64| assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        close(agg.price, (0.3 * 4.0 + 0.2 * 6.0 + 0.1 * 8.0) / 0.6);
        close(agg.perceived_value, (0.3 * 2.0 + 0.2 * 0.0 + 0.1 * 3.0) / 0.6);
        close(agg.capacity, 0.5 * 20.0 + 2.0 * 30.0 + 0.25 * 40.0);
        close(a.market.delay(0, 1), (0.3 * 0.2 + 0.2 * 0.3 + 0.1 * 0.4) / 0.6);
        close(a.market.delay(1, 1), (0.3 * 0.8 + 0.2 * 0.6 + 0.1 * 0.4) / 0.6);
        assert_eq!(a.market.target(), m.target());
        assert_eq!(a.market.n_providers(), 3);
        assert_eq!(a.market.delay(1, 2), 0.2);
    }

    #[test]
    fn identity_when_all_rivals_kept() {
        let m = four_rivals();
        let a = aggregate(&m, &RivalScores::uniform(4), 4).unwrap();
        assert_eq!(a.market, m);
        assert!(!a.has_aggregate);
        let prices = uniform_grid(20.0, 9);
        assert_eq!(curve_loss_between(&m, &a.market, &prices).unwrap(), 0.0);
    }

    #[test]
    fn argument_and_weight_errors() {
        let m = four_rivals();
        let u = RivalScores::uniform(4);
        assert!(matches!(aggregate(&m, &u, 0), Err(Error::Argument(_))));
        assert!(matches!(aggregate(&m, &u, 5), Err(Error::Argument(_))));
        let zero_tail = RivalScores {
            sum_scores: vec![1.0; 4],
            avg_scores: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!(matches!(aggregate(&m, &zero_tail, 2), Err(Error::DegenerateWeights)));
        let zero_cap = RivalScores {
            sum_scores: vec![0.0; 4],
            avg_scores: vec![1.0; 4],
        };
        assert!(matches!(aggregate(&m, &zero_cap, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn heuristics() {
        let m = Market::new(
            vec![
                provider("a", 5.0, 10.0, 0.0, false),
                provider("b", 1.0, 30.0, 0.0, false),
                provider("c", 3.0, 20.0, 0.0, false),
                provider("s", 2.0, 10.0, 0.0, true),
            ],
            vec![user("u", 5.0, &[0.0; 4])],
            PreferenceParams::new(1.0, 0.0, vec![0.0; 4]),
            10.0,
        )
        .unwrap();
        let min = abstract_with_heuristic(&m, Heuristic::Min, 2).unwrap();
        assert_eq!(min.kept_indices, vec![1]);
        assert_eq!(min.market.providers()[1].capacity, 30.0);
        let avg = abstract_with_heuristic(&m, Heuristic::Avg, 1).unwrap();
        assert_eq!(avg.market.n_providers(), 2);
        assert_eq!(avg.market.providers()[0].capacity, 60.0);
        assert!((avg.market.providers()[0].price - 3.0).abs() < 1e-12);
        let avg2 = abstract_with_heuristic(&m, Heuristic::Avg, 3).unwrap();
        assert_eq!(avg2.market.n_providers(), 4);
        assert!(avg2.market.rivals().iter().all(|p| (p.capacity - 20.0).abs() < 1e-12));
    }

    #[test]
    fn replicas_are_equilibrium_equivalent_to_one_aggregate() {
        let m = synth_market(4, 2, 5, &AttributeRanges::default()).unwrap();
        let one = abstract_with_heuristic(&m, Heuristic::Avg, 1).unwrap();
        let three = abstract_with_heuristic(&m, Heuristic::Avg, 3).unwrap();
        for p in [0.5, 3.0, 9.0] {
            let (a, _) = profit(p, &one.market).unwrap();
            let (b, _) = profit(p, &three.market).unwrap();
            assert!((a - b).abs() < 1e-6 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn curve_loss_matches_hand_assembly() {
        let m = synth_market(2, 2, 4, &AttributeRanges::default()).unwrap();
        let prices = uniform_grid(m.price_cap(), 9);
        let abs = aggregate(&m, &RivalScores::uniform(3), 1).unwrap();
        let y: Vec<f64> = prices.iter().map(|&p| profit(p, &m).unwrap().0).collect();
        let z: Vec<f64> = prices.iter().map(|&p| profit(p, &abs.market).unwrap().0).collect();
        let norm = y.iter().cloned().fold(0.0, f64::max);
        let mut expected = 0.0;
        for k in 0..9 {
            expected += ((y[k] - z[k]) / norm).powi(2);
        }
        expected /= 9.0;
        let got = curve_loss(&ScorerModel::new(1), &m, 1, &prices).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn curve_loss_rejects_bad_samples() {
        let m = four_rivals();
        assert!(curve_loss_between(&m, &m, &[1.0]).is_err());
        assert!(curve_loss_between(&m, &m, &[1.0, 25.0]).is_err());
    }
}
