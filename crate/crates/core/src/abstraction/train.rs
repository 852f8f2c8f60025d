//! Scorer training on the curve loss.
//!
//! Gradients flow from the abstracted market's profit curve through the
//! equilibrium sensitivities of the aggregate rival's attributes, then through
//! the weighted-sum and weighted-average formulas into the scores, then into
//! the scorer. The top-(K−1) selection is held fixed within a step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{rival_features, Features};
use super::scorer::ScorerModel;
use super::{abstract_with_heuristic, aggregate, normalized_mse, Heuristic};
use crate::equilibrium::{solve_model, CostModel, FlowMatrix, SolverOptions};
use crate::error::{Error, Result};
use crate::market::{synth_market, AttributeRanges, Market};
use crate::pricing::ProfitOracle;
use crate::sensitivity::{KktSystem, Parameter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub k: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of scenarios held out for validation. Zero validates on the
    /// training scenarios themselves.
    pub validation_fraction: f64,
    pub patience: usize,
    /// Curve samples `L` per scenario.
    pub price_samples: usize,
    /// Candidate prices per stratum for the per-epoch jitter.
    pub jitter_points: usize,
    /// Share of degenerate scenarios in a batch above which SPSA replaces the
    /// analytic gradient.
    pub degenerate_fraction: f64,
    pub spsa_perturbation: f64,
    pub seed: u64,
    pub width: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            k: 2,
            max_epochs: 200,
            batch_size: 8,
            learning_rate: 3e-3,
            validation_fraction: 0.25,
            patience: 20,
            price_samples: 16,
            jitter_points: 8,
            degenerate_fraction: 0.1,
            spsa_perturbation: 1e-2,
            seed: 0,
            width: super::DEFAULT_WIDTH,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Argument("K must be >= 1".into()));
        }
        if self.batch_size == 0 || self.width == 0 || self.jitter_points == 0 {
            return Err(Error::Argument("batch_size, width and jitter_points must be > 0".into()));
        }
        if self.price_samples < 2 {
            return Err(Error::Argument("need at least 2 price samples".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Argument("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.spsa_perturbation > 0.0) {
            return Err(Error::Argument("learning_rate and spsa_perturbation must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub k: usize,
    pub n_train: usize,
    pub n_validation: usize,
    /// Validation loss of the starting scorer.
    pub initial_validation_loss: f64,
    /// Validation loss of the AVG heuristic at the same `K`.
    pub avg_baseline_validation_loss: f64,
    pub best_validation_loss: f64,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub epochs_run: usize,
    pub spsa_steps: usize,
    pub stopped_early: bool,
    pub wall_time: f64,
}

/// Deterministic set of synthetic training markets.
pub fn scenario_suite(
    seed: u64,
    count: usize,
    n_users: usize,
    n_providers: usize,
    ranges: &AttributeRanges,
) -> Result<Vec<Market>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synth_market(rng.random(), n_users, n_providers, ranges))
        .collect()
}

/// Fixed validation prices: stratum midpoints `(k + ½)/L · p^max`.
pub fn validation_prices(price_cap: f64, samples: usize) -> Vec<f64> {
    (0..samples)
        .map(|k| (k as f64 + 0.5) / samples as f64 * price_cap)
        .collect()
}

/// A scenario with its original-market profits precomputed at every price it
/// can be sampled at.
struct Prepared {
    market: Market,
    features: Vec<Features>,
    prices: Vec<f64>,
    profits: Vec<f64>,
    identity: bool,
}

impl Prepared {
    fn new(market: &Market, prices: Vec<f64>, k: usize) -> Result<Self> {
        let oracle = ProfitOracle::new(market)?;
        let profits = prices
            .par_iter()
            .map(|&p| oracle.eval(p).map(|c| c.profit))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            market: market.clone(),
            features: rival_features(market),
            prices,
            profits,
            identity: k == market.target_index(),
        })
    }
}

struct Sample {
    loss: f64,
    grad: Vec<f64>,
    degenerate: bool,
}

/// Curve loss at the chosen sample indices, with its gradient when asked.
fn scenario_loss(
    model: &ScorerModel,
    sc: &Prepared,
    picks: &[usize],
    k: usize,
    with_grad: bool,
) -> Result<Sample> {
    let zero = || Sample {
        loss: 0.0,
        grad: if with_grad { vec![0.0; model.n_params()] } else { Vec::new() },
        degenerate: false,
    };
    if sc.identity {
        return Ok(zero());
    }
    let y: Vec<f64> = picks.iter().map(|&q| sc.profits[q]).collect();
    let norm = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if norm == 0.0 {
        return Ok(zero());
    }
    let trace = model.forward(&sc.features)?;
    let abs = aggregate(&sc.market, &trace.scores, k)?;
    let a = abs.kept_indices.len();
    let target = a + 1;
    let n = sc.market.n_users();
    let mut wrt = vec![Parameter::Price(a), Parameter::Bias(a), Parameter::LogCapacity(a)];
    wrt.extend((0..n).map(|i| Parameter::Delay(i, a)));

    let mut model_k = CostModel::from_market(&abs.market);
    let opts = SolverOptions::default();
    let inv_l = 1.0 / picks.len() as f64;
    let mut loss = 0.0;
    let mut d_theta = vec![0.0; wrt.len()];
    let mut degenerate = false;
    let mut warm: Option<FlowMatrix> = None;
    for (&q, &yk) in picks.iter().zip(&y) {
        let price = sc.prices[q];
        model_k.set_price(target, price);
        let r = solve_model(&model_k, &opts, warm.as_ref(), |_, _| {})?;
        let load: f64 = (0..n).map(|i| r.flow.get(i, target)).sum();
        let resid = (yk - price * load) / norm;
        loss += resid * resid * inv_l;
        if with_grad {
            let d_profit = -2.0 * resid / norm * inv_l;
            let mut g = FlowMatrix::zeros(n, abs.market.n_providers());
            for i in 0..n {
                g.set(i, target, d_profit * price);
            }
            let lg = KktSystem::new(model_k.clone(), &r.flow)?.loss_gradient(&g, &wrt)?;
            degenerate |= lg.degenerate;
            for (acc, v) in d_theta.iter_mut().zip(&lg.values) {
                *acc += v;
            }
        }
        warm = Some(r.flow);
    }
    if !with_grad {
        return Ok(Sample {
            loss,
            grad: Vec::new(),
            degenerate,
        });
    }

    // Chain rule into the scores of the aggregated rivals.
    let agg = &abs.market.providers()[a];
    let (d_price, d_bias, d_logcap) = (d_theta[0], d_theta[1], d_theta[2]);
    let d_delay = &d_theta[3..];
    let scores = &trace.scores;
    let total_avg: f64 = abs.aggregated_indices.iter().map(|&j| scores.avg_scores[j]).sum();
    let rivals = sc.market.target_index();
    let mut d_sum = vec![0.0; rivals];
    let mut d_avg = vec![0.0; rivals];
    let providers = sc.market.providers();
    let biases = &sc.market.params().biases;
    for &j in &abs.aggregated_indices {
        let mut v = d_price * (providers[j].price - agg.price) + d_bias * (biases[j] - agg.perceived_value);
        for (i, dd) in d_delay.iter().enumerate() {
            v += dd * (sc.market.delay(i, j) - abs.market.delay(i, a));
        }
        d_avg[j] = v / total_avg;
        d_sum[j] = d_logcap * providers[j].capacity / agg.capacity;
    }
    Ok(Sample {
        loss,
        grad: model.backward(&trace, &d_sum, &d_avg),
        degenerate,
    })
}

fn batch_loss(
    model: &ScorerModel,
    items: &[(&Prepared, Vec<usize>)],
    k: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    let samples: Vec<Result<Sample>> = items
        .par_iter()
        .map(|(sc, picks)| scenario_loss(model, sc, picks, k, with_grad))
        .collect();
    let scale = 1.0 / items.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = if with_grad { vec![0.0; model.n_params()] } else { Vec::new() };
    let mut degenerate = 0;
    for s in samples {
        let s = s?;
        loss += s.loss * scale;
        for (g, v) in grad.iter_mut().zip(&s.grad) {
            *g += v * scale;
        }
        degenerate += usize::from(s.degenerate);
    }
    Ok((loss, grad, degenerate))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn spsa_gradient(
    model: &ScorerModel,
    items: &[(&Prepared, Vec<usize>)],
    k: usize,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let delta: Vec<f64> = (0..model.n_params())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let shifted = |sign: f64| {
        let mut m = model.clone();
        for (p, d) in m.params_mut().iter_mut().zip(&delta) {
            *p += sign * c * d;
        }
        m
    };
    let (up, _, _) = batch_loss(&shifted(1.0), items, k, false)?;
    let (down, _, _) = batch_loss(&shifted(-1.0), items, k, false)?;
    let scale = (up - down) / (2.0 * c);
    Ok(delta.iter().map(|d| scale * d).collect())
}

fn validation_loss(model: &ScorerModel, set: &[Prepared], k: usize) -> Result<f64> {
    let items: Vec<(&Prepared, Vec<usize>)> = set.iter().map(|sc| (sc, (0..sc.prices.len()).collect())).collect();
    Ok(batch_loss(model, &items, k, false)?.0)
}

fn avg_baseline_loss(set: &[Prepared], k: usize) -> Result<f64> {
    let losses = set
        .par_iter()
        .map(|sc| {
            let abs = abstract_with_heuristic(&sc.market, Heuristic::Avg, k)?;
            let oracle = ProfitOracle::new(&abs.market)?;
            let z = sc
                .prices
                .iter()
                .map(|&p| oracle.eval(p).map(|c| c.profit))
                .collect::<Result<Vec<_>>>()?;
            Ok(normalized_mse(&sc.profits, &z))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / set.len().max(1) as f64)
}

/// Minimizes the mean curve loss over `scenarios` with Adam, keeping the
/// parameters of the best validation epoch.
pub fn train_scorer(scenarios: &[Market], opts: &TrainOptions) -> Result<(ScorerModel, TrainReport)> {
    train_scorer_from(scenarios, opts, ScorerModel::with_width(opts.seed, opts.width))
}

/// [`train_scorer`] starting from `init` instead of a fresh model.
pub fn train_scorer_from(
    scenarios: &[Market],
    opts: &TrainOptions,
    init: ScorerModel,
) -> Result<(ScorerModel, TrainReport)> {
    let clock = Instant::now();
    opts.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Argument("no training scenarios".into()));
    }
    for (idx, m) in scenarios.iter().enumerate() {
        let rivals = m.target_index();
        if opts.k > rivals {
            return Err(Error::Argument(format!(
                "scenario {idx} has {rivals} rivals, fewer than K = {}",
                opts.k
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (scenarios.len() as f64 * opts.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() || (opts.validation_fraction > 0.0 && val_idx.is_empty()) {
        return Err(Error::Argument(format!(
            "split of {} scenarios leaves an empty training or validation set",
            scenarios.len()
        )));
    }
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let l = opts.price_samples;
    let g = opts.jitter_points;
    let train: Vec<Prepared> = train_idx
        .iter()
        .map(|&i| {
            let cap = scenarios[i].price_cap();
            let fine = (0..l * g)
                .map(|q| (q as f64 + 0.5) / (l * g) as f64 * cap)
                .collect();
            Prepared::new(&scenarios[i], fine, opts.k)
        })
        .collect::<Result<_>>()?;
    let val: Vec<Prepared> = val_idx
        .iter()
        .map(|&i| Prepared::new(&scenarios[i], validation_prices(scenarios[i].price_cap(), l), opts.k))
        .collect::<Result<_>>()?;

    let mut model = init;
    let initial = validation_loss(&model, &val, opts.k)?;
    let mut report = TrainReport {
        k: opts.k,
        n_train: train.len(),
        n_validation: if opts.validation_fraction > 0.0 { val.len() } else { 0 },
        initial_validation_loss: initial,
        avg_baseline_validation_loss: avg_baseline_loss(&val, opts.k)?,
        best_validation_loss: initial,
        best_epoch: 0,
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        epochs_run: 0,
        spsa_steps: 0,
        stopped_early: false,
        wall_time: 0.0,
    };
    if train.iter().all(|sc| sc.identity) {
        report.wall_time = clock.elapsed().as_secs_f64();
        return Ok((model, report));
    }

    let mut best = model.clone();
    let mut adam = Adam::new(model.n_params(), opts.learning_rate);
    let mut since_best = 0;
    let mut batch_order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opts.max_epochs {
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in batch_order.chunks(opts.batch_size) {
            let items: Vec<(&Prepared, Vec<usize>)> = chunk
                .iter()
                .map(|&t| (&train[t], (0..l).map(|s| s * g + rng.random_range(0..g)).collect()))
                .collect();
            let (loss, grad, degenerate) = batch_loss(&model, &items, opts.k, true)?;
            epoch_loss += loss * chunk.len() as f64;
            let grad = if degenerate as f64 > opts.degenerate_fraction * chunk.len() as f64 {
                report.spsa_steps += 1;
                spsa_gradient(&model, &items, opts.k, opts.spsa_perturbation, &mut rng)?
            } else {
                grad
            };
            adam.step(model.params_mut(), &grad);
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        let v = validation_loss(&model, &val, opts.k)?;
        report.validation_loss.push(v);
        report.epochs_run = epoch;
        if v < report.best_validation_loss {
            report.best_validation_loss = v;
            report.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.wall_time = clock.elapsed().as_secs_f64();
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::curve_loss;

    #[test]
    fn gradient_matches_finite_differences_on_a_slice() {
        let market = synth_market(21, 2, 5, &AttributeRanges::default()).unwrap();
        let prices: Vec<f64> = validation_prices(market.price_cap(), 8);
        let sc = Prepared::new(&market, prices, 2).unwrap();
        let picks: Vec<usize> = (0..8).collect();
        let mut model = ScorerModel::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in model.params_mut() {
            *p += 0.2 * (2.0 * rng.random::<f64>() - 1.0);
        }
        let s = scenario_loss(&model, &sc, &picks, 2, true).unwrap();
        assert!(!s.degenerate);
        let direct = curve_loss(&model, &market, 2, &sc.prices).unwrap();
        assert!((direct - s.loss).abs() < 1e-9 * direct.max(1e-12), "{direct} vs {}", s.loss);
        // The two largest-magnitude gradient entries form the frozen slice.
        let mut idx: Vec<usize> = (0..model.n_params()).collect();
        idx.sort_by(|&a, &b| s.grad[b].abs().total_cmp(&s.grad[a].abs()));
        for &q in &idx[..2] {
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[q] += delta;
                scenario_loss(&m, &sc, &picks, 2, false).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - s.grad[q]).abs() <= 1e-3 * fd.abs(), "param {q}: fd {fd} vs {}", s.grad[q]);
        }
    }

    #[test]
    fn identity_training_is_a_no_op() {
        let suite = scenario_suite(1, 4, 2, 3, &AttributeRanges::default()).unwrap();
        let opts = TrainOptions {
            k: 2,
            validation_fraction: 0.5,
            ..Default::default()
        };
        let (model, report) = train_scorer(&suite, &opts).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(report.initial_validation_loss, 0.0);
        assert_eq!(model, ScorerModel::new(0));
    }

    #[test]
    fn empty_split_is_rejected() {
        let suite = scenario_suite(1, 1, 2, 4, &AttributeRanges::default()).unwrap();
        let opts = TrainOptions::default();
        assert!(matches!(train_scorer(&suite, &opts), Err(Error::Argument(_))));
        assert!(matches!(train_scorer(&[], &opts), Err(Error::Argument(_))));
    }

    #[test]
    fn single_scenario_overfit() {
        let suite = scenario_suite(5, 1, 2, 6, &AttributeRanges::default()).unwrap();
        let opts = TrainOptions {
            validation_fraction: 0.0,
            max_epochs: 300,
            learning_rate: 1e-2,
            patience: 300,
            ..Default::default()
        };
        let (model, report) = train_scorer(&suite, &opts).unwrap();
        let prices = validation_prices(suite[0].price_cap(), 16);
        let loss = curve_loss(&model, &suite[0], 2, &prices).unwrap();
        assert!(loss < 1e-3, "loss {loss}, initial {}", report.initial_validation_loss);
    }
}
