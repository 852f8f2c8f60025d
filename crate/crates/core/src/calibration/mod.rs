//! Recovering preference parameters from observed daily flows.

mod fit;
mod search;
mod simplex;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_model, CostModel, FlowMatrix, SolverOptions, USED_ROUTE_FRACTION};
use crate::error::{Error, Result};
use crate::market::{DayObjective, Market, ObservedDay, PreferenceParams};
use simplex::{minimize, LpOutcome};

pub use fit::{fit_theta, flow_fit, CalibrationReport, FitOptions, FlowFit, MIN_WQ};
pub use search::{calibrate, CalibrateOptions, Calibration};

/// Objective weight on equality slacks when the exact LP is infeasible.
pub const SLACK_PENALTY: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasInit {
    pub biases: Vec<f64>,
    /// `Σ_j b_j`.
    pub objective: f64,
    /// Total slack needed to make the observed flows consistent; 0 when the
    /// exact LP is feasible.
    pub total_slack: f64,
    /// Per day, per user common marginal cost `λ_it` (0 for zero-demand users).
    pub multipliers: Vec<Vec<f64>>,
}

/// Marginal cost with zero bias: `p_j + w_d d_ij + w_q (L_j + f_ij)/α_j`.
fn observable_marginals(day: &ObservedDay, w_q: f64, w_d: f64) -> FlowMatrix {
    let theta = PreferenceParams::new(w_q, w_d, vec![0.0; day.n_providers()]);
    let model = CostModel::from_day(day, &theta);
    let loads = day.flows.loads();
    let mut out = FlowMatrix::zeros(day.n_users(), day.n_providers());
    for i in 0..day.n_users() {
        for j in 0..day.n_providers() {
            out.set(i, j, model.marginal_with(&day.flows, &loads, i, j));
        }
    }
    out
}

fn check_days(days: &[ObservedDay]) -> Result<(usize, usize)> {
    let first = days
        .first()
        .ok_or_else(|| Error::Argument("at least one observed day is required".into()))?;
    let shape = (first.n_users(), first.n_providers());
    if let Some(d) = days.iter().find(|d| (d.n_users(), d.n_providers()) != shape) {
        return Err(Error::Shape(format!(
            "day {} is {} x {}, expected {} x {}",
            d.date,
            d.n_users(),
            d.n_providers(),
            shape.0,
            shape.1
        )));
    }
    Ok(shape)
}

/// Smallest nonnegative biases under which the observed flows satisfy the
/// equilibrium conditions with unit weights, pooled across days.
///
/// Variables are `b ≥ 0` and a free multiplier per (day, user) with positive
/// demand. Used routes give `M'_ij − b_j = λ`, unused routes `M'_ij − b_j ≥ λ`.
/// If that system has no solution, every equality gets a two-sided slack
/// penalized by [`SLACK_PENALTY`].
pub fn init_biases(days: &[ObservedDay]) -> Result<BiasInit> {
    init_biases_weighted(days, 1.0, 1.0)
}

/// [`init_biases`] with the observable marginals computed under `(w_q, w_d)`.
pub fn init_biases_weighted(days: &[ObservedDay], w_q: f64, w_d: f64) -> Result<BiasInit> {
    let (n, m) = check_days(days)?;
    if !(w_q > 0.0 && w_d >= 0.0) {
        return Err(Error::Argument(format!("weights ({w_q}, {w_d}) must satisfy w_q > 0, w_d >= 0")));
    }
    let weights = (w_q, w_d);
    if let Some(found) = solve_bias_lp(days, n, m, weights, false)? {
        return Ok(found);
    }
    solve_bias_lp(days, n, m, weights, true)?
        .ok_or_else(|| Error::Lp("relaxed bias program is infeasible".into()))
}

fn solve_bias_lp(
    days: &[ObservedDay],
    n: usize,
    m: usize,
    (w_q, w_d): (f64, f64),
    relax: bool,
) -> Result<Option<BiasInit>> {
    struct Row {
        lambda: usize,
        j: usize,
        used: bool,
        rhs: f64,
    }
    let mut rows = Vec::new();
    let mut lambda_of = vec![vec![None; n]; days.len()];
    let mut n_lambda = 0;
    for (t, day) in days.iter().enumerate() {
        let marginals = observable_marginals(day, w_q, w_d);
        for i in 0..n {
            let d = day.demands[i];
            if d <= 0.0 {
                continue;
            }
            lambda_of[t][i] = Some(n_lambda);
            for j in 0..m {
                rows.push(Row {
                    lambda: n_lambda,
                    j,
                    used: day.flows.get(i, j) > USED_ROUTE_FRACTION * d,
                    rhs: marginals.get(i, j),
                });
            }
            n_lambda += 1;
        }
    }
    // Columns: b (m) | λ⁺ (n_lambda) | λ⁻ (n_lambda) | surplus per unused row | slack± per used row.
    let n_unused = rows.iter().filter(|r| !r.used).count();
    let n_used = rows.len() - n_unused;
    let surplus0 = m + 2 * n_lambda;
    let slack0 = surplus0 + n_unused;
    let cols = slack0 + if relax { 2 * n_used } else { 0 };
    let mut c = vec![0.0; cols];
    c[..m].fill(1.0);
    c[slack0..].fill(SLACK_PENALTY);
    let mut a = Vec::with_capacity(rows.len());
    let mut b = Vec::with_capacity(rows.len());
    let (mut next_surplus, mut next_slack) = (surplus0, slack0);
    for row in &rows {
        let mut line = vec![0.0; cols];
        line[row.j] = 1.0;
        line[m + row.lambda] = 1.0;
        line[m + n_lambda + row.lambda] = -1.0;
        if !row.used {
            line[next_surplus] = 1.0;
            next_surplus += 1;
        } else if relax {
            line[next_slack] = 1.0;
            line[next_slack + 1] = -1.0;
            next_slack += 2;
        }
        a.push(line);
        b.push(row.rhs);
    }
    match minimize(&c, &a, &b) {
        LpOutcome::Optimal { x, .. } => {
            let biases = x[..m].to_vec();
            let multipliers = lambda_of
                .iter()
                .map(|users| {
                    users
                        .iter()
                        .map(|l| l.map_or(0.0, |k| x[m + k] - x[m + n_lambda + k]))
                        .collect()
                })
                .collect();
            Ok(Some(BiasInit {
                objective: biases.iter().sum(),
                total_slack: x[slack0..].iter().sum(),
                biases,
                multipliers,
            }))
        }
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Err(Error::Lp("bias program is unbounded".into())),
        LpOutcome::Stalled => Err(Error::Lp("simplex pivot limit reached".into())),
    }
}

/// Equilibrium flows for `day` under `theta`.
pub fn predict_flows(theta: &PreferenceParams, day: &ObservedDay) -> Result<FlowMatrix> {
    predict_with(theta, day, &SolverOptions::default(), None)
}

pub(crate) fn predict_with(
    theta: &PreferenceParams,
    day: &ObservedDay,
    opts: &SolverOptions,
    start: Option<&FlowMatrix>,
) -> Result<FlowMatrix> {
    let wrap = |e: Error| Error::Day {
        date: day.date,
        source: Box::new(e),
    };
    theta.validate(day.n_providers()).map_err(wrap)?;
    if !(theta.w_q > 0.0) {
        return Err(wrap(Error::Degenerate("w_q must be > 0".into())));
    }
    let model = CostModel::from_day(day, theta);
    solve_model(&model, opts, start, |_, _| {})
        .map(|r| r.flow)
        .map_err(wrap)
}

/// Relative amplitude of the day-to-day perturbations in [`synthetic_days`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DayJitter {
    pub price: f64,
    pub demand: f64,
}

impl Default for DayJitter {
    fn default() -> Self {
        DayJitter {
            price: 0.3,
            demand: 0.2,
        }
    }
}

/// Days whose flows are exact equilibria of `market` (with its own
/// preference parameters) under independently jittered prices and demands.
/// Dates run consecutively from `start`.
pub fn synthetic_days(
    market: &Market,
    n_days: usize,
    seed: u64,
    jitter: DayJitter,
    start: NaiveDate,
) -> Result<Vec<ObservedDay>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DayObjective::from_market(market);
    (0..n_days)
        .map(|t| {
            let mut objective = base.clone();
            for p in objective.prices.iter_mut() {
                *p *= 1.0 + jitter.price * (2.0 * rng.random::<f64>() - 1.0);
            }
            let demands: Vec<f64> = market
                .demands()
                .iter()
                .map(|d| d * (1.0 + jitter.demand * (2.0 * rng.random::<f64>() - 1.0)))
                .collect();
            let date = start
                .checked_add_days(Days::new(t as u64))
                .ok_or_else(|| Error::Argument("date overflow".into()))?;
            let delays: Vec<&[f64]> = objective.delays.iter().map(Vec::as_slice).collect();
            let model = CostModel::build(&objective.prices, &objective.capacities, &delays, &demands, market.params());
            let opts = SolverOptions {
                tolerance: 1e-12,
                ..Default::default()
            };
            let flows = solve_model(&model, &opts, None, |_, _| {})?.flow;
            ObservedDay::new(date, flows, demands, objective)
        })
        .collect()
}
