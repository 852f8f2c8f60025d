//! User-side Nash equilibrium of the splittable routing game.
//!
//! Every user splits a fixed demand `D_i` over providers to minimize
//! `C_i = Σ_j f_ij (w_p p_j + w_q Q_j + w_d d_ij − b_j)` with `Q_j = L_j / α_j`.
//! The game has the exact potential
//!
//! ```text
//! Φ(F) = Σ_ij (w_p p_j + w_d d_ij − b_j) f_ij + Σ_j (w_q / 2α_j) (L_j² + Σ_i f_ij²)
//! ```
//!
//! whose partial derivatives are the users' marginal costs, so the unique
//! equilibrium is the minimizer of `Φ` over the product of demand simplices.
//! It is computed by round-robin exact best responses (each one a water-filling
//! solve), which never increase `Φ`. Once the support stops changing, the
//! equality-constrained system on that support is solved directly and accepted
//! if it is feasible and lowers `Φ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::market::{Market, ObservedDay, PreferenceParams};

/// Absolute tolerance on marginal costs for the equilibrium certificates.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ROUNDS: usize = 10_000;
/// A route counts as used when its flow exceeds this fraction of the user's demand.
pub const USED_ROUTE_FRACTION: f64 = 1e-9;

/// `n × m` allocation of user demand to providers, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowRows", into = "FlowRows")]
pub struct FlowMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FlowRows {
    n_users: usize,
    n_providers: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<FlowRows> for FlowMatrix {
    type Error = Error;

    fn try_from(r: FlowRows) -> Result<Self> {
        if r.rows.len() != r.n_users {
            return Err(Error::Shape(format!(
                "{} rows for {} users",
                r.rows.len(),
                r.n_users
            )));
        }
        let mut out = FlowMatrix::zeros(r.n_users, r.n_providers);
        for (i, row) in r.rows.iter().enumerate() {
            if row.len() != r.n_providers {
                return Err(Error::Shape(format!("row {i} has {} entries", row.len())));
            }
            out.row_mut(i).copy_from_slice(row);
        }
        Ok(out)
    }
}

impl From<FlowMatrix> for FlowRows {
    fn from(f: FlowMatrix) -> Self {
        FlowRows {
            n_users: f.n,
            n_providers: f.m,
            rows: (0..f.n).map(|i| f.row(i).to_vec()).collect(),
        }
    }
}

impl FlowMatrix {
    pub fn zeros(n: usize, m: usize) -> Self {
        FlowMatrix {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged flow rows".into()));
        }
        Ok(FlowMatrix {
            n: rows.len(),
            m,
            values: rows.concat(),
        })
    }

    /// Every user spreads demand evenly over all providers.
    pub fn uniform(demands: &[f64], m: usize) -> Self {
        let mut f = FlowMatrix::zeros(demands.len(), m);
        for (i, d) in demands.iter().enumerate() {
            f.row_mut(i).fill(d / m as f64);
        }
        f
    }

    pub fn n_users(&self) -> usize {
        self.n
    }

    pub fn n_providers(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.m + j] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.m + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column sums `L_j = Σ_i f_ij`.
    pub fn loads(&self) -> Vec<f64> {
        let mut loads = vec![0.0; self.m];
        for i in 0..self.n {
            for (l, f) in loads.iter_mut().zip(self.row(i)) {
                *l += f;
            }
        }
        loads
    }

    pub fn max_abs_diff(&self, other: &FlowMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Precomputed cost coefficients of one game instance.
///
/// `base_ij = w_p p_j + w_d d_ij − b_j` and `slope_j = w_q / α_j`, so the
/// marginal cost of `(i, j)` is `base_ij + slope_j (L_j + f_ij)`.
#[derive(Debug, Clone)]
pub struct CostModel {
    n: usize,
    m: usize,
    w_p: f64,
    w_q: f64,
    w_d: f64,
    prices: Vec<f64>,
    delays: Vec<f64>,
    /// `w_d d_ij − b_j`, the price-free part of `base`.
    fixed: Vec<f64>,
    base: Vec<f64>,
    capacity: Vec<f64>,
    slope: Vec<f64>,
    demand: Vec<f64>,
}

impl CostModel {
    pub fn from_market(market: &Market) -> Self {
        let prices: Vec<f64> = market.providers().iter().map(|p| p.price).collect();
        let capacity: Vec<f64> = market.providers().iter().map(|p| p.capacity).collect();
        let delays: Vec<&[f64]> = market.users().iter().map(|u| u.delays.as_slice()).collect();
        CostModel::build(&prices, &capacity, &delays, &market.demands(), market.params())
    }

    pub fn from_day(day: &ObservedDay, theta: &PreferenceParams) -> Self {
        let delays: Vec<&[f64]> = day.objective.delays.iter().map(Vec::as_slice).collect();
        CostModel::build(
            &day.objective.prices,
            &day.objective.capacities,
            &delays,
            &day.demands,
            theta,
        )
    }

    pub(crate) fn build(
        prices: &[f64],
        capacity: &[f64],
        delays: &[&[f64]],
        demand: &[f64],
        params: &PreferenceParams,
    ) -> Self {
        let (n, m) = (demand.len(), prices.len());
        let flat_delays: Vec<f64> = delays.concat();
        let fixed = (0..n * m)
            .map(|k| params.w_d * flat_delays[k] - params.biases[k % m])
            .collect();
        let mut model = CostModel {
            n,
            m,
            w_p: params.w_p,
            w_q: params.w_q,
            w_d: params.w_d,
            prices: prices.to_vec(),
            delays: flat_delays,
            fixed,
            base: vec![0.0; n * m],
            capacity: capacity.to_vec(),
            slope: capacity.iter().map(|a| params.w_q / a).collect(),
            demand: demand.to_vec(),
        };
        for j in 0..m {
            model.refresh_column(j);
        }
        model
    }

    fn refresh_column(&mut self, j: usize) {
        for i in 0..self.n {
            let k = i * self.m + j;
            self.base[k] = self.w_p * self.prices[j] + self.fixed[k];
        }
    }

    pub fn set_price(&mut self, j: usize, price: f64) {
        self.prices[j] = price;
        self.refresh_column(j);
    }

    pub fn n_users(&self) -> usize {
        self.n
    }

    pub fn n_providers(&self) -> usize {
        self.m
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub(crate) fn base(&self, i: usize, j: usize) -> f64 {
        self.base[i * self.m + j]
    }

    pub(crate) fn slope(&self, j: usize) -> f64 {
        self.slope[j]
    }

    pub(crate) fn delay(&self, i: usize, j: usize) -> f64 {
        self.delays[i * self.m + j]
    }

    pub(crate) fn weights(&self) -> (f64, f64, f64) {
        (self.w_p, self.w_q, self.w_d)
    }

    pub(crate) fn check_shape(&self, flow: &FlowMatrix) -> Result<()> {
        if flow.n_users() != self.n || flow.n_providers() != self.m {
            return Err(Error::Shape(format!(
                "flow is {} x {}, market is {} x {}",
                flow.n_users(),
                flow.n_providers(),
                self.n,
                self.m
            )));
        }
        Ok(())
    }

    pub(crate) fn marginal_with(&self, flow: &FlowMatrix, loads: &[f64], i: usize, j: usize) -> f64 {
        self.base(i, j) + self.slope[j] * (loads[j] + flow.get(i, j))
    }

    pub(crate) fn potential(&self, flow: &FlowMatrix) -> f64 {
        let loads = flow.loads();
        let mut fixed = 0.0;
        let mut own_sq = vec![0.0; self.m];
        for i in 0..self.n {
            for (j, f) in flow.row(i).iter().enumerate() {
                fixed += self.base(i, j) * f;
                own_sq[j] += f * f;
            }
        }
        let congestion: f64 = (0..self.m)
            .map(|j| 0.5 * self.slope[j] * (loads[j] * loads[j] + own_sq[j]))
            .sum();
        fixed + congestion
    }

    pub(crate) fn user_cost(&self, flow: &FlowMatrix, loads: &[f64], i: usize) -> f64 {
        flow.row(i)
            .iter()
            .enumerate()
            .map(|(j, f)| f * (self.base(i, j) + self.slope[j] * loads[j]))
            .sum()
    }

    /// Water-filling minimizer of `C_i` over user `i`'s demand simplex, with
    /// the other users' loads `others` held fixed.
    pub(crate) fn best_response_into(&self, i: usize, others: &[f64], order: &mut Vec<usize>, out: &mut [f64]) {
        let d = self.demand[i];
        out.fill(0.0);
        if d <= 0.0 {
            return;
        }
        // c_j: marginal cost at zero own flow; own flow adds 2·slope_j per unit.
        let cost = |j: usize| self.base(i, j) + self.slope[j] * others[j];
        order.clear();
        order.extend(0..self.m);
        order.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)));
        let mut sum_a = 0.0;
        let mut sum_ac = 0.0;
        let mut level = f64::INFINITY;
        let mut k = 0;
        while k < self.m {
            let j = order[k];
            let a = 0.5 / self.slope[j];
            sum_a += a;
            sum_ac += a * cost(j);
            level = (d + sum_ac) / sum_a;
            k += 1;
            if k == self.m || level <= cost(order[k]) {
                break;
            }
        }
        let mut total = 0.0;
        for &j in &order[..k] {
            out[j] = (0.5 / self.slope[j] * (level - cost(j))).max(0.0);
            total += out[j];
        }
        // Flat slopes amplify rounding in the level; restore the row sum exactly.
        if total > 0.0 && total != d {
            let k = d / total;
            out.iter_mut().for_each(|f| *f *= k);
        }
    }

    fn used_threshold(&self, i: usize) -> f64 {
        USED_ROUTE_FRACTION * self.demand[i]
    }

    pub(crate) fn is_used(&self, flow: &FlowMatrix, i: usize, j: usize) -> bool {
        self.demand[i] > 0.0 && flow.get(i, j) > self.used_threshold(i)
    }

    pub(crate) fn wardrop_gap(&self, flow: &FlowMatrix) -> f64 {
        let loads = flow.loads();
        let mut gap: f64 = 0.0;
        for i in 0..self.n {
            if self.demand[i] <= 0.0 {
                continue;
            }
            let mut max_used = f64::NEG_INFINITY;
            let mut min_all = f64::INFINITY;
            for j in 0..self.m {
                let mc = self.marginal_with(flow, &loads, i, j);
                min_all = min_all.min(mc);
                if self.is_used(flow, i, j) {
                    max_used = max_used.max(mc);
                }
            }
            if max_used.is_finite() {
                gap = gap.max(max_used - min_all);
            }
        }
        gap
    }

    /// Per-user multiplier: flow-weighted mean marginal cost over used routes.
    pub(crate) fn multipliers(&self, flow: &FlowMatrix) -> Vec<f64> {
        let loads = flow.loads();
        (0..self.n)
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for j in 0..self.m {
                    if self.is_used(flow, i, j) {
                        let f = flow.get(i, j);
                        num += f * self.marginal_with(flow, &loads, i, j);
                        den += f;
                    }
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Largest violation among primal feasibility, stationarity on used
    /// routes, dual feasibility and complementarity on unused routes.
    pub(crate) fn kkt_residual(&self, flow: &FlowMatrix, lambda: &[f64]) -> f64 {
        let loads = flow.loads();
        let mut r: f64 = 0.0;
        for i in 0..self.n {
            let row_sum: f64 = flow.row(i).iter().sum();
            r = r.max((row_sum - self.demand[i]).abs());
            for j in 0..self.m {
                let f = flow.get(i, j);
                r = r.max(-f);
                if self.demand[i] <= 0.0 {
                    continue;
                }
                let reduced = self.marginal_with(flow, &loads, i, j) - lambda[i];
                if self.is_used(flow, i, j) {
                    r = r.max(reduced.abs());
                } else {
                    r = r.max(-reduced).max((f * reduced).abs());
                }
            }
        }
        r
    }

    /// Solves the equality-constrained problem on a fixed support exactly.
    ///
    /// With `ν_i` the common marginal cost of user `i`, stationarity gives
    /// `f_ij = (ν_i − base_ij)/s_j − L_j` and `L_j = Σ_{k∈U_j} (ν_k − base_kj) / (s_j (1 + |U_j|))`;
    /// substituting into the demand rows leaves an SPD system in `ν`.
    pub(crate) fn solve_on_support(&self, active: &[bool]) -> Option<FlowMatrix> {
        let (n, m) = (self.n, self.m);
        let idx: Vec<usize> = (0..n).filter(|&i| self.demand[i] > 0.0).collect();
        let mut pos = vec![usize::MAX; n];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
            if !(0..m).any(|j| active[i * m + j]) {
                return None;
            }
        }
        let users_on: Vec<Vec<usize>> = (0..m)
            .map(|j| idx.iter().copied().filter(|&i| active[i * m + j]).collect())
            .collect();
        let share: Vec<f64> = (0..m)
            .map(|j| 1.0 / (self.slope[j] * (1.0 + users_on[j].len() as f64)))
            .collect();
        let k = idx.len();
        let mut g = DMatrix::<f64>::zeros(k, k);
        let mut rhs = vec![0.0; k];
        for (r, &i) in idx.iter().enumerate() {
            rhs[r] = self.demand[i];
            for j in (0..m).filter(|&j| active[i * m + j]) {
                g[(r, r)] += 1.0 / self.slope[j];
                rhs[r] += self.base(i, j) / self.slope[j];
                for &q in &users_on[j] {
                    g[(r, pos[q])] -= share[j];
                    rhs[r] -= self.base(q, j) * share[j];
                }
            }
        }
        let nu = solve_dense(g, &rhs)?;
        let loads: Vec<f64> = (0..m)
            .map(|j| users_on[j].iter().map(|&i| nu[pos[i]] - self.base(i, j)).sum::<f64>() * share[j])
            .collect();
        let mut flow = FlowMatrix::zeros(n, m);
        for &i in &idx {
            for j in (0..m).filter(|&j| active[i * m + j]) {
                flow.set(i, j, (nu[pos[i]] - self.base(i, j)) / self.slope[j] - loads[j]);
            }
        }
        Some(flow)
    }

    fn support(&self, flow: &FlowMatrix) -> Vec<bool> {
        (0..self.n)
            .flat_map(|i| (0..self.m).map(move |j| (i, j)))
            .map(|(i, j)| self.is_used(flow, i, j))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_rounds: usize,
    /// Try the exact support solve once the support is stable.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_rounds: DEFAULT_MAX_ROUNDS,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub flow: FlowMatrix,
    /// Common marginal cost on each user's used routes (0 for zero demand).
    pub user_multipliers: Vec<f64>,
    pub potential: f64,
    pub wardrop_gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// `Q_j = L_j / α_j`.
    pub congestion: Vec<f64>,
}

impl EquilibriumResult {
    pub fn loads(&self) -> Vec<f64> {
        self.flow.loads()
    }
}

fn check_costs(model: &CostModel, market_wq: f64) -> Result<()> {
    if !(market_wq > 0.0) {
        return Err(Error::Degenerate(format!(
            "w_q = {market_wq}; the equilibrium solver needs w_q > 0"
        )));
    }
    if model.capacity.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Degenerate("capacities must be > 0".into()));
    }
    Ok(())
}

pub fn solve_equilibrium(market: &Market) -> Result<EquilibriumResult> {
    solve_equilibrium_with(market, &SolverOptions::default(), None)
}

pub fn solve_equilibrium_with(
    market: &Market,
    opts: &SolverOptions,
    start: Option<&FlowMatrix>,
) -> Result<EquilibriumResult> {
    let model = CostModel::from_market(market);
    check_costs(&model, market.params().w_q)?;
    solve_model(&model, opts, start, |_, _| {})
}

/// Round-robin best responses from `start` (uniform split by default).
/// `observe(round, potential)` is called after each full round.
pub(crate) fn solve_model(
    model: &CostModel,
    opts: &SolverOptions,
    start: Option<&FlowMatrix>,
    mut observe: impl FnMut(usize, f64),
) -> Result<EquilibriumResult> {
    let (n, m) = (model.n, model.m);
    let mut flow = match start {
        Some(f) => {
            model.check_shape(f)?;
            f.clone()
        }
        None => FlowMatrix::uniform(&model.demand, m),
    };
    let mut order = Vec::with_capacity(m);
    let mut row = vec![0.0; m];
    let mut others = vec![0.0; m];
    let mut last_support: Option<Vec<bool>> = None;
    let mut gap = f64::INFINITY;

    for round in 1..=opts.max_rounds {
        let mut loads = flow.loads();
        for i in 0..n {
            for j in 0..m {
                others[j] = loads[j] - flow.get(i, j);
            }
            model.best_response_into(i, &others, &mut order, &mut row);
            for j in 0..m {
                loads[j] = others[j] + row[j];
            }
            flow.row_mut(i).copy_from_slice(&row);
        }
        observe(round, model.potential(&flow));

        gap = model.wardrop_gap(&flow);
        if gap <= opts.tolerance {
            if let Some(done) = finish(model, &flow, round, opts.tolerance) {
                return Ok(done);
            }
        }
        if opts.polish {
            let support = model.support(&flow);
            if last_support.as_ref() == Some(&support) {
                if let Some(polished) = polish(model, &flow, &support) {
                    flow = polished;
                    if let Some(done) = finish(model, &flow, round, opts.tolerance) {
                        return Ok(done);
                    }
                }
            }
            last_support = Some(support);
        }
    }
    Err(Error::Convergence {
        rounds: opts.max_rounds,
        gap,
    })
}

fn polish(model: &CostModel, flow: &FlowMatrix, support: &[bool]) -> Option<FlowMatrix> {
    let mut candidate = model.solve_on_support(support)?;
    for i in 0..model.n {
        let floor = -1e-12 * model.demand[i].max(1.0);
        for f in candidate.row_mut(i) {
            if *f < floor || !f.is_finite() {
                return None;
            }
            *f = f.max(0.0);
        }
    }
    let current = model.potential(flow);
    let polished = model.potential(&candidate);
    (polished <= current + 1e-12 * current.abs().max(1.0)).then_some(candidate)
}

fn finish(model: &CostModel, flow: &FlowMatrix, rounds: usize, tol: f64) -> Option<EquilibriumResult> {
    let gap = model.wardrop_gap(flow);
    let lambda = model.multipliers(flow);
    let kkt = model.kkt_residual(flow, &lambda);
    if gap > tol || kkt > tol {
        return None;
    }
    let loads = flow.loads();
    Some(EquilibriumResult {
        flow: flow.clone(),
        potential: model.potential(flow),
        user_multipliers: lambda,
        wardrop_gap: gap,
        kkt_residual: kkt,
        iterations: rounds,
        congestion: loads.iter().zip(&model.capacity).map(|(l, a)| l / a).collect(),
    })
}

fn checked_model(flow: &FlowMatrix, market: &Market) -> Result<CostModel> {
    let model = CostModel::from_market(market);
    model.check_shape(flow)?;
    Ok(model)
}

/// `C_i` with congestion computed from the full flow.
pub fn user_cost(i: usize, flow: &FlowMatrix, market: &Market) -> Result<f64> {
    let model = checked_model(flow, market)?;
    if i >= model.n {
        return Err(Error::Shape(format!("user {i} out of range")));
    }
    Ok(model.user_cost(flow, &flow.loads(), i))
}

pub fn potential(flow: &FlowMatrix, market: &Market) -> Result<f64> {
    Ok(checked_model(flow, market)?.potential(flow))
}

/// `∂Φ/∂f_ij = w_p p_j + w_d d_ij − b_j + (w_q/α_j)(L_j + f_ij)`.
pub fn marginal_cost(i: usize, j: usize, flow: &FlowMatrix, market: &Market) -> Result<f64> {
    let model = checked_model(flow, market)?;
    if i >= model.n || j >= model.m {
        return Err(Error::Shape(format!("route ({i}, {j}) out of range")));
    }
    Ok(model.marginal_with(flow, &flow.loads(), i, j))
}

/// User `i`'s exact best response with everyone else's flow held fixed.
pub fn best_response(i: usize, flow: &FlowMatrix, market: &Market) -> Result<Vec<f64>> {
    let model = checked_model(flow, market)?;
    check_costs(&model, market.params().w_q)?;
    if i >= model.n {
        return Err(Error::Shape(format!("user {i} out of range")));
    }
    let loads = flow.loads();
    let others: Vec<f64> = (0..model.m).map(|j| loads[j] - flow.get(i, j)).collect();
    let mut out = vec![0.0; model.m];
    model.best_response_into(i, &others, &mut Vec::new(), &mut out);
    Ok(out)
}

pub fn wardrop_gap(flow: &FlowMatrix, market: &Market) -> Result<f64> {
    Ok(checked_model(flow, market)?.wardrop_gap(flow))
}
