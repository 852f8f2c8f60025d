//! The target provider's pricing problem: maximize `p_s · L_s(p_s)` where
//! `L_s` is the target's load at the users' equilibrium.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_model, CostModel, SolverOptions};
use crate::error::{Error, Result};
use crate::market::Market;

pub const DEFAULT_COARSE_POINTS: usize = 64;
/// Largest `n · m` for which [`optimize_price_exact`] enumerates supports.
pub const EXACT_SIZE_LIMIT: usize = 12;
/// Grid size of the dense oracle used above [`EXACT_SIZE_LIMIT`].
pub const DENSE_ORACLE_POINTS: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub price: f64,
    pub profit: f64,
    pub load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricingMethod {
    SweepRefine,
    ExactPiecewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResult {
    pub best_price: f64,
    pub best_profit: f64,
    /// Samples sorted by price.
    pub curve: Vec<CurvePoint>,
    pub method: PricingMethod,
    pub oracle_ratio: Option<f64>,
    pub solve_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub coarse_points: usize,
    /// Bracket width at which refinement stops; `None` means `p^max · 1e-4`.
    pub refine_tol: Option<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            coarse_points: DEFAULT_COARSE_POINTS,
            refine_tol: None,
        }
    }
}

impl SweepOptions {
    pub fn tolerance(&self, price_cap: f64) -> f64 {
        self.refine_tol.unwrap_or(price_cap * 1e-4)
    }
}

/// Evaluates the target's profit at arbitrary prices of one market.
#[derive(Debug, Clone)]
pub struct ProfitOracle {
    model: CostModel,
    target: usize,
    cap: f64,
}

impl ProfitOracle {
    pub fn new(market: &Market) -> Result<Self> {
        if !(market.params().w_q > 0.0) {
            return Err(Error::Degenerate("w_q must be > 0".into()));
        }
        Ok(ProfitOracle {
            model: CostModel::from_market(market),
            target: market.target_index(),
            cap: market.price_cap(),
        })
    }

    pub fn price_cap(&self) -> f64 {
        self.cap
    }

    pub fn eval(&self, price: f64) -> Result<CurvePoint> {
        if !(0.0..=self.cap).contains(&price) {
            return Err(Error::Argument(format!("price {price} outside [0, {}]", self.cap)));
        }
        let mut model = self.model.clone();
        model.set_price(self.target, price);
        let r = solve_model(&model, &SolverOptions::default(), None, |_, _| {})?;
        let load: f64 = (0..model.n_users()).map(|i| r.flow.get(i, self.target)).sum();
        Ok(CurvePoint {
            price,
            profit: price * load,
            load,
        })
    }

    pub fn curve(&self, grid: &[f64]) -> Result<Vec<CurvePoint>> {
        grid.par_iter().map(|&p| self.eval(p)).collect()
    }
}

/// `(p_s · L_s, L_s)` at target price `price`.
pub fn profit(price: f64, market: &Market) -> Result<(f64, f64)> {
    let point = ProfitOracle::new(market)?.eval(price)?;
    Ok((point.profit, point.load))
}

pub fn profit_curve(market: &Market, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Argument("price grid must be sorted".into()));
    }
    ProfitOracle::new(market)?.curve(grid)
}

/// `points` evenly spaced prices over `[0, cap]`, both ends included.
pub fn uniform_grid(cap: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![cap],
        _ => (0..points)
            .map(|k| if k + 1 == points { cap } else { cap * k as f64 / (points - 1) as f64 })
            .collect(),
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;
/// Bound on bracket splits after unimodality violations.
const MAX_SPLITS: usize = 64;

struct Refiner<'a> {
    oracle: &'a ProfitOracle,
    tol: f64,
    seen: Vec<CurvePoint>,
    splits: usize,
}

impl Refiner<'_> {
    fn probe(&mut self, p: f64) -> Result<f64> {
        let point = self.oracle.eval(p)?;
        self.seen.push(point);
        Ok(point.profit)
    }

    /// Golden-section search for a maximum on `[a, b]`. A probe below both of
    /// its neighbours means the bracket holds more than one piece; it is then
    /// split at that probe and both halves are searched.
    fn refine(&mut self, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64) -> Result<()> {
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = self.probe(c)?;
        let mut fd = self.probe(d)?;
        while b - a > self.tol {
            let dip = if fc < fa && fc < fd {
                Some((c, fc))
            } else if fd < fc && fd < fb {
                Some((d, fd))
            } else {
                None
            };
            if let Some((x, fx)) = dip {
                if self.splits < MAX_SPLITS {
                    self.splits += 1;
                    self.refine(a, x, fa, fx)?;
                    return self.refine(x, b, fx, fb);
                }
            }
            if fc >= fd {
                (b, fb) = (d, fd);
                (d, fd) = (c, fc);
                c = b - INV_PHI * (b - a);
                fc = self.probe(c)?;
            } else {
                (a, fa) = (c, fc);
                (c, fc) = (d, fd);
                d = a + INV_PHI * (b - a);
                fd = self.probe(d)?;
            }
        }
        Ok(())
    }
}

fn best_of(curve: &[CurvePoint]) -> CurvePoint {
    // Highest profit; ties go to the lowest price.
    *curve
        .iter()
        .reduce(|best, p| if p.profit > best.profit { p } else { best })
        .expect("non-empty curve")
}

fn sorted(mut curve: Vec<CurvePoint>) -> Vec<CurvePoint> {
    curve.sort_by(|a, b| a.price.total_cmp(&b.price));
    curve.dedup_by(|a, b| a.price == b.price);
    curve
}

/// Coarse uniform sweep, then golden-section refinement around every coarse
/// local maximum.
pub fn optimize_price_sweep(market: &Market, opts: &SweepOptions) -> Result<PricingResult> {
    let clock = Instant::now();
    if opts.coarse_points < 8 {
        return Err(Error::Argument(format!(
            "coarse_points must be >= 8, got {}",
            opts.coarse_points
        )));
    }
    let oracle = ProfitOracle::new(market)?;
    let cap = oracle.price_cap();
    let tol = opts.tolerance(cap);
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("refine_tol must be > 0, got {tol}")));
    }
    let coarse = oracle.curve(&uniform_grid(cap, opts.coarse_points))?;
    let mut refiner = Refiner {
        oracle: &oracle,
        tol,
        seen: coarse.clone(),
        splits: 0,
    };
    let last = coarse.len() - 1;
    for k in 0..=last {
        let left = if k == 0 { f64::NEG_INFINITY } else { coarse[k - 1].profit };
        let right = if k == last { f64::NEG_INFINITY } else { coarse[k + 1].profit };
        let here = coarse[k].profit;
        if here < left || here < right || (here == left && k > 0) {
            continue;
        }
        let lo = coarse[k.saturating_sub(1)];
        let hi = coarse[(k + 1).min(last)];
        refiner.refine(lo.price, hi.price, lo.profit, hi.profit)?;
    }
    let curve = sorted(refiner.seen);
    let best = best_of(&curve);
    Ok(PricingResult {
        best_price: best.price,
        best_profit: best.profit,
        curve,
        method: PricingMethod::SweepRefine,
        oracle_ratio: None,
        solve_time: clock.elapsed().as_secs_f64(),
    })
}

/// `u + v·p`.
#[derive(Debug, Clone, Copy)]
struct Affine {
    u: f64,
    v: f64,
}

impl Affine {
    fn at(&self, p: f64) -> f64 {
        self.u + self.v * p
    }
}

/// Narrows `[lo, hi]` to where `g(p) ≥ −tol`.
fn restrict(lo: &mut f64, hi: &mut f64, g: Affine, tol: f64) {
    if g.v.abs() <= 1e-14 * g.u.abs().max(1.0) {
        if g.u < -tol {
            *hi = f64::NEG_INFINITY;
        }
        return;
    }
    let root = (-tol - g.u) / g.v;
    if g.v > 0.0 {
        *lo = lo.max(root);
    } else {
        *hi = hi.min(root);
    }
}

/// Exhaustive enumeration of support patterns. Each pattern's KKT solution is
/// affine in the target price, so its validity set is an interval and the
/// profit on it is a quadratic maximized in closed form. The best price is
/// re-solved with the equilibrium solver to report the attained profit.
pub fn optimize_price_exact(market: &Market) -> Result<PricingResult> {
    let clock = Instant::now();
    let (n, m) = (market.n_users(), market.n_providers());
    if n * m > EXACT_SIZE_LIMIT {
        return Err(Error::Scale {
            size: n * m,
            limit: EXACT_SIZE_LIMIT,
        });
    }
    let oracle = ProfitOracle::new(market)?;
    let cap = oracle.price_cap();
    let target = market.target_index();
    let demand = market.demands();
    let users: Vec<usize> = (0..n).filter(|&i| demand[i] > 0.0).collect();
    let per_user = (1usize << m) - 1;
    let total = per_user.pow(users.len() as u32);

    let mut at_zero = CostModel::from_market(market);
    at_zero.set_price(target, 0.0);
    let mut at_cap = at_zero.clone();
    at_cap.set_price(target, cap);

    let candidates: Vec<Vec<CurvePoint>> = (0..total)
        .into_par_iter()
        .map(|code| {
            let mut active = vec![false; n * m];
            let mut rest = code;
            for &i in &users {
                let mask = rest % per_user + 1;
                rest /= per_user;
                for j in 0..m {
                    active[i * m + j] = mask >> j & 1 == 1;
                }
            }
            piece_candidates(&at_zero, &at_cap, &active, target, cap, &demand)
        })
        .collect();
    let mut curve: Vec<CurvePoint> = candidates.into_iter().flatten().collect();
    if curve.is_empty() {
        return Err(Error::Numerical("no support pattern is valid at any price".into()));
    }
    curve = sorted(curve);
    let best = best_of(&curve);
    let attained = oracle.eval(best.price)?;
    Ok(PricingResult {
        best_price: attained.price,
        best_profit: attained.profit,
        curve,
        method: PricingMethod::ExactPiecewise,
        oracle_ratio: None,
        solve_time: clock.elapsed().as_secs_f64(),
    })
}

fn piece_candidates(
    at_zero: &CostModel,
    at_cap: &CostModel,
    active: &[bool],
    target: usize,
    cap: f64,
    demand: &[f64],
) -> Vec<CurvePoint> {
    let (n, m) = (at_zero.n_users(), at_zero.n_providers());
    let (Some(f0), Some(f1)) = (at_zero.solve_on_support(active), at_cap.solve_on_support(active)) else {
        return Vec::new();
    };
    let affine = |a: f64, b: f64| Affine { u: a, v: (b - a) / cap };
    let (l0, l1) = (f0.loads(), f1.loads());
    let (mut lo, mut hi) = (0.0, cap);
    for i in 0..n {
        if demand[i] <= 0.0 {
            continue;
        }
        let tol = 1e-9 * demand[i].max(1.0);
        let Some(anchor) = (0..m).find(|&j| active[i * m + j]) else {
            return Vec::new();
        };
        let nu0 = at_zero.marginal_with(&f0, &l0, i, anchor);
        let nu1 = at_cap.marginal_with(&f1, &l1, i, anchor);
        for j in 0..m {
            if active[i * m + j] {
                restrict(&mut lo, &mut hi, affine(f0.get(i, j), f1.get(i, j)), tol);
            } else {
                let r0 = at_zero.marginal_with(&f0, &l0, i, j) - nu0;
                let r1 = at_cap.marginal_with(&f1, &l1, i, j) - nu1;
                restrict(&mut lo, &mut hi, affine(r0, r1), 1e-9);
            }
        }
        if lo > hi {
            return Vec::new();
        }
    }
    let load = affine(l0[target], l1[target]);
    let mut prices = vec![lo, hi];
    if load.v < 0.0 {
        let vertex = -load.u / (2.0 * load.v);
        if vertex > lo && vertex < hi {
            prices.push(vertex);
        }
    }
    prices
        .into_iter()
        .map(|p| {
            let l = load.at(p).max(0.0);
            CurvePoint {
                price: p,
                profit: p * l,
                load: l,
            }
        })
        .collect()
}

/// Best attainable profit used as the reference for ratios: the exact oracle
/// when `n · m ≤ 12`, otherwise the best of a dense uniform grid.
pub fn oracle_profit(market: &Market) -> Result<CurvePoint> {
    if market.n_users() * market.n_providers() <= EXACT_SIZE_LIMIT {
        let r = optimize_price_exact(market)?;
        return Ok(CurvePoint {
            price: r.best_price,
            profit: r.best_profit,
            load: if r.best_price > 0.0 { r.best_profit / r.best_price } else { 0.0 },
        });
    }
    let oracle = ProfitOracle::new(market)?;
    let curve = oracle.curve(&uniform_grid(oracle.price_cap(), DENSE_ORACLE_POINTS))?;
    Ok(best_of(&curve))
}

/// `achieved / max(oracle, achieved)`, so a method that beats the reference
/// grid scores 1. Two zero profits count as a perfect match.
pub fn profit_ratio(achieved: f64, oracle: f64) -> f64 {
    let denom = oracle.max(achieved);
    if denom > 0.0 {
        achieved / denom
    } else {
        1.0
    }
}
