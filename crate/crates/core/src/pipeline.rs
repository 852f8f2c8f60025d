//! Price a market through its abstraction: reduce, optimize the small game,
//! then score the chosen price in the full market.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{aggregate, AbstractedMarket, ScorerModel};
use crate::error::Result;
use crate::market::Market;
use crate::pricing::{
    optimize_price_exact, optimize_price_sweep, oracle_profit, profit, profit_ratio, PricingResult, SweepOptions,
    EXACT_SIZE_LIMIT,
};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub sweep: SweepOptions,
    /// Also compute the ratio to the full-market oracle.
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    /// `best_profit` is the profit of `best_price` in the original market;
    /// `curve` holds the abstracted market's samples.
    pub pricing: PricingResult,
    /// Profit the abstracted market predicts at `best_price`.
    pub abstracted_profit: f64,
    pub kept_indices: Vec<usize>,
    pub aggregated_indices: Vec<usize>,
    /// Seconds spent scoring, aggregating and optimizing; excludes the oracle.
    pub abstract_time: f64,
    pub oracle_profit: Option<f64>,
}

/// Largest number of joint support patterns for which [`optimize_price`]
/// prefers enumeration; beyond it the sweep is faster.
pub const EXACT_PATTERN_BUDGET: f64 = 512.0;

/// Exact enumeration when the market is small enough, sweep otherwise.
pub fn optimize_price(market: &Market, sweep: &SweepOptions) -> Result<PricingResult> {
    let (n, m) = (market.n_users(), market.n_providers());
    let patterns = (2f64.powi(m as i32) - 1.0).powi(n as i32);
    if n * m <= EXACT_SIZE_LIMIT && patterns <= EXACT_PATTERN_BUDGET {
        optimize_price_exact(market)
    } else {
        optimize_price_sweep(market, sweep)
    }
}

pub fn price_abstracted(
    market: &Market,
    abs: &AbstractedMarket,
    opts: &PipelineOptions,
    started: Instant,
) -> Result<PipelineResult> {
    let mut pricing = optimize_price(&abs.market, &opts.sweep)?;
    let abstracted_profit = pricing.best_profit;
    pricing.best_profit = profit(pricing.best_price, market)?.0;
    let abstract_time = started.elapsed().as_secs_f64();
    pricing.solve_time = abstract_time;
    let oracle = if opts.oracle {
        let best = oracle_profit(market)?.profit;
        pricing.oracle_ratio = Some(profit_ratio(pricing.best_profit, best));
        Some(best)
    } else {
        None
    };
    Ok(PipelineResult {
        pricing,
        abstracted_profit,
        kept_indices: abs.kept_indices.clone(),
        aggregated_indices: abs.aggregated_indices.clone(),
        abstract_time,
        oracle_profit: oracle,
    })
}

/// Scores rivals with `scorer`, keeps `k − 1` of them plus an aggregate, and
/// optimizes the target price on the reduced market.
pub fn price_with_abstraction(
    market: &Market,
    scorer: &ScorerModel,
    k: usize,
    opts: &PipelineOptions,
) -> Result<PipelineResult> {
    let started = Instant::now();
    let abs = aggregate(market, &scorer.score(market)?, k)?;
    price_abstracted(market, &abs, opts, started)
}
