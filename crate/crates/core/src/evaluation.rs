//! Method × market comparison of profit ratios and solve times.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{abstract_with_heuristic, aggregate, Heuristic, ScorerModel};
use crate::error::{Error, Result};
use crate::market::Market;
use crate::pipeline::{price_abstracted, PipelineOptions};
use crate::pricing::{oracle_profit, profit_ratio, SweepOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMethod {
    /// Learned abstraction keeping `K − 1` rivals.
    Da(usize),
    Min,
    Avg,
    /// The oracle itself.
    Bf,
}

impl EvalMethod {
    /// `DA_1 .. DA_4, MIN, AVG, BF`.
    pub fn standard() -> Vec<EvalMethod> {
        let mut v: Vec<EvalMethod> = (1..=4).map(EvalMethod::Da).collect();
        v.extend([EvalMethod::Min, EvalMethod::Avg, EvalMethod::Bf]);
        v
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMethod::Da(k) => write!(f, "DA_{k}"),
            EvalMethod::Min => f.write_str("MIN"),
            EvalMethod::Avg => f.write_str("AVG"),
            EvalMethod::Bf => f.write_str("BF"),
        }
    }
}

impl FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "MIN" => Ok(EvalMethod::Min),
            "AVG" => Ok(EvalMethod::Avg),
            "BF" => Ok(EvalMethod::Bf),
            _ => upper
                .strip_prefix("DA_")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(EvalMethod::Da)
                .ok_or_else(|| Error::Argument(format!("unknown method `{s}` (expected DA_<K>, MIN, AVG or BF)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub market: String,
    pub profit_ratio: f64,
    pub price: f64,
    pub profit: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_profit_ratio: f64,
    pub mean_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    /// Market-major, methods in the requested order.
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
}

impl EvalTable {
    pub fn mean_ratio(&self, method: EvalMethod) -> Option<f64> {
        let label = method.to_string();
        self.summary.iter().find(|s| s.method == label).map(|s| s.mean_profit_ratio)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalConfig {
    pub methods: Vec<EvalMethod>,
    /// Trained scorers by the `K` they were trained for.
    pub scorers: BTreeMap<usize, ScorerModel>,
    /// `K` used by the MIN and AVG heuristics.
    pub heuristic_k: usize,
    pub sweep: SweepOptions,
}

/// Runs every method on every market. Markets are processed one at a time so
/// the reported times are not skewed by sharing cores between methods.
pub fn run_eval(markets: &[(String, Market)], config: &EvalConfig) -> Result<EvalTable> {
    if config.methods.is_empty() {
        return Err(Error::Argument("empty method list".into()));
    }
    if markets.is_empty() {
        return Err(Error::Argument("no markets to evaluate".into()));
    }
    for m in &config.methods {
        if let EvalMethod::Da(k) = m {
            if !config.scorers.contains_key(k) {
                return Err(Error::Argument(format!("no scorer trained for {m}")));
            }
        }
    }
    let opts = PipelineOptions {
        sweep: config.sweep,
        oracle: false,
    };
    let mut rows = Vec::with_capacity(markets.len() * config.methods.len());
    for (name, market) in markets {
        let clock = Instant::now();
        let oracle = oracle_profit(market)?;
        let oracle_time = clock.elapsed().as_secs_f64();
        for &method in &config.methods {
            let started = Instant::now();
            let (price, profit, time) = match method {
                EvalMethod::Bf => (oracle.price, oracle.profit, oracle_time),
                EvalMethod::Da(k) => {
                    let abs = aggregate(market, &config.scorers[&k].score(market)?, k)?;
                    let r = price_abstracted(market, &abs, &opts, started)?;
                    (r.pricing.best_price, r.pricing.best_profit, r.abstract_time)
                }
                EvalMethod::Min | EvalMethod::Avg => {
                    let kind = if method == EvalMethod::Min { Heuristic::Min } else { Heuristic::Avg };
                    let abs = abstract_with_heuristic(market, kind, config.heuristic_k)?;
                    let r = price_abstracted(market, &abs, &opts, started)?;
                    (r.pricing.best_price, r.pricing.best_profit, r.abstract_time)
                }
            };
            rows.push(EvalRow {
                method: method.to_string(),
                market: name.clone(),
                profit_ratio: profit_ratio(profit, oracle.profit),
                price,
                profit,
                time,
            });
        }
    }
    let summary = config
        .methods
        .iter()
        .map(|m| {
            let label = m.to_string();
            let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == label).collect();
            let count = mine.len() as f64;
            MethodSummary {
                mean_profit_ratio: mine.iter().map(|r| r.profit_ratio).sum::<f64>() / count,
                mean_time: mine.iter().map(|r| r.time).sum::<f64>() / count,
                method: label,
            }
        })
        .collect();
    Ok(EvalTable { rows, summary })
}
