use serde::Serialize;
use stackroute_core::pipeline::{price_with_abstraction, PipelineOptions};
use stackroute_core::pricing::{optimize_price_exact, optimize_price_sweep, oracle_profit, profit_ratio};
use stackroute_core::{Market, PricingResult, ScorerModel};

use super::Context;
use crate::config::Method;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct Abstraction {
    k: usize,
    kept_indices: Vec<usize>,
    aggregated_indices: Vec<usize>,
    abstracted_profit: f64,
}

#[derive(Serialize)]
struct PriceRecord {
    method: Method,
    pricing: PricingResult,
    oracle_profit: Option<f64>,
    abstraction: Option<Abstraction>,
}

pub fn run(ctx: &Context, scorer: Option<&std::path::Path>, market: Option<&std::path::Path>) -> CliResult<()> {
    let cfg = &ctx.config.price;
    let method = ctx.method.unwrap_or(cfg.method);
    let k = ctx.k.unwrap_or(cfg.k);
    let oracle = ctx.oracle || cfg.oracle;
    let market_path = market
        .or(cfg.market.as_deref())
        .ok_or_else(|| CliError::Config("price needs price.market or --market".into()))?;
    let market = Market::load(market_path)?;
    let scorer = match method {
        Method::Prillm => {
            let path = scorer
                .or(cfg.scorer.as_deref())
                .ok_or_else(|| CliError::Config("--method prillm needs a scorer (--scorer or price.scorer)".into()))?;
            Some(ScorerModel::load(path)?)
        }
        _ => None,
    };

    let record = match scorer {
        Some(scorer) => {
            let opts = PipelineOptions { sweep: cfg.sweep, oracle };
            let r = price_with_abstraction(&market, &scorer, k, &opts)?;
            PriceRecord {
                method,
                oracle_profit: r.oracle_profit,
                abstraction: Some(Abstraction {
                    k,
                    kept_indices: r.kept_indices,
                    aggregated_indices: r.aggregated_indices,
                    abstracted_profit: r.abstracted_profit,
                }),
                pricing: r.pricing,
            }
        }
        None => {
            let mut pricing = if method == Method::Exact {
                optimize_price_exact(&market)?
            } else {
                optimize_price_sweep(&market, &cfg.sweep)?
            };
            let best = if oracle { Some(oracle_profit(&market)?.profit) } else { None };
            pricing.oracle_ratio = best.map(|b| profit_ratio(pricing.best_profit, b));
            PriceRecord {
                method,
                pricing,
                oracle_profit: best,
                abstraction: None,
            }
        }
    };
    ctx.out.json("pricing.json", &record)?;
    ctx.out.csv("curve.csv", &record.pricing.curve)?;
    let p = &record.pricing;
    println!("best price = {:.6}, profit = {:.6}", p.best_price, p.best_profit);
    if let Some(r) = p.oracle_ratio {
        println!("oracle ratio = {r:.6}");
    }
    Ok(())
}
