use std::collections::BTreeMap;

use serde::Serialize;
use stackroute_core::abstraction::{scenario_suite, train_scorer};
use stackroute_core::evaluation::{run_eval, EvalConfig, EvalMethod};
use stackroute_core::{Error, Market, ScorerModel, TrainOptions};

use super::Context;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct Row<'a> {
    method: &'a str,
    market: &'a str,
    profit_ratio: f64,
    time: f64,
}

/// Seed offset separating the evaluation suite from the training suite.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

pub fn run(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.eval;
    let methods = cfg
        .methods
        .iter()
        .map(|s| s.parse::<EvalMethod>())
        .collect::<Result<Vec<_>, Error>>()?;
    if methods.is_empty() {
        return Err(Error::Argument("empty method list".into()).into());
    }
    let heuristic_k = ctx.k.unwrap_or(cfg.heuristic_k);
    let mut scorers = BTreeMap::new();
    let mut to_train = Vec::new();
    for m in &methods {
        if let EvalMethod::Da(k) = *m {
            match cfg.scorers.get(&k.to_string()) {
                Some(path) => {
                    scorers.insert(k, ScorerModel::load(path)?);
                }
                None => to_train.push(k),
            }
        }
    }
    for key in cfg.scorers.keys() {
        key.parse::<usize>()
            .map_err(|_| CliError::Config(format!("eval.scorers key `{key}` is not a K value")))?;
    }

    let eval_seed = ctx.seed.wrapping_add(EVAL_SEED_OFFSET);
    let markets: Vec<(String, Market)> =
        scenario_suite(eval_seed, cfg.markets, cfg.n_users, cfg.n_providers, &cfg.ranges)?
            .into_iter()
            .enumerate()
            .map(|(i, m)| (format!("synthetic-{i:03}"), m))
            .collect();
    if !to_train.is_empty() {
        let suite = scenario_suite(ctx.seed, cfg.train_scenarios, cfg.n_users, cfg.n_providers, &cfg.ranges)?;
        for k in to_train {
            let opts = TrainOptions {
                k,
                seed: ctx.seed,
                ..cfg.train.clone()
            };
            let (model, report) = train_scorer(&suite, &opts)?;
            model.save(&ctx.out.path(&format!("scorer-k{k}.json")))?;
            ctx.out.json(&format!("train-report-k{k}.json"), &report)?;
            scorers.insert(k, model);
        }
    }

    let table = run_eval(
        &markets,
        &EvalConfig {
            methods,
            scorers,
            heuristic_k,
            sweep: cfg.sweep,
        },
    )?;
    let rows: Vec<Row> = table
        .rows
        .iter()
        .map(|r| Row {
            method: &r.method,
            market: &r.market,
            profit_ratio: r.profit_ratio,
            time: r.time,
        })
        .collect();
    ctx.out.csv("eval.csv", &rows)?;
    ctx.out.csv("eval_summary.csv", &table.summary)?;
    ctx.out.json("eval.json", &table)?;
    for s in &table.summary {
        println!("{:<6} mean ratio {:.4}  mean time {:.3e} s", s.method, s.mean_profit_ratio, s.mean_time);
    }
    Ok(())
}
