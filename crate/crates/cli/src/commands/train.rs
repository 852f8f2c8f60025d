use serde::Serialize;
use stackroute_core::abstraction::{scenario_suite, train_scorer_from};
use stackroute_core::{Market, ScorerModel};

use super::Context;
use crate::error::CliResult;
use crate::output::read_json;

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    validation_loss: f64,
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.train_agg;
    let mut opts = cfg.options.clone();
    opts.seed = ctx.seed;
    if let Some(k) = ctx.k {
        opts.k = k;
    }
    let init = match &cfg.resume {
        Some(path) => ScorerModel::load(path)?,
        None => ScorerModel::with_width(opts.seed, opts.width),
    };
    let scenarios: Vec<Market> = match &cfg.scenarios {
        Some(path) => read_json(path)?,
        None => scenario_suite(ctx.seed, cfg.count, cfg.n_users, cfg.n_providers, &cfg.ranges)?,
    };
    let (model, report) = train_scorer_from(&scenarios, &opts, init)?;
    model.save(&ctx.out.path("scorer.json"))?;
    ctx.out.json("train_report.json", &report)?;
    let rows: Vec<EpochRow> = report
        .train_loss
        .iter()
        .zip(&report.validation_loss)
        .enumerate()
        .map(|(e, (&t, &v))| EpochRow {
            epoch: e + 1,
            train_loss: t,
            validation_loss: v,
        })
        .collect();
    ctx.out.csv("loss_curves.csv", &rows)?;
    println!(
        "K = {}: validation loss {:.6e} (start {:.6e}, AVG baseline {:.6e}), best epoch {} of {}",
        report.k,
        report.best_validation_loss,
        report.initial_validation_loss,
        report.avg_baseline_validation_loss,
        report.best_epoch,
        report.epochs_run
    );
    Ok(())
}
