use serde::Serialize;
use stackroute_core::calibration::{calibrate, flow_fit, predict_flows, Calibration, FlowFit};
use stackroute_core::market::{build_market, load_performance_csv, load_usage_csv, BuildOptions};
use stackroute_core::{Error, FlowMatrix, Market, ObservedDay};

use super::Context;
use crate::config::CalibrateConfig;
use crate::error::{CliError, CliResult};
use crate::output::read_json;

#[derive(Serialize)]
struct CalibrationRecord<'a> {
    n_fit_days: usize,
    n_held_out_days: usize,
    held_out: Option<FlowFit>,
    calibration: &'a Calibration,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    loss: f64,
}

fn load_inputs(cfg: &CalibrateConfig) -> CliResult<(Option<Market>, Vec<ObservedDay>)> {
    if let Some(ing) = &cfg.ingest {
        if cfg.days.is_some() {
            return Err(CliError::Config("give either calibrate.days or calibrate.ingest, not both".into()));
        }
        let usage = load_usage_csv(&ing.usage)?;
        let perf = load_performance_csv(&ing.performance)?;
        let mut opts = BuildOptions::new(ing.date_range(), ing.target_model.clone(), ing.prices.clone(), ing.price_cap);
        opts.filter_fraction = ing.filter_fraction;
        let (market, days) = build_market(&usage, &perf, &opts)?;
        return Ok((Some(market), days));
    }
    let path = cfg
        .days
        .as_ref()
        .ok_or_else(|| CliError::Config("calibrate needs calibrate.days or calibrate.ingest".into()))?;
    let raw: Vec<ObservedDay> = read_json(path)?;
    let days = raw
        .into_iter()
        .map(|d| ObservedDay::new(d.date, d.flows, d.demands, d.objective))
        .collect::<Result<Vec<_>, Error>>()?;
    let market = cfg.market.as_deref().map(Market::load).transpose()?;
    Ok((market, days))
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.calibrate;
    let (market, days) = load_inputs(cfg)?;
    if cfg.hold_out >= days.len() {
        return Err(CliError::Config(format!(
            "hold_out = {} leaves no days to fit out of {}",
            cfg.hold_out,
            days.len()
        )));
    }
    if let Some(m) = &market {
        if m.n_providers() != days[0].n_providers() || m.n_users() != days[0].n_users() {
            return Err(CliError::Config("base market shape differs from the observed days".into()));
        }
    }
    let (fit_days, held) = days.split_at(days.len() - cfg.hold_out);
    let cal = calibrate(fit_days, &cfg.options)?;
    let theta = &cal.report.theta;
    let held_out = if held.is_empty() {
        None
    } else {
        let predicted = held
            .iter()
            .map(|d| predict_flows(theta, d))
            .collect::<Result<Vec<FlowMatrix>, Error>>()?;
        Some(flow_fit(&predicted, held))
    };

    ctx.out.json(
        "calibration_report.json",
        &CalibrationRecord {
            n_fit_days: fit_days.len(),
            n_held_out_days: held.len(),
            held_out,
            calibration: &cal,
        },
    )?;
    ctx.out.json("fitted_params.json", theta)?;
    if let Some(m) = &market {
        m.with_params(theta.clone())?.save(&ctx.out.path("fitted_market.json"))?;
    }
    let trace: Vec<TraceRow> = cal
        .report
        .loss_trace
        .iter()
        .enumerate()
        .map(|(iteration, &loss)| TraceRow { iteration, loss })
        .collect();
    ctx.out.csv("loss_trace.csv", &trace)?;

    let r = &cal.report;
    println!(
        "fit R2 = {:.6}, MAE = {:.6e}, final loss = {:.6e} after {} iterations",
        r.r2,
        r.mae,
        r.loss_trace.last().copied().unwrap_or(f64::NAN),
        r.iterations
    );
    if let Some(h) = held_out {
        println!("held-out R2 = {:.6}, MAE = {:.6e}", h.r2, h.mae);
    }
    println!("w_q = {:.6}, w_d = {:.6}, biases = {:?}", theta.w_q, theta.w_d, theta.biases);
    Ok(())
}
