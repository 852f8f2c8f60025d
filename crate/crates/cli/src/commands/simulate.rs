use stackroute_core::abstraction::scenario_suite;
use stackroute_core::calibration::synthetic_days;

use super::Context;
use crate::error::CliResult;

/// Writes `market-NNN.json` and, when days are requested, `days-NNN.json`
/// holding exact equilibrium observations of that market.
pub fn run(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.simulate;
    let markets = scenario_suite(ctx.seed, cfg.count, cfg.n_users, cfg.n_providers, &cfg.ranges)?;
    for (i, market) in markets.iter().enumerate() {
        market.save(&ctx.out.path(&format!("market-{i:03}.json")))?;
        if cfg.days > 0 {
            let day_seed = ctx.seed.wrapping_add(i as u64 + 1);
            let days = synthetic_days(market, cfg.days, day_seed, cfg.jitter, cfg.start_date)?;
            ctx.out.json(&format!("days-{i:03}.json"), &days)?;
        }
    }
    println!("wrote {} markets ({} days each)", markets.len(), cfg.days);
    Ok(())
}
