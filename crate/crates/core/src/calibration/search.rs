use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_theta, init_biases_weighted, BiasInit, CalibrationReport, FitOptions};
use crate::error::{Error, Result};
use crate::market::{ObservedDay, PreferenceParams};

/// Settings of the full calibration pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateOptions {
    pub fit: FitOptions,
    /// Candidate `w_q` values for the bias LP scan.
    pub w_q_grid: Vec<f64>,
    pub w_d_grid: Vec<f64>,
    /// Number of lowest-slack grid points used as descent starts, in addition
    /// to the unit-weight start.
    pub starts: usize,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            fit: FitOptions::default(),
            w_q_grid: vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            w_d_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Bias LP at unit weights.
    pub init: BiasInit,
    /// Starting point of the winning descent run.
    pub start: PreferenceParams,
    pub report: CalibrationReport,
}

/// Bias LP at unit weights and at every grid point, then [`fit_theta`] from
/// the unit start and from the grid points whose LP needed the least slack.
/// The run with the lowest final loss wins; its trace is reported.
pub fn calibrate(days: &[ObservedDay], opts: &CalibrateOptions) -> Result<Calibration> {
    let clock = Instant::now();
    let init = init_biases_weighted(days, 1.0, 1.0)?;
    let grid: Vec<(f64, f64)> = opts
        .w_q_grid
        .iter()
        .flat_map(|&q| opts.w_d_grid.iter().map(move |&d| (q, d)))
        .filter(|&(q, d)| (q, d) != (1.0, 1.0))
        .collect();
    if grid.iter().any(|&(q, d)| !(q > 0.0 && d >= 0.0 && q.is_finite() && d.is_finite())) {
        return Err(Error::Config("weight grid needs w_q > 0 and w_d >= 0".into()));
    }
    let scanned: Vec<Result<BiasInit>> = grid
        .par_iter()
        .map(|&(q, d)| init_biases_weighted(days, q, d))
        .collect();
    let mut ranked = Vec::with_capacity(grid.len());
    for (k, lp) in scanned.into_iter().enumerate() {
        ranked.push((lp?, grid[k]));
    }
    ranked.sort_by(|a, b| a.0.total_slack.total_cmp(&b.0.total_slack));

    let mut candidates = vec![PreferenceParams::new(1.0, 1.0, init.biases.clone())];
    candidates.extend(
        ranked
            .into_iter()
            .take(opts.starts)
            .map(|(lp, (q, d))| PreferenceParams::new(q, d, lp.biases)),
    );
    let mut best: Option<(PreferenceParams, CalibrationReport)> = None;
    for start in candidates {
        let report = fit_theta(days, &start, &opts.fit)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.loss_trace.last() < b.loss_trace.last());
        if better {
            best = Some((start, report));
        }
        if best.as_ref().is_some_and(|(_, b)| *b.loss_trace.last().unwrap_or(&1.0) == 0.0) {
            break;
        }
    }
    let (start, mut report) = best.expect("at least one candidate");
    report.wall_time = clock.elapsed().as_secs_f64();
    Ok(Calibration { init, start, report })
}
