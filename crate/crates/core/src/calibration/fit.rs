use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_days, predict_with};
use crate::equilibrium::{CostModel, FlowMatrix, SolverOptions};
use crate::error::{Error, Result};
use crate::market::{ObservedDay, PreferenceParams};
use crate::sensitivity::{KktSystem, Parameter};

pub const MIN_WQ: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Trial step of the first line search; later searches start from the
    /// Barzilai–Borwein step of the previous move.
    pub initial_step: f64,
    /// Stop once the loss fell by less than this fraction over `window` iterations.
    pub rel_tol: f64,
    pub window: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub max_halvings: usize,
    /// Wardrop tolerance of the per-day equilibrium solves.
    pub solver_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 500,
            initial_step: 1e-2,
            rel_tol: 1e-8,
            window: 5,
            armijo: 1e-4,
            max_halvings: 60,
            solver_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub theta: PreferenceParams,
    /// Loss of the starting point followed by one entry per accepted step.
    pub loss_trace: Vec<f64>,
    pub r2: f64,
    pub mae: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Accepted steps taken at a point without strict complementarity.
    pub degenerate_steps: usize,
    pub wall_time: f64,
}

/// Goodness of fit over all flattened `(user, provider, day)` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowFit {
    pub r2: f64,
    pub mae: f64,
    pub sse: f64,
}

pub fn flow_fit(predicted: &[FlowMatrix], observed: &[ObservedDay]) -> FlowFit {
    let pairs = || {
        predicted
            .iter()
            .zip(observed)
            .flat_map(|(p, o)| p.values().iter().copied().zip(o.flows.values().iter().copied()))
    };
    let count = pairs().count().max(1) as f64;
    let mean = pairs().map(|(_, o)| o).sum::<f64>() / count;
    let sse: f64 = pairs().map(|(p, o)| (p - o) * (p - o)).sum();
    let sst: f64 = pairs().map(|(_, o)| (o - mean) * (o - mean)).sum();
    let mae = pairs().map(|(p, o)| (p - o).abs()).sum::<f64>() / count;
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    FlowFit { r2, mae, sse }
}

/// `θ = (w_q, w_d, b_1..b_m)` as a flat vector.
fn pack(theta: &PreferenceParams) -> Vec<f64> {
    let mut x = vec![theta.w_q, theta.w_d];
    x.extend(&theta.biases);
    x
}

fn unpack(x: &[f64]) -> PreferenceParams {
    PreferenceParams::new(x[0], x[1], x[2..].to_vec())
}

fn project(x: &mut [f64]) {
    x[0] = x[0].max(MIN_WQ);
    for v in &mut x[1..] {
        *v = v.max(0.0);
    }
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    flows: Vec<FlowMatrix>,
    degenerate: bool,
}

fn evaluate(
    x: &[f64],
    days: &[ObservedDay],
    starts: &[FlowMatrix],
    opts: &SolverOptions,
    wrt: &[Parameter],
) -> Result<Evaluation> {
    let theta = unpack(x);
    let per_day: Vec<Result<(f64, Vec<f64>, FlowMatrix, bool)>> = days
        .par_iter()
        .enumerate()
        .map(|(t, day)| {
            let start = starts.get(t);
            let flow = predict_with(&theta, day, opts, start)?;
            let mut residual = FlowMatrix::zeros(day.n_users(), day.n_providers());
            let mut loss = 0.0;
            for i in 0..day.n_users() {
                for j in 0..day.n_providers() {
                    let r = flow.get(i, j) - day.flows.get(i, j);
                    loss += r * r;
                    residual.set(i, j, 2.0 * r);
                }
            }
            let system = KktSystem::new(CostModel::from_day(day, &theta), &flow).map_err(|e| Error::Day {
                date: day.date,
                source: Box::new(e),
            })?;
            let g = system.loss_gradient(&residual, wrt)?;
            Ok((loss, g.values, flow, g.degenerate))
        })
        .collect();
    let mut out = Evaluation {
        loss: 0.0,
        grad: vec![0.0; x.len()],
        flows: Vec::with_capacity(days.len()),
        degenerate: false,
    };
    for r in per_day {
        let (loss, grad, flow, degenerate) = r?;
        out.loss += loss;
        for (a, b) in out.grad.iter_mut().zip(grad) {
            *a += b;
        }
        out.flows.push(flow);
        out.degenerate |= degenerate;
    }
    if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("loss {} or its gradient is not finite", out.loss)));
    }
    Ok(out)
}

/// Projected gradient descent on `Σ_t ‖F*(θ; O_t, D_t) − F_t‖²` with Armijo backtracking.
pub fn fit_theta(days: &[ObservedDay], init: &PreferenceParams, opts: &FitOptions) -> Result<CalibrationReport> {
    let clock = Instant::now();
    let (_, m) = check_days(days)?;
    init.validate(m)?;
    if !(init.w_q > 0.0) {
        return Err(Error::Argument("initial w_q must be > 0".into()));
    }
    let mut wrt = vec![Parameter::Wq, Parameter::Wd];
    wrt.extend((0..m).map(Parameter::Bias));
    let solver = SolverOptions {
        tolerance: opts.solver_tolerance,
        ..Default::default()
    };

    let mut x = pack(init);
    project(&mut x);
    let mut current = evaluate(&x, days, &[], &solver, &wrt)?;
    let mut trace = vec![current.loss];
    let mut step = opts.initial_step;
    let mut converged = false;
    let mut degenerate_steps = 0;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if current.loss == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial: Vec<f64> = x.iter().zip(&current.grad).map(|(v, g)| v - step * g).collect();
            project(&mut trial);
            let moved: f64 = trial.iter().zip(&x).zip(&current.grad).map(|((t, v), g)| g * (t - v)).sum();
            if moved == 0.0 {
                break;
            }
            // A trial point whose equilibria cannot be certified counts as a failed step.
            match evaluate(&trial, days, &current.flows, &solver, &wrt) {
                Ok(next) if next.loss <= current.loss + opts.armijo * moved => {
                    accepted = Some((trial, next));
                    break;
                }
                Ok(_) => {}
                Err(e) if matches!(e.root(), Error::Convergence { .. } | Error::Singular(_)) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            // No descent direction left within the feasible set.
            converged = true;
            break;
        };
        iterations += 1;
        if current.degenerate {
            degenerate_steps += 1;
        }
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&current.grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { 2.0 * step };
        x = trial;
        current = next;
        trace.push(current.loss);
        let k = trace.len() - 1;
        if k >= opts.window {
            let before = trace[k - opts.window];
            if before <= 0.0 || (before - current.loss) / before < opts.rel_tol {
                converged = true;
                break;
            }
        }
    }

    let fit = flow_fit(&current.flows, days);
    Ok(CalibrationReport {
        theta: unpack(&x),
        loss_trace: trace,
        r2: fit.r2,
        mae: fit.mae,
        converged,
        iterations,
        degenerate_steps,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}
