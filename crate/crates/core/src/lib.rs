//! Equilibrium pricing for a target provider competing with rivals for the
//! traffic of user groups that split demand across providers.

pub mod abstraction;
pub mod calibration;
pub mod equilibrium;
pub mod error;
pub mod evaluation;
mod linalg;
pub mod market;
pub mod pipeline;
pub mod pricing;
pub mod sensitivity;

pub use abstraction::{AbstractedMarket, Heuristic, RivalScores, ScorerModel, TrainOptions, TrainReport};
pub use calibration::{BiasInit, CalibrateOptions, Calibration, CalibrationReport, FitOptions};
pub use equilibrium::{
    best_response, marginal_cost, potential, solve_equilibrium, solve_equilibrium_with, user_cost,
    wardrop_gap, EquilibriumResult, FlowMatrix, SolverOptions,
};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalMethod, EvalRow, EvalTable};
pub use market::{AttributeRanges, Market, ObservedDay, PreferenceParams, Provider, UserGroup};
pub use pipeline::{PipelineOptions, PipelineResult};
pub use pricing::{CurvePoint, PricingMethod, PricingResult, SweepOptions};
pub use sensitivity::{equilibrium_jacobian, loss_gradient, EquilibriumJacobian, Parameter};
