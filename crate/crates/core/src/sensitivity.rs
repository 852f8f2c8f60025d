//! Derivatives of the equilibrium flow with respect to market parameters.
//!
//! On a fixed active set the equilibrium solves the equality-constrained
//! stationarity system `∇Φ(F) = A^T ν`, `A F = D` restricted to active
//! coordinates. Differentiating it gives the bordered system
//! `[H Aᵀ; A 0] [dF; dν] = [−∂(∇Φ)/∂θ; 0]`, factored once and reused for every
//! parameter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{CostModel, EquilibriumResult, FlowMatrix};
use crate::error::{Error, Result};
use crate::linalg::DenseLu;
use crate::market::Market;

/// Inactive routes whose reduced cost is below this are treated as degenerate.
pub const COMPLEMENTARITY_MARGIN: f64 = 1e-7;

/// A scalar market parameter to differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Wq,
    Wd,
    Bias(usize),
    Price(usize),
    Capacity(usize),
    /// `∂/∂ log α_j`, better conditioned when capacities differ by orders of magnitude.
    LogCapacity(usize),
    Delay(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumJacobian {
    pub wrt: Parameter,
    pub d_flow: FlowMatrix,
    pub active_set: Vec<Vec<bool>>,
    /// Set when strict complementarity fails; `d_flow` is then the one-sided
    /// derivative that keeps the current active set.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Factored KKT system at one equilibrium.
pub struct KktSystem {
    model: CostModel,
    flow: FlowMatrix,
    loads: Vec<f64>,
    /// Active `(i, j)` pairs in row-major order.
    coords: Vec<(usize, usize)>,
    active: Vec<bool>,
    lu: DenseLu,
    margin: f64,
}

impl KktSystem {
    pub fn from_result(result: &EquilibriumResult, market: &Market) -> Result<Self> {
        KktSystem::new(CostModel::from_market(market), &result.flow)
    }

    /// Factors the bordered system at `flow`, which must be an equilibrium of `model`.
    pub fn new(model: CostModel, flow: &FlowMatrix) -> Result<Self> {
        model.check_shape(flow)?;
        let (n, m) = (model.n_users(), model.n_providers());
        let lambda = model.multipliers(flow);
        let loads = flow.loads();
        let mut coords = Vec::new();
        let mut active = vec![false; n * m];
        let mut margin = f64::INFINITY;
        for i in 0..n {
            if model.demand()[i] <= 0.0 {
                continue;
            }
            for j in 0..m {
                if model.is_used(flow, i, j) {
                    coords.push((i, j));
                    active[i * m + j] = true;
                } else {
                    margin = margin.min(model.marginal_with(flow, &loads, i, j) - lambda[i]);
                }
            }
        }
        let users: Vec<usize> = (0..n).filter(|&i| model.demand()[i] > 0.0).collect();
        let mut row_of_user = vec![usize::MAX; n];
        for (r, &i) in users.iter().enumerate() {
            row_of_user[i] = coords.len() + r;
        }
        let size = coords.len() + users.len();
        let mut k = DMatrix::<f64>::zeros(size, size);
        for (a, &(i, j)) in coords.iter().enumerate() {
            for (b, &(q, l)) in coords.iter().enumerate() {
                if j == l {
                    let s = model.slope(j);
                    k[(a, b)] = if i == q { 2.0 * s } else { s };
                }
            }
            let u = row_of_user[i];
            k[(a, u)] = 1.0;
            k[(u, a)] = 1.0;
        }
        let lu = DenseLu::new(k)
            .ok_or_else(|| Error::Singular(format!("{size}x{size} bordered system on the active set")))?;
        Ok(KktSystem {
            model,
            flow: flow.clone(),
            loads,
            coords,
            active,
            lu,
            margin,
        })
    }

    /// Smallest reduced cost among inactive routes (infinite when all are active).
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn degenerate(&self) -> bool {
        self.margin < COMPLEMENTARITY_MARGIN
    }

    pub fn active_set(&self) -> Vec<Vec<bool>> {
        let m = self.model.n_providers();
        self.active.chunks(m).map(<[bool]>::to_vec).collect()
    }

    fn check(&self, wrt: Parameter) -> Result<()> {
        let (n, m) = (self.model.n_users(), self.model.n_providers());
        let ok = match wrt {
            Parameter::Wq | Parameter::Wd => true,
            Parameter::Bias(j) | Parameter::Price(j) | Parameter::Capacity(j) | Parameter::LogCapacity(j) => {
                j < m
            }
            Parameter::Delay(i, j) => i < n && j < m,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("{wrt:?} is out of range for a {n} x {m} market")))
        }
    }

    /// `∂(∂Φ/∂f_ij)/∂θ` for active coordinate `(i, j)`.
    fn mixed_partial(&self, wrt: Parameter, i: usize, j: usize) -> f64 {
        let (w_p, _, w_d) = self.model.weights();
        let own = self.loads[j] + self.flow.get(i, j);
        let alpha = self.model.capacity()[j];
        match wrt {
            Parameter::Wq => own / alpha,
            Parameter::Wd => self.model.delay(i, j),
            Parameter::Bias(k) => if k == j { -1.0 } else { 0.0 },
            Parameter::Price(k) => if k == j { w_p } else { 0.0 },
            Parameter::LogCapacity(k) => if k == j { -self.model.slope(j) * own } else { 0.0 },
            Parameter::Capacity(k) => if k == j { -self.model.slope(j) * own / alpha } else { 0.0 },
            Parameter::Delay(q, l) => if (q, l) == (i, j) { w_d } else { 0.0 },
        }
    }

    fn rhs(&self, wrt: Parameter) -> Vec<f64> {
        let mut rhs = vec![0.0; self.lu_size()];
        for (a, &(i, j)) in self.coords.iter().enumerate() {
            rhs[a] = -self.mixed_partial(wrt, i, j);
        }
        rhs
    }

    fn lu_size(&self) -> usize {
        self.coords.len() + (0..self.model.n_users()).filter(|&i| self.model.demand()[i] > 0.0).count()
    }

    /// Jacobian from the current active set; never fails on degeneracy.
    pub fn jacobian(&self, wrt: Parameter) -> Result<EquilibriumJacobian> {
        self.check(wrt)?;
        let x = self
            .lu
            .solve(&self.rhs(wrt))
            .ok_or_else(|| Error::Singular("non-finite solution".into()))?;
        let mut d_flow = FlowMatrix::zeros(self.model.n_users(), self.model.n_providers());
        for (a, &(i, j)) in self.coords.iter().enumerate() {
            d_flow.set(i, j, x[a]);
        }
        Ok(EquilibriumJacobian {
            wrt,
            d_flow,
            active_set: self.active_set(),
            degenerate: self.degenerate(),
        })
    }

    /// `Σ_ij g_ij ∂f_ij/∂θ` for each `θ` in `wrt`, with a single adjoint solve.
    pub fn loss_gradient(&self, g: &FlowMatrix, wrt: &[Parameter]) -> Result<LossGradient> {
        self.model.check_shape(g)?;
        for &p in wrt {
            self.check(p)?;
        }
        let mut rhs = vec![0.0; self.lu_size()];
        for (a, &(i, j)) in self.coords.iter().enumerate() {
            rhs[a] = g.get(i, j);
        }
        let y = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("non-finite adjoint".into()))?;
        let values = wrt
            .iter()
            .map(|&p| {
                -self
                    .coords
                    .iter()
                    .enumerate()
                    .map(|(a, &(i, j))| y[a] * self.mixed_partial(p, i, j))
                    .sum::<f64>()
            })
            .collect();
        Ok(LossGradient {
            values,
            degenerate: self.degenerate(),
        })
    }
}

/// Current value of `p` in `market`.
pub fn parameter_value(market: &Market, p: Parameter) -> f64 {
    let params = market.params();
    match p {
        Parameter::Wq => params.w_q,
        Parameter::Wd => params.w_d,
        Parameter::Bias(j) => params.biases[j],
        Parameter::Price(j) => market.providers()[j].price,
        Parameter::Capacity(j) => market.providers()[j].capacity,
        Parameter::LogCapacity(j) => market.providers()[j].capacity.ln(),
        Parameter::Delay(i, j) => market.delay(i, j),
    }
}

/// A copy of `market` with `p` set to `value`. Prices are not clamped to the cap.
pub fn with_parameter(market: &Market, p: Parameter, value: f64) -> Result<Market> {
    let mut providers = market.providers().to_vec();
    let mut users = market.users().to_vec();
    let mut params = market.params().clone();
    match p {
        Parameter::Wq => params.w_q = value,
        Parameter::Wd => params.w_d = value,
        Parameter::Bias(j) => {
            params.biases[j] = value;
            providers[j].perceived_value = value;
        }
        Parameter::Price(j) => providers[j].price = value,
        Parameter::Capacity(j) => providers[j].capacity = value,
        Parameter::LogCapacity(j) => providers[j].capacity = value.exp(),
        Parameter::Delay(i, j) => users[i].delays[j] = value,
    }
    let cap = providers.iter().map(|q| q.price).fold(market.price_cap(), f64::max);
    Market::new(providers, users, params, cap)
}

/// Strict variant: fails with [`Error::BoundaryPoint`] when strict complementarity
/// does not hold. Use [`KktSystem::jacobian`] for the one-sided derivative.
pub fn equilibrium_jacobian(
    result: &EquilibriumResult,
    market: &Market,
    wrt: Parameter,
) -> Result<EquilibriumJacobian> {
    let system = KktSystem::from_result(result, market)?;
    if system.degenerate() {
        return Err(Error::BoundaryPoint {
            margin: system.margin(),
        });
    }
    system.jacobian(wrt)
}

/// Chain rule through the equilibrium map; degenerate points return the
/// one-sided gradient with `degenerate` set.
pub fn loss_gradient(
    loss_grad_flow: &FlowMatrix,
    result: &EquilibriumResult,
    market: &Market,
    wrt: &[Parameter],
) -> Result<LossGradient> {
    KktSystem::from_result(result, market)?.loss_gradient(loss_grad_flow, wrt)
}
