//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Each generator release is one subsampled Gaussian step with sensitivity 1
//! once the update is expressed in units of the clip norm. Per-order costs
//! compose by addition and convert to (ε, δ) by minimising over orders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer orders 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = Self { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// `order * sensitivity^2 / (2 sigma^2)`.
pub fn rdp_gaussian(order: f64, sigma: f64, sensitivity: f64) -> Result<f64> {
    if !(order > 1.0) {
        return Err(Error::invalid(format!("Rényi order must exceed 1, got {order}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(sensitivity >= 0.0) {
        return Err(Error::invalid(format!("sensitivity must be >= 0, got {sensitivity}")));
    }
    Ok(order * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Binomial-series bound for the Poisson-subsampled Gaussian at integer order:
///
/// `1/(λ-1) log sum_j C(λ,j) (1-γ)^(λ-j) γ^j exp(j(j-1)/(2σ²))`, in log space.
pub fn rdp_subsampled_gaussian(order: u32, sigma: f64, gamma: f64) -> Result<f64> {
    if order < 2 {
        return Err(Error::invalid(format!("order must be an integer >= 2, got {order}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must lie in (0, 1], got {gamma}")));
    }
    let lam = order as f64;
    let (lg, lq) = (gamma.ln(), (1.0 - gamma).ln());
    let mut terms = Vec::with_capacity(order as usize + 1);
    let mut log_binom = 0.0;
    for j in 0..=order {
        if j > 0 {
            log_binom += ((order - j + 1) as f64).ln() - (j as f64).ln();
        }
        let rest = order - j;
        if rest > 0 && gamma == 1.0 {
            continue;
        }
        let jf = j as f64;
        let mut t = log_binom + jf * (jf - 1.0) / (2.0 * sigma * sigma);
        if j > 0 {
            t += jf * lg;
        }
        if rest > 0 {
            t += rest as f64 * lq;
        }
        terms.push(t);
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    Ok((lse / (lam - 1.0)).max(0.0))
}

/// Accumulated RDP cost of repeated subsampled Gaussian releases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    orders: Vec<u32>,
    per_step: Vec<f64>,
    gamma: f64,
    sigma: f64,
    steps: u64,
}

impl RdpLedger {
    pub fn new(orders: Vec<u32>, sigma: f64, gamma: f64) -> Result<Self> {
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("orders must be strictly ascending"));
        }
        let per_step = orders
            .iter()
            .map(|&o| rdp_subsampled_gaussian(o, sigma, gamma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            orders,
            per_step,
            gamma,
            sigma,
            steps: 0,
        })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Cost of a single release at each order.
    pub fn step_cost(&self) -> &[f64] {
        &self.per_step
    }

    /// Accumulated ε(λ) per order.
    pub fn eps_per_order(&self) -> Vec<f64> {
        self.eps_after(self.steps)
    }

    fn eps_after(&self, steps: u64) -> Vec<f64> {
        self.per_step.iter().map(|c| steps as f64 * c).collect()
    }

    /// Ledger after one more release.
    pub fn step_account(&self) -> Self {
        self.advanced(1)
    }

    pub fn advanced(&self, steps: u64) -> Self {
        let mut next = self.clone();
        next.steps += steps;
        next
    }

    /// Restores the step count, e.g. from a checkpoint.
    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn to_eps_delta(&self, delta: f64) -> Result<f64> {
        convert(&self.orders, &self.eps_per_order(), delta)
    }

    /// ε after `steps` releases, without building a ledger.
    pub fn eps_at(&self, steps: u64, delta: f64) -> Result<f64> {
        convert(&self.orders, &self.eps_after(steps), delta)
    }
}

/// `min_λ [ε(λ) + log(1/δ)/(λ-1)]`.
pub fn convert(orders: &[u32], eps: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if orders.is_empty() {
        return Err(Error::state("no Rényi orders to convert from"));
    }
    if orders.len() != eps.len() {
        return Err(Error::state("orders and costs differ in length"));
    }
    let log_inv = (1.0 / delta).ln();
    Ok(orders
        .iter()
        .zip(eps)
        .map(|(&o, e)| e + log_inv / (o as f64 - 1.0))
        .fold(f64::INFINITY, f64::min))
}

/// Largest budget answer reported; beyond this f64 step counts lose precision.
pub const MAX_STEPS: u64 = 1 << 53;

/// Largest T whose converted ε stays within the budget, saturating at [`MAX_STEPS`].
pub fn steps_for_budget(budget: &DpBudget, sigma: f64, gamma: f64, orders: &[u32]) -> Result<u64> {
    budget.validate()?;
    let ledger = RdpLedger::new(orders.to_vec(), sigma, gamma)?;
    let fits = |t: u64| -> Result<bool> { Ok(ledger.eps_at(t, budget.delta)? <= budget.epsilon) };
    if !fits(0)? {
        return Ok(0);
    }
    let mut hi = 1u64;
    while fits(hi)? {
        if hi >= MAX_STEPS {
            return Ok(MAX_STEPS);
        }
        hi = (hi * 2).min(MAX_STEPS);
    }
    let mut lo = hi / 2;
    // invariant: fits(lo), !fits(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
