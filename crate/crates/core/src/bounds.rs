//! Convergence upper bound of the perturbed federated loop and the choice of
//! the number of global aggregations that minimizes it.
//!
//! The objective is
//!
//! ```text
//! G(M) = A^M Θ + k (ϑ^M − A^M)(ϑ − ϑ^{1−M}) / (ϑ − A) + L_c H(T/M)
//! k    = q L Δs² ln(1/δ) / (ε² (U − 1))
//! H(x) = (γ/L)((ηL + 1)^x − 1) − ηγx
//! ```
//!
//! with `A = 1 + 2ρφ`. All functions accept a real-valued `M` internally so the
//! same code serves the integer grid, the derivative and bisection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelParams};

/// Below this `|ϑ − A|` the ratio `(ϑ^M − A^M)/(ϑ − A)` uses its limit.
pub const SINGULARITY_TOL: f64 = 1e-9;

/// Constants of the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// `L`
    pub smoothness: f64,
    /// `L_c`
    pub lipschitz: f64,
    /// `η`
    pub step_size: f64,
    /// `ρ`
    pub pl_constant: f64,
    /// `B`
    pub dissimilarity: f64,
    /// `γ`
    pub divergence: f64,
    /// `Θ = F(ω(0)) − F(ω*)`
    pub initial_gap: f64,
    /// `U`
    pub num_users: usize,
    /// `K`
    pub num_sampled: usize,
    /// `T`
    pub total_iterations: usize,
}

/// Privacy-side inputs of the bound. `epsilon = inf` removes the noise term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    pub epsilon: f64,
    pub delta: f64,
    pub sample_ratio: f64,
    pub sensitivity: f64,
    pub theta: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        positive("smoothness L", self.smoothness)?;
        positive("Lipschitz constant L_c", self.lipschitz)?;
        positive("step size", self.step_size)?;
        positive("PL constant", self.pl_constant)?;
        positive("initial gap", self.initial_gap)?;
        if !(self.dissimilarity.is_finite() && self.dissimilarity >= 1.0) {
            return Err(Error::InvalidArgument(format!("dissimilarity B must be >= 1, got {}", self.dissimilarity)));
        }
        if !(self.divergence.is_finite() && self.divergence >= 0.0) {
            return Err(Error::InvalidArgument(format!("divergence must be >= 0, got {}", self.divergence)));
        }
        if self.step_size * self.smoothness > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "step size {} exceeds 1/L = {}",
                self.step_size,
                1.0 / self.smoothness
            )));
        }
        if self.num_users < 2 {
            return Err(Error::InvalidArgument(format!("the bound needs at least 2 users, got {}", self.num_users)));
        }
        if self.num_sampled == 0 || self.num_sampled > self.num_users {
            return Err(Error::InvalidArgument(format!(
                "sampled users must be in [1, {}], got {}",
                self.num_users, self.num_sampled
            )));
        }
        if self.total_iterations == 0 {
            return Err(Error::InvalidArgument("total iterations must be at least 1".into()));
        }
        let a = self.contraction();
        // Real powers A^M need A > 0.
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidArgument(format!("contraction factor A = {a} must be positive")));
        }
        Ok(())
    }

    /// `φ = (η²L/2)((U−K)B²/(K(U−1)) + (K−1)/(UK(U−1))) − η`.
    pub fn phi(&self) -> f64 {
        let (eta, l, b) = (self.step_size, self.smoothness, self.dissimilarity);
        let (u, k) = (self.num_users as f64, self.num_sampled as f64);
        let bracket = (u - k) * b * b / (k * (u - 1.0)) + (k - 1.0) / (u * k * (u - 1.0));
        0.5 * eta * eta * l * bracket - eta
    }

    /// `A = 1 + 2ρφ`.
    pub fn contraction(&self) -> f64 {
        1.0 + 2.0 * self.pl_constant * self.phi()
    }

    pub fn h_gap(&self, x: f64) -> f64 {
        h_gap(x, self.divergence, self.step_size, self.smoothness)
    }
}

impl ScheduleInputs {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidBudget(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidBudget(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("sampling ratio must be in (0, 1], got {}", self.sample_ratio)));
        }
        positive("sensitivity", self.sensitivity)?;
        positive("theta", self.theta)
    }

    /// `k = qLΔs² ln(1/δ) / (ε²(U − 1))`; zero when `ε` is infinite.
    fn noise_coefficient(&self, params: &BoundParams) -> f64 {
        if self.epsilon.is_infinite() {
            return 0.0;
        }
        let u = params.num_users as f64;
        self.sample_ratio * params.smoothness * self.sensitivity.powi(2) * (1.0 / self.delta).ln()
            / (self.epsilon.powi(2) * (u - 1.0))
    }
}

/// `H(x) = (γ/L)((ηL + 1)^x − 1) − ηγx`, the gap between local and global
/// models after `x` local steps.
pub fn h_gap(x: f64, gamma: f64, eta: f64, l: f64) -> f64 {
    // Exact zeros; the general form leaves an ulp of rounding at x = 1.
    if x == 0.0 || x == 1.0 {
        return 0.0;
    }
    let r = (eta * l).ln_1p();
    (gamma / l) * (x * r).exp_m1() - eta * gamma * x
}

/// `(ϑ^m − A^m)/(ϑ − A)` and its derivative in `m`.
fn power_ratio(theta: f64, a: f64, m: f64) -> (f64, f64) {
    if (theta - a).abs() < SINGULARITY_TOL {
        let x = 0.5 * (theta + a);
        let p = x.powf(m - 1.0);
        (m * p, p * (1.0 + m * x.ln()))
    } else {
        let (tm, am) = (theta.powf(m), a.powf(m));
        ((tm - am) / (theta - a), (tm * theta.ln() - am * a.ln()) / (theta - a))
    }
}

fn bound_at(params: &BoundParams, inputs: &ScheduleInputs, m: f64, include_tau_term: bool) -> f64 {
    let a = params.contraction();
    let theta = inputs.theta;
    let k = inputs.noise_coefficient(params);
    let noise = if k == 0.0 { 0.0 } else { k * power_ratio(theta, a, m).0 * (theta - theta.powf(1.0 - m)) };
    let mut g = a.powf(m) * params.initial_gap + noise;
    if include_tau_term {
        g += params.lipschitz * params.h_gap(params.total_iterations as f64 / m);
    }
    g
}

fn check_inputs(params: &BoundParams, inputs: &ScheduleInputs) -> Result<()> {
    params.validate()?;
    inputs.validate()
}

/// Upper bound on `F(ω(m)) − F(ω*)` after `m` aggregations. With
/// `include_tau_term` the local-drift term `L_c H(T/m)` is added.
pub fn convergence_bound(
    params: &BoundParams,
    inputs: &ScheduleInputs,
    m: usize,
    include_tau_term: bool,
) -> Result<f64> {
    check_inputs(params, inputs)?;
    if m == 0 && include_tau_term {
        return Err(Error::InvalidArgument("local iterations T/m are undefined for m = 0".into()));
    }
    Ok(bound_at(params, inputs, m as f64, include_tau_term))
}

/// The full objective `G(M)` at a real `M > 0`.
pub fn objective(params: &BoundParams, inputs: &ScheduleInputs, m: f64) -> Result<f64> {
    check_inputs(params, inputs)?;
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("M must be positive, got {m}")));
    }
    Ok(bound_at(params, inputs, m, true))
}

/// `ln(η / ln(ηL + 1)) / ln(ηL + 1)`, the smallest local-iteration count for
/// which the drift term keeps `G` convex.
pub fn convexity_threshold(params: &BoundParams) -> f64 {
    let r = (params.step_size * params.smoothness).ln_1p();
    (params.step_size / r).ln() / r
}

/// `ϑ ≥ A` and `τ ≥` [`convexity_threshold`].
pub fn convexity_holds(params: &BoundParams, theta: f64, tau: f64) -> bool {
    theta >= params.contraction() && tau >= convexity_threshold(params)
}

fn derivative_at(params: &BoundParams, inputs: &ScheduleInputs, m: f64) -> f64 {
    let a = params.contraction();
    let theta = inputs.theta;
    let mut d = params.initial_gap * a.powf(m) * a.ln();

    let k = inputs.noise_coefficient(params);
    if k != 0.0 {
        let (r, dr) = power_ratio(theta, a, m);
        let s = theta - theta.powf(1.0 - m);
        let ds = theta.powf(1.0 - m) * theta.ln();
        d += k * (dr * s + r * ds);
    }

    let (t, gamma, eta, l) = (params.total_iterations as f64, params.divergence, params.step_size, params.smoothness);
    let lr = (eta * l).ln_1p();
    let dh = -(gamma * t / (l * m * m)) * (t / m * lr).exp() * lr + eta * gamma * t / (m * m);
    d + params.lipschitz * dh
}

/// `dG/dM` at a real `M > 0`.
pub fn bound_derivative(params: &BoundParams, inputs: &ScheduleInputs, m: f64) -> Result<f64> {
    check_inputs(params, inputs)?;
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("M must be positive, got {m}")));
    }
    Ok(derivative_at(params, inputs, m))
}

/// Result of [`optimal_m`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalM {
    pub m_star: usize,
    /// `G(M)` for `M = 1..=T`, index `M − 1`.
    pub g_values: Vec<f64>,
    pub convex: bool,
    /// Continuous root of `dG/dM` on `[1, T]`; present when `convex`.
    pub bisection_root: Option<f64>,
    /// Better integer neighbor of the root; present when `convex`.
    pub bisection_m: Option<usize>,
}

impl OptimalM {
    /// Whether the bisection cross-check picked the grid argmin, allowing
    /// ties in `G`.
    pub fn bisection_agrees(&self) -> bool {
        match self.bisection_m {
            None => true,
            Some(b) => {
                let (gb, gs) = (self.g_values[b - 1], self.g_values[self.m_star - 1]);
                b == self.m_star || (gb - gs).abs() <= 1e-12 * gs.abs().max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// Minimizes `G(M)` over integer `M ∈ [1, T]`. When the convexity conditions
/// hold on the whole range, bisection on `dG/dM` is run as a cross-check.
pub fn optimal_m(params: &BoundParams, inputs: &ScheduleInputs) -> Result<OptimalM> {
    check_inputs(params, inputs)?;
    let t = params.total_iterations;
    let g_values: Vec<f64> = (1..=t).into_par_iter().map(|m| bound_at(params, inputs, m as f64, true)).collect();
    if let Some(i) = g_values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { round: i + 1, what: "convergence bound".into() });
    }
    let m_star = 1 + g_values.iter().enumerate().fold(0, |best, (i, &g)| if g < g_values[best] { i } else { best });

    // The smallest τ on the grid is T/T = 1.
    let convex = convexity_holds(params, inputs.theta, 1.0);
    let (bisection_root, bisection_m) = if convex {
        let root = bisect_derivative(params, inputs, 1.0, t as f64);
        let lo = (root.floor() as usize).clamp(1, t);
        let hi = (root.ceil() as usize).clamp(1, t);
        let pick = if g_values[hi - 1] < g_values[lo - 1] { hi } else { lo };
        (Some(root), Some(pick))
    } else {
        (None, None)
    };
    Ok(OptimalM { m_star, g_values, convex, bisection_root, bisection_m })
}

fn bisect_derivative(params: &BoundParams, inputs: &ScheduleInputs, mut lo: f64, mut hi: f64) -> f64 {
    if derivative_at(params, inputs, lo) >= 0.0 {
        return lo;
    }
    if derivative_at(params, inputs, hi) <= 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-12 * hi {
            break;
        }
        if derivative_at(params, inputs, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Point estimates of `B` and `γ` at one parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub dissimilarity: f64,
    pub divergence: f64,
}

/// `B = sqrt(Σ p_k ‖∇f_k‖² / ‖∇F‖²)` and `γ = Σ p_k ‖∇f_k − ∇F‖` at `params`,
/// with `∇F = Σ p_k ∇f_k`.
pub fn estimate_dissimilarity_and_divergence(
    model: &dyn Model,
    params: &ModelParams,
    clients: &[Dataset],
    weights: &[f64],
) -> Result<Heterogeneity> {
    if clients.is_empty() || clients.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "need one weight per client, got {} clients and {} weights",
            clients.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum { sum });
    }
    let grads = clients.iter().map(|d| model.gradient(params, d)).collect::<Result<Vec<_>>>()?;
    let mut global = ModelParams::zeros(params.len());
    for (g, &p) in grads.iter().zip(weights) {
        global.axpy(p, g);
    }
    let global_sq = global.dot(&global);
    if global_sq == 0.0 {
        return Err(Error::UndefinedDissimilarity);
    }
    let local_sq: f64 = grads.iter().zip(weights).map(|(g, &p)| p * g.dot(g)).sum();
    let divergence = grads.iter().zip(weights).map(|(g, &p)| p * g.distance(&global)).sum();
    Ok(Heterogeneity { dissimilarity: (local_sq / global_sq).sqrt(), divergence })
}
