//! Calibration and accounting for the geometric Gaussian noise schedule.
//!
//! Round `m` of a run adds Gaussian noise with variance `theta^(m-1) * sigma^2`.
//! The accountant composes the per-round log moments
//! `q * lambda * (lambda + 1) * ds^2 / (2 * sigma_m^2)` and converts the total
//! into a failure probability with the moment tail bound
//! `delta* = min_lambda exp(alpha(lambda) - lambda * epsilon)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Within this distance of 1 the scaling factor is treated as exactly 1.
pub const THETA_ONE_TOL: f64 = 1e-9;

/// Relative slack on `ln(delta)` when comparing an achieved delta to the target.
const DELTA_CMP_RTOL: f64 = 1e-12;

/// An `(epsilon, delta)` privacy requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidBudget(format!("epsilon must be finite and positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidBudget(format!("delta must lie in (0, 1], got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `ln(1/delta)`, rejected when it is not positive.
    fn log_inv_delta(&self) -> Result<f64> {
        let l = -self.delta.ln();
        if l > 0.0 {
            Ok(l)
        } else {
            Err(Error::InvalidBudget(format!(
                "delta = {} leaves no room for calibration (ln(1/delta) <= 0)",
                self.delta
            )))
        }
    }
}

/// Sensitivity of a full-batch clipped update: `2C / |D_k|`.
pub fn sensitivity_from_clip(clip_norm: f64, local_dataset_size: usize) -> Result<f64> {
    if !(clip_norm.is_finite() && clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {clip_norm}")));
    }
    if local_dataset_size == 0 {
        return Err(Error::InvalidArgument("local dataset is empty".into()));
    }
    Ok(2.0 * clip_norm / local_dataset_size as f64)
}

fn is_unit_theta(theta: f64) -> bool {
    (theta - 1.0).abs() < THETA_ONE_TOL
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() && theta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("scaling factor must be positive and finite, got {theta}")))
    }
}

fn check_ratio_and_sensitivity(q: f64, delta_s: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sample ratio must lie in (0, 1], got {q}")));
    }
    if !(delta_s.is_finite() && delta_s > 0.0) {
        return Err(Error::InvalidArgument(format!("sensitivity must be positive, got {delta_s}")));
    }
    Ok(())
}

/// `sum_{j=0}^{rounds-1} theta^(-j) = (theta - theta^(1-rounds)) / (theta - 1)`.
///
/// Evaluated as a ratio of `expm1` terms so that it stays accurate as
/// `theta` approaches 1, where it tends to `rounds`.
pub fn geometric_factor(theta: f64, rounds: usize) -> f64 {
    if rounds == 0 {
        return 0.0;
    }
    if is_unit_theta(theta) {
        return rounds as f64;
    }
    let log_ratio = -(theta - 1.0).ln_1p();
    (rounds as f64 * log_ratio).exp_m1() / log_ratio.exp_m1()
}

/// Initial noise amplitude for `max_rounds` aggregations under `budget`:
/// `sigma = (ds / eps) * sqrt(2 q F ln(1/delta))` with `F` the geometric factor.
pub fn initial_sigma(budget: &PrivacyBudget, q: f64, delta_s: f64, max_rounds: usize, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    check_ratio_and_sensitivity(q, delta_s)?;
    if max_rounds == 0 {
        return Err(Error::InvalidArgument("at least one round is required".into()));
    }
    let l = budget.log_inv_delta()?;
    let factor = geometric_factor(theta, max_rounds);
    Ok(delta_s / budget.epsilon * (2.0 * q * factor * l).sqrt())
}

/// Smallest initial amplitude whose schedule the accountant actually accepts.
///
/// Solves `min_lambda g(lambda) = ln(delta)` exactly: the composed moment
/// coefficient must not exceed `(sqrt(ln(1/delta) + eps) - sqrt(ln(1/delta)))^2`.
/// This is strictly larger than [`initial_sigma`] for every budget.
pub fn tight_initial_sigma(budget: &PrivacyBudget, q: f64, delta_s: f64, max_rounds: usize, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    check_ratio_and_sensitivity(q, delta_s)?;
    if max_rounds == 0 {
        return Err(Error::InvalidArgument("at least one round is required".into()));
    }
    let l = budget.log_inv_delta()?;
    let root_gap = budget.epsilon / ((l + budget.epsilon).sqrt() + l.sqrt());
    let coeff_max = root_gap * root_gap;
    let factor = geometric_factor(theta, max_rounds);
    Ok((q * delta_s * delta_s * factor / (2.0 * coeff_max)).sqrt())
}

/// Amplitude after shrinking the plan to `new_max_rounds` at round `round`.
///
/// Three branches on the scaling factor; the subsequent variance of round
/// `n` is `theta^(n-1) * sigma'^2`.
pub fn adjusted_sigma(
    budget: &PrivacyBudget,
    q: f64,
    delta_s: f64,
    theta: f64,
    round: usize,
    new_max_rounds: usize,
) -> Result<f64> {
    check_theta(theta)?;
    check_ratio_and_sensitivity(q, delta_s)?;
    if round == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    if new_max_rounds <= round {
        return Err(Error::NoRemainingRounds { round, new_max: new_max_rounds });
    }
    let l = budget.log_inv_delta()?;
    let bracket = if is_unit_theta(theta) {
        new_max_rounds as f64
    } else if theta > 1.0 {
        geometric_factor(theta, round) + (new_max_rounds - round) as f64
    } else {
        let tail = theta.powf(round as f64 - new_max_rounds as f64) / (1.0 - theta);
        geometric_factor(theta, round) + tail
    };
    Ok(delta_s / budget.epsilon * (2.0 * q * bracket * l).sqrt())
}

/// Geometric noise plan: variance `theta^(m-1) * sigma0^2` at round `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma0: f64,
    theta: f64,
    max_rounds: usize,
    sample_ratio: f64,
    sensitivity: f64,
}

impl NoiseSchedule {
    pub fn new(sigma0: f64, theta: f64, max_rounds: usize, sample_ratio: f64, sensitivity: f64) -> Result<Self> {
        check_theta(theta)?;
        check_ratio_and_sensitivity(sample_ratio, sensitivity)?;
        if !(sigma0.is_finite() && sigma0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and nonnegative, got {sigma0}")));
        }
        if max_rounds == 0 {
            return Err(Error::InvalidArgument("at least one round is required".into()));
        }
        Ok(Self { sigma0, theta, max_rounds, sample_ratio, sensitivity })
    }

    /// Schedule whose initial amplitude comes from [`initial_sigma`].
    pub fn calibrate(budget: &PrivacyBudget, q: f64, delta_s: f64, max_rounds: usize, theta: f64) -> Result<Self> {
        let sigma0 = initial_sigma(budget, q, delta_s, max_rounds, theta)?;
        Self::new(sigma0, theta, max_rounds, q, delta_s)
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn max_rounds(&self) -> usize {
        self.max_rounds
    }

    pub fn sample_ratio(&self) -> f64 {
        self.sample_ratio
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn with_sigma0(&self, sigma0: f64) -> Result<Self> {
        Self::new(sigma0, self.theta, self.max_rounds, self.sample_ratio, self.sensitivity)
    }

    pub fn variance_at_round(&self, round: usize) -> Result<f64> {
        if round == 0 || round > self.max_rounds {
            return Err(Error::RoundOutOfRange { round, max_rounds: self.max_rounds });
        }
        Ok(self.theta.powi(round as i32 - 1) * self.sigma0 * self.sigma0)
    }

    pub fn variances(&self) -> Vec<f64> {
        (1..=self.max_rounds).map(|m| self.theta.powi(m as i32 - 1) * self.sigma0 * self.sigma0).collect()
    }

    pub fn account(&self) -> Result<MomentAccount> {
        MomentAccount::new(self.variances(), self.sample_ratio, self.sensitivity)
    }
}

/// Per-round variances of a realized or planned run, ready for accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccount {
    per_round_variances: Vec<f64>,
    sample_ratio: f64,
    sensitivity: f64,
}

impl MomentAccount {
    pub fn new(per_round_variances: Vec<f64>, sample_ratio: f64, sensitivity: f64) -> Result<Self> {
        check_ratio_and_sensitivity(sample_ratio, sensitivity)?;
        if per_round_variances.is_empty() {
            return Err(Error::InvalidArgument("an account needs at least one round".into()));
        }
        if let Some((i, &v)) = per_round_variances.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::DegenerateVariance { round: i + 1, variance: v });
        }
        Ok(Self { per_round_variances, sample_ratio, sensitivity })
    }

    pub fn variances(&self) -> &[f64] {
        &self.per_round_variances
    }

    pub fn rounds(&self) -> usize {
        self.per_round_variances.len()
    }

    /// Appends another account's rounds. Both must share `q` and the sensitivity.
    pub fn concat(&self, other: &MomentAccount) -> Result<Self> {
        if self.sample_ratio != other.sample_ratio || self.sensitivity != other.sensitivity {
            return Err(Error::InvalidArgument("accounts differ in sample ratio or sensitivity".into()));
        }
        let mut v = self.per_round_variances.clone();
        v.extend_from_slice(&other.per_round_variances);
        Self::new(v, self.sample_ratio, self.sensitivity)
    }

    /// `c` in `alpha(lambda) = c * lambda * (lambda + 1)`.
    pub fn moment_coefficient(&self) -> f64 {
        let inv: f64 = self.per_round_variances.iter().map(|v| 1.0 / v).sum();
        self.sample_ratio * self.sensitivity * self.sensitivity * inv / 2.0
    }
}

/// Composed log moment `alpha(lambda)` of all rounds in the account.
pub fn log_moment(account: &MomentAccount, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("moment order must be nonnegative, got {lambda}")));
    }
    let q = account.sample_ratio;
    let ds2 = account.sensitivity * account.sensitivity;
    Ok(account.per_round_variances.iter().map(|v| q * lambda * (lambda + 1.0) * ds2 / (2.0 * v)).sum())
}

/// Outcome of checking an account against a budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub satisfied: bool,
    pub achieved_delta: f64,
    /// Order actually used, after clamping at 0.
    pub lambda_star: f64,
    /// Stationary point of the exponent before clamping.
    pub unclamped_lambda_star: f64,
    pub clamped: bool,
}

/// Exponent `g(lambda) = alpha(lambda) - lambda * eps` of the tail bound.
pub fn tail_exponent(account: &MomentAccount, epsilon: f64, lambda: f64) -> f64 {
    let c = account.moment_coefficient();
    c * lambda * (lambda + 1.0) - lambda * epsilon
}

/// Minimizes the tail bound in closed form and compares it with `budget.delta`.
///
/// The exponent is quadratic in `lambda` with its minimum at
/// `eps / (2c) - 1/2`; a negative stationary point is clamped to 0, where the
/// bound degenerates to 1.
pub fn verify_account(account: &MomentAccount, budget: &PrivacyBudget) -> BudgetCheck {
    let c = account.moment_coefficient();
    let unclamped = budget.epsilon / (2.0 * c) - 0.5;
    let clamped = unclamped < 0.0;
    let lambda_star = unclamped.max(0.0);
    let exponent = tail_exponent(account, budget.epsilon, lambda_star);
    let log_delta = budget.delta.ln();
    BudgetCheck {
        satisfied: exponent <= log_delta + DELTA_CMP_RTOL * log_delta.abs(),
        achieved_delta: exponent.exp(),
        lambda_star,
        unclamped_lambda_star: unclamped,
        clamped,
    }
}

pub fn verify_budget(schedule: &NoiseSchedule, budget: &PrivacyBudget) -> Result<BudgetCheck> {
    Ok(verify_account(&schedule.account()?, budget))
}
