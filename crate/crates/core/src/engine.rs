//! Federated training loop with clipped local steps, per-client Gaussian
//! perturbation on a geometric schedule, weighted aggregation, client
//! sampling and online shrinking of the planned number of rounds.
//!
//! One run is a pure function of its configuration, model, data and master
//! seed. Clients of a round are processed in parallel but each draws from its
//! own pre-keyed stream and results are combined in ascending client order,
//! so output does not depend on the thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelParams};
use crate::privacy::{
    adjusted_sigma, initial_sigma, sensitivity_from_clip, tight_initial_sigma, verify_account, BudgetCheck,
    MomentAccount, PrivacyBudget,
};
use crate::rng::{Purpose, Stream};

/// Half-width of the uniform initialization of `ω(0)`.
pub const INIT_SCALE: f64 = 0.05;

/// How the initial noise amplitude is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// [`initial_sigma`] and [`adjusted_sigma`] as stated.
    #[default]
    Standard,
    /// [`tight_initial_sigma`], with adjustments scaled by the same factor.
    Tight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// `U`
    pub num_users: usize,
    /// `K`
    pub num_sampled: usize,
    /// `τ`
    pub local_iters: usize,
    /// `T`, a multiple of `τ`.
    pub total_iters: usize,
    /// `C`
    pub clip_norm: f64,
    /// `η`
    pub step_size: f64,
    /// `None` runs without noise.
    pub budget: Option<PrivacyBudget>,
    /// `ϑ`
    pub theta: f64,
    /// `α_d`, in (0, 1].
    pub adjust_factor: f64,
    pub adjust_enabled: bool,
    /// Relative slack of the plateau test.
    pub adjust_tolerance: f64,
    pub calibration: Calibration,
    pub master_seed: u64,
}

impl FederationConfig {
    /// Planned number of aggregations `M = T / τ`.
    pub fn max_rounds(&self) -> usize {
        self.total_iters / self.local_iters.max(1)
    }

    /// `q = K / U`.
    pub fn sample_ratio(&self) -> f64 {
        self.num_sampled as f64 / self.num_users as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_sampled == 0 || self.num_sampled > self.num_users {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= K <= U, got K = {}, U = {}",
                self.num_sampled, self.num_users
            )));
        }
        if self.local_iters == 0 || self.total_iters == 0 || !self.total_iters.is_multiple_of(self.local_iters) {
            return Err(Error::InvalidArgument(format!(
                "total iterations {} must be a positive multiple of local iterations {}",
                self.total_iters, self.local_iters
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::InvalidArgument(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.adjust_factor > 0.0 && self.adjust_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "adjustment factor must be in (0, 1], got {}",
                self.adjust_factor
            )));
        }
        if !(self.adjust_tolerance.is_finite() && self.adjust_tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adjustment tolerance must be nonnegative, got {}",
                self.adjust_tolerance
            )));
        }
        Ok(())
    }
}

/// A client's shard and its working copy of the model.
#[derive(Debug, Clone)]
pub struct ClientState<'a> {
    pub client_id: usize,
    pub shard: &'a Dataset,
    pub local_params: ModelParams,
}

/// Telemetry for one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// `Σ p_k f_k(ω_k)` over sampled clients, before noise.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    /// Amplitude `σ` (or `σ′`) whose schedule produced this round's variance.
    pub sigma: f64,
    /// `ϑ^{m−1} σ²`
    pub variance: f64,
    /// Planned number of rounds after this round's adjustment decision.
    pub max_rounds: usize,
    pub adjusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub rounds: Vec<RoundMetrics>,
    pub final_params: ModelParams,
    /// Variance applied in each executed round.
    pub applied_variances: Vec<f64>,
    /// `Δs = 2C / min_k |D_k|`.
    pub sensitivity: f64,
    /// Post-hoc check of the applied variances; `None` without noise.
    pub budget_check: Option<BudgetCheck>,
    /// Wall-clock milliseconds per round. Not part of the deterministic output.
    #[serde(skip)]
    pub wall_ms: Vec<f64>,
}

/// One full-batch gradient step followed by `ω ← ω / max(1, ‖ω‖/C)`.
pub fn local_update(model: &dyn Model, client: &mut ClientState<'_>, step_size: f64, clip_norm: f64) -> Result<()> {
    let grad = model.gradient(&client.local_params, client.shard)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite { round: 0, what: format!("gradient of client {}", client.client_id) });
    }
    client.local_params.axpy(-step_size, &grad);
    client.local_params.clip_to_norm(clip_norm);
    Ok(())
}

/// Adds i.i.d. `N(0, variance)` noise to every coordinate.
pub fn perturb(params: &ModelParams, variance: f64, stream: &mut Stream) -> Result<ModelParams> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance must be nonnegative, got {variance}")));
    }
    let mut out = params.clone();
    if variance > 0.0 {
        let sd = variance.sqrt();
        out.as_mut_slice().iter_mut().for_each(|w| *w += sd * stream.standard_normal());
    }
    Ok(out)
}

/// `Σ p_k ω_k`, accumulated in the given order.
pub fn aggregate(weighted: &[(f64, ModelParams)]) -> Result<ModelParams> {
    let first = weighted.first().ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    let sum: f64 = weighted.iter().map(|(p, _)| p).sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum { sum });
    }
    let dim = first.1.len();
    let mut out = ModelParams::zeros(dim);
    for (p, w) in weighted {
        if w.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: w.len() });
        }
        out.axpy(*p, w);
    }
    Ok(out)
}

/// `K` distinct client ids drawn uniformly for `round`, ascending.
pub fn sample_clients(num_users: usize, num_sampled: usize, round: usize, master_seed: u64) -> Result<Vec<usize>> {
    if num_sampled == 0 || num_sampled > num_users {
        return Err(Error::InvalidArgument(format!("cannot sample {num_sampled} of {num_users} clients")));
    }
    let mut stream = Stream::new(master_seed, Purpose::Sampling, round as u64, 0);
    Ok(stream.sample_without_replacement(num_users, num_sampled))
}

/// Returns `⌈α_d M⌉` when the latest test loss failed to drop below the
/// previous one by more than `tolerance` (relative).
///
/// `losses[i]` is the test loss after round `i + 1`.
pub fn maybe_adjust(losses: &[f64], max_rounds: usize, adjust_factor: f64, tolerance: f64) -> Option<usize> {
    let [.., prev, last] = losses else {
        return None;
    };
    if *last >= prev - tolerance * prev.abs() {
        Some((adjust_factor * max_rounds as f64 - 1e-9).ceil().max(0.0) as usize)
    } else {
        None
    }
}

/// Uniform `[-INIT_SCALE, INIT_SCALE]` initialization from the master seed.
pub fn initial_params(num_params: usize, master_seed: u64) -> ModelParams {
    let mut stream = Stream::new(master_seed, Purpose::Init, 0, 0);
    ModelParams::from_vec((0..num_params).map(|_| stream.uniform(-INIT_SCALE, INIT_SCALE)).collect())
}

/// Current plan: amplitude in force and planned round count.
struct Plan {
    sigma: f64,
    max_rounds: usize,
}

struct Calibrator {
    budget: PrivacyBudget,
    q: f64,
    sensitivity: f64,
    theta: f64,
    /// Multiplier applied to every amplitude from the standard formulas.
    scale: f64,
}

impl Calibrator {
    fn new(config: &FederationConfig, budget: PrivacyBudget, sensitivity: f64) -> Result<Self> {
        let q = config.sample_ratio();
        let scale = match config.calibration {
            Calibration::Standard => 1.0,
            // The tight and standard amplitudes differ by a constant factor.
            Calibration::Tight => {
                tight_initial_sigma(&budget, q, sensitivity, 1, config.theta)?
                    / initial_sigma(&budget, q, sensitivity, 1, config.theta)?
            }
        };
        Ok(Self { budget, q, sensitivity, theta: config.theta, scale })
    }

    fn initial(&self, max_rounds: usize) -> Result<f64> {
        Ok(self.scale * initial_sigma(&self.budget, self.q, self.sensitivity, max_rounds, self.theta)?)
    }

    fn adjusted(&self, round: usize, new_max: usize) -> Result<f64> {
        Ok(self.scale * adjusted_sigma(&self.budget, self.q, self.sensitivity, self.theta, round, new_max)?)
    }
}

fn tag_round(err: Error, round: usize) -> Error {
    match err {
        Error::NonFinite { what, .. } => Error::NonFinite { round, what },
        other => other,
    }
}

/// Runs the federated loop.
///
/// `clients[k]` is the shard of client `k`; `test` is the aggregator-side
/// evaluation set driving the plateau test.
pub fn run_training(
    config: &FederationConfig,
    model: &dyn Model,
    clients: &[Dataset],
    test: &Dataset,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if clients.len() != config.num_users {
        return Err(Error::InvalidArgument(format!(
            "config has {} users but {} shards were given",
            config.num_users,
            clients.len()
        )));
    }
    let smallest = clients.iter().map(Dataset::len).min().unwrap_or(0);
    if smallest == 0 {
        return Err(Error::InvalidArgument("every client needs a nonempty shard".into()));
    }
    let sensitivity = sensitivity_from_clip(config.clip_norm, smallest)?;
    let calibrator = config.budget.map(|b| Calibrator::new(config, b, sensitivity)).transpose()?;

    let mut plan = Plan {
        sigma: calibrator.as_ref().map_or(Ok(0.0), |c| c.initial(config.max_rounds()))?,
        max_rounds: config.max_rounds(),
    };
    let mut global = initial_params(model.num_params(), config.master_seed);
    let mut rounds = Vec::new();
    let mut applied = Vec::new();
    let mut wall_ms = Vec::new();
    let mut test_losses = Vec::new();

    let mut m = 1;
    while m <= plan.max_rounds {
        let started = Instant::now();
        let variance = config.theta.powi(m as i32 - 1) * plan.sigma * plan.sigma;
        let sampled = sample_clients(config.num_users, config.num_sampled, m, config.master_seed)?;
        let sampled_total: f64 = sampled.iter().map(|&k| clients[k].len() as f64).sum();

        // Broadcast: every sampled client starts the block from ω(m−1).
        let uploads = sampled
            .par_iter()
            .map(|&k| {
                let mut client = ClientState { client_id: k, shard: &clients[k], local_params: global.clone() };
                for _ in 0..config.local_iters {
                    local_update(model, &mut client, config.step_size, config.clip_norm)?;
                }
                let loss = model.loss(&client.local_params, client.shard)?;
                let mut stream = Stream::new(config.master_seed, Purpose::Noise, k as u64, m as u64);
                let noisy = perturb(&client.local_params, variance, &mut stream)?;
                let p = clients[k].len() as f64 / sampled_total;
                Ok((p, loss, noisy))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| tag_round(e, m))?;

        let train_loss = uploads.iter().map(|(p, loss, _)| p * loss).sum();
        let weighted: Vec<(f64, ModelParams)> = uploads.into_iter().map(|(p, _, w)| (p, w)).collect();
        global = aggregate(&weighted)?;
        if !global.is_finite() {
            return Err(Error::NonFinite { round: m, what: "aggregated model".into() });
        }

        let test_loss = model.loss(&global, test)?;
        if !test_loss.is_finite() {
            return Err(Error::NonFinite { round: m, what: "test loss".into() });
        }
        let test_accuracy = model.accuracy(&global, test)?;
        test_losses.push(test_loss);
        applied.push(variance);

        let sigma_used = plan.sigma;
        let mut adjusted = false;
        if config.adjust_enabled && m < plan.max_rounds {
            if let Some(new_max) =
                maybe_adjust(&test_losses, plan.max_rounds, config.adjust_factor, config.adjust_tolerance)
            {
                adjusted = true;
                if new_max <= m {
                    plan.max_rounds = m;
                } else {
                    if let Some(c) = &calibrator {
                        plan.sigma = c.adjusted(m, new_max)?;
                    }
                    plan.max_rounds = new_max;
                }
            }
        }

        rounds.push(RoundMetrics {
            round: m,
            train_loss,
            test_loss,
            test_accuracy,
            sigma: sigma_used,
            variance,
            max_rounds: plan.max_rounds,
            adjusted,
        });
        wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
        m += 1;
    }

    let budget_check = match config.budget {
        Some(budget) => {
            Some(verify_account(&MomentAccount::new(applied.clone(), config.sample_ratio(), sensitivity)?, &budget))
        }
        None => None,
    };
    Ok(TrainingOutcome { rounds, final_params: global, applied_variances: applied, sensitivity, budget_check, wall_ms })
}
