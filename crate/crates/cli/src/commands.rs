use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use fedvar::bounds::{bound_derivative, estimate_dissimilarity_and_divergence, optimal_m};
use fedvar::data::{load_csv, load_idx, partition_iid, partition_label_sorted, synth_blobs, BlobSpec, Dataset, Labels};
use fedvar::engine::{initial_params, run_training, Calibration, TrainingOutcome};
use fedvar::models::{LinearSvm, MlpArchitecture, Model};
use fedvar::privacy::{initial_sigma, sensitivity_from_clip, tight_initial_sigma, verify_budget, NoiseSchedule};

use crate::config::{DataSource, ExperimentConfig, ModelKind, PartitionKind, RunPoint};
use crate::CliError;

/// Data ready for a run: one shard per user plus the aggregator's test set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<Dataset>,
    pub weights: Vec<f64>,
}

impl Prepared {
    /// `Δs = 2C / min_k |D_k|`.
    pub fn sensitivity(&self, clip_norm: f64) -> Result<f64, CliError> {
        let smallest = self.clients.iter().map(Dataset::len).min().unwrap_or(0);
        sensitivity_from_clip(clip_norm, smallest).map_err(config_err)
    }
}

fn config_err(e: fedvar::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: fedvar::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn class_count(d: &Dataset) -> Option<usize> {
    match d.labels() {
        Labels::Classes { num_classes, .. } => Some(*num_classes),
        _ => None,
    }
}

/// Loads or generates the data, holds out the test set and partitions the
/// rest across users. SVM runs get one-vs-rest sign labels.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let d = &config.data;
    let (mut train, mut test) = match d.source {
        DataSource::Synth => {
            let s = &d.synth;
            let spec = BlobSpec {
                num_classes: s.classes,
                samples_per_class: s.samples_per_class,
                input_dim: s.input_dim,
                spread: s.spread,
                separation: s.separation,
                seed: s.seed,
            };
            let all = synth_blobs(&spec).map_err(config_err)?;
            let (test, train) = all.split(d.test_size, d.seed).map_err(config_err)?;
            (train, test)
        }
        DataSource::Idx => {
            let idx = d.idx.as_ref().ok_or_else(|| CliError::Config("missing [data.idx]".into()))?;
            let all = load_idx(&idx.images, &idx.labels).map_err(config_err)?.dataset;
            match (&idx.test_images, &idx.test_labels) {
                (Some(ti), Some(tl)) => (all, load_idx(ti, tl).map_err(config_err)?.dataset),
                (None, None) => {
                    let (test, train) = all.split(d.test_size, d.seed).map_err(config_err)?;
                    (train, test)
                }
                _ => return Err(CliError::Config("test_images and test_labels must be given together".into())),
            }
        }
        DataSource::Csv => {
            let csv = d.csv.as_ref().ok_or_else(|| CliError::Config("missing [data.csv]".into()))?;
            let all = load_csv(&csv.path, &csv.label_column).map_err(config_err)?;
            match &csv.test_path {
                Some(tp) => (all, load_csv(tp, &csv.label_column).map_err(config_err)?),
                None => {
                    let (test, train) = all.split(d.test_size, d.seed).map_err(config_err)?;
                    (train, test)
                }
            }
        }
    };
    if train.dim() != test.dim() {
        return Err(CliError::Config(format!("train has {} features, test has {}", train.dim(), test.dim())));
    }
    if let (Some(a), Some(b)) = (class_count(&train), class_count(&test)) {
        let n = a.max(b);
        train = train.with_num_classes(n).map_err(config_err)?;
        test = test.with_num_classes(n).map_err(config_err)?;
    }
    if config.model.kind == ModelKind::Svm {
        train = train.to_signs(config.model.positive_class).map_err(config_err)?;
        test = test.to_signs(config.model.positive_class).map_err(config_err)?;
    }
    if test.is_empty() {
        return Err(CliError::Config("the test set is empty; set data.test_size".into()));
    }
    let users = config.federation.num_users;
    let partition = match d.partition {
        PartitionKind::Iid => partition_iid(&train, users, d.seed),
        PartitionKind::LabelSorted => partition_label_sorted(&train, users, d.seed),
    }
    .map_err(config_err)?;
    Ok(Prepared { clients: partition.materialize(&train), weights: partition.weights().to_vec(), train, test })
}

pub fn build_model(config: &ExperimentConfig, data: &Prepared) -> Result<Box<dyn Model>, CliError> {
    let dim = data.train.dim();
    match config.model.kind {
        ModelKind::Mlp => {
            let classes =
                class_count(&data.train).ok_or_else(|| CliError::Config("the MLP needs class labels".into()))?;
            Ok(Box::new(MlpArchitecture::new(dim, config.model.hidden_units, classes).map_err(config_err)?))
        }
        ModelKind::Svm => Ok(Box::new(LinearSvm::new(dim, config.model.reg, config.model.hinge).map_err(config_err)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaRow {
    pub theta: f64,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub sigma: f64,
    pub round: usize,
    pub variance: f64,
    pub achieved_delta: Option<f64>,
    pub satisfied: Option<u8>,
}

/// Initial amplitude and per-round variances for every `(ϑ, ε, M)`.
pub fn cmd_sigma(config: &ExperimentConfig, data: &Prepared) -> Result<Vec<SigmaRow>, CliError> {
    let ds = data.sensitivity(config.federation.clip_norm)?;
    let q = config.federation.num_sampled as f64 / config.federation.num_users as f64;
    let mut rows = Vec::new();
    for point in distinct_schedules(config) {
        let budget = config.federation_config(&point).budget;
        let (sigma, check) = match budget {
            None => (0.0, None),
            Some(b) => {
                let sigma = match config.privacy.calibration {
                    Calibration::Standard => initial_sigma(&b, q, ds, point.max_rounds, point.theta),
                    Calibration::Tight => tight_initial_sigma(&b, q, ds, point.max_rounds, point.theta),
                }
                .map_err(config_err)?;
                let schedule = NoiseSchedule::new(sigma, point.theta, point.max_rounds, q, ds).map_err(config_err)?;
                (sigma, Some(verify_budget(&schedule, &b).map_err(runtime_err)?))
            }
        };
        for round in 1..=point.max_rounds {
            rows.push(SigmaRow {
                theta: point.theta,
                epsilon: point.epsilon.0,
                max_rounds: point.max_rounds,
                sigma,
                round,
                variance: point.theta.powi(round as i32 - 1) * sigma * sigma,
                achieved_delta: check.map(|c| c.achieved_delta),
                satisfied: check.map(|c| u8::from(c.satisfied)),
            });
        }
    }
    Ok(rows)
}

/// Sweep points with the seed axis collapsed.
fn distinct_schedules(config: &ExperimentConfig) -> Vec<RunPoint> {
    let mut out: Vec<RunPoint> = Vec::new();
    for p in config.points() {
        let p = RunPoint { seed: config.federation.seed, ..p };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub theta: f64,
    pub epsilon: f64,
    pub total_iters: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub tau: f64,
    pub bound: f64,
    pub derivative: f64,
    pub convex: u8,
    pub m_star: usize,
    pub dissimilarity: f64,
    pub divergence: f64,
}

/// `G(M)` over `M ∈ [1, T]` with `T = M_config · τ` for every sweep point.
pub fn cmd_bound(config: &ExperimentConfig, data: &Prepared) -> Result<Vec<BoundRow>, CliError> {
    let ds = data.sensitivity(config.federation.clip_norm)?;
    let mut rows = Vec::new();
    for point in distinct_schedules(config) {
        let mut params = config.bound_params(point.max_rounds);
        if config.bound.estimate {
            let model = build_model(config, data)?;
            let w0 = initial_params(model.num_params(), point.seed);
            let h = estimate_dissimilarity_and_divergence(model.as_ref(), &w0, &data.clients, &data.weights)
                .map_err(runtime_err)?;
            params.dissimilarity = h.dissimilarity.max(1.0);
            params.divergence = h.divergence;
        }
        let inputs = config.schedule_inputs(&point, ds);
        let opt = optimal_m(&params, &inputs).map_err(config_err)?;
        let t = params.total_iterations;
        for (i, &g) in opt.g_values.iter().enumerate() {
            let m = i + 1;
            rows.push(BoundRow {
                theta: point.theta,
                epsilon: point.epsilon.0,
                total_iters: t,
                m,
                tau: t as f64 / m as f64,
                bound: g,
                derivative: bound_derivative(&params, &inputs, m as f64).map_err(runtime_err)?,
                convex: u8::from(opt.convex),
                m_star: opt.m_star,
                dissimilarity: params.dissimilarity,
                divergence: params.divergence,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub m: usize,
    pub theta: f64,
    pub epsilon: f64,
    pub sigma_in_force: f64,
    pub variance_applied: f64,
    #[serde(rename = "M_current")]
    pub m_current: usize,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub adjusted: u8,
    pub wall_ms: f64,
}

pub fn run_point(
    config: &ExperimentConfig,
    data: &Prepared,
    model: &dyn Model,
    point: &RunPoint,
) -> Result<TrainingOutcome, CliError> {
    let fed = config.federation_config(point);
    run_training(&fed, model, &data.clients, &data.test).map_err(runtime_err)
}

/// One training run at the base point; one row per aggregation.
pub fn cmd_train(config: &ExperimentConfig, data: &Prepared) -> Result<(Vec<TrainRow>, TrainingOutcome), CliError> {
    let model = build_model(config, data)?;
    let point = config.base_point();
    let outcome = run_point(config, data, model.as_ref(), &point)?;
    let rows = outcome
        .rounds
        .iter()
        .zip(&outcome.wall_ms)
        .map(|(r, &ms)| TrainRow {
            m: r.round,
            theta: point.theta,
            epsilon: point.epsilon.0,
            sigma_in_force: r.sigma,
            variance_applied: r.variance,
            m_current: r.max_rounds,
            test_loss: r.test_loss,
            test_accuracy: r.test_accuracy,
            adjusted: u8::from(r.adjusted),
            wall_ms: ms,
        })
        .collect();
    Ok((rows, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub seed: u64,
    pub rounds_run: usize,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub final_train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub achieved_delta: Option<f64>,
    pub satisfied: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRoundRow {
    pub theta: f64,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub seed: u64,
    pub m: usize,
    pub variance_applied: f64,
    #[serde(rename = "M_current")]
    pub m_current: usize,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub adjusted: u8,
}

/// Every sweep point, run in parallel; results are in point order.
pub fn sweep_outcomes(
    config: &ExperimentConfig,
    data: &Prepared,
) -> Result<Vec<(RunPoint, TrainingOutcome)>, CliError> {
    let model = build_model(config, data)?;
    config.points().into_par_iter().map(|p| Ok((p, run_point(config, data, model.as_ref(), &p)?))).collect()
}

pub fn cmd_sweep(config: &ExperimentConfig, data: &Prepared) -> Result<Vec<SweepRow>, CliError> {
    let model = build_model(config, data)?;
    sweep_outcomes(config, data)?
        .into_iter()
        .map(|(p, out)| {
            let last = out.rounds.last().ok_or_else(|| CliError::Runtime("run produced no rounds".into()))?;
            let full_loss = model.loss(&out.final_params, &data.train).map_err(runtime_err)?;
            let train_accuracy = model.accuracy(&out.final_params, &data.train).map_err(runtime_err)?;
            Ok(SweepRow {
                theta: p.theta,
                epsilon: p.epsilon.0,
                max_rounds: p.max_rounds,
                seed: p.seed,
                rounds_run: out.rounds.len(),
                final_test_loss: last.test_loss,
                final_test_accuracy: last.test_accuracy,
                final_train_loss: full_loss,
                train_accuracy,
                achieved_delta: out.budget_check.map(|c| c.achieved_delta),
                satisfied: out.budget_check.map(|c| u8::from(c.satisfied)),
            })
        })
        .collect()
}

pub fn sweep_round_rows(outcomes: &[(RunPoint, TrainingOutcome)]) -> Vec<SweepRoundRow> {
    outcomes
        .iter()
        .flat_map(|(p, out)| {
            out.rounds.iter().map(move |r| SweepRoundRow {
                theta: p.theta,
                epsilon: p.epsilon.0,
                max_rounds: p.max_rounds,
                seed: p.seed,
                m: r.round,
                variance_applied: r.variance,
                m_current: r.max_rounds,
                test_loss: r.test_loss,
                test_accuracy: r.test_accuracy,
                adjusted: u8::from(r.adjusted),
            })
        })
        .collect()
}

/// Writes rows as CSV with a header line.
pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}
