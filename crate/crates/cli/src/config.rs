//! Experiment configuration file.
//!
//! A TOML document with one table per concern. Every key is optional and
//! defaults to the reference setting; unknown keys are rejected. See the
//! guide's configuration chapter for the full grammar.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use fedvar::bounds::{BoundParams, ScheduleInputs};
use fedvar::engine::{Calibration, FederationConfig};
use fedvar::models::HingeForm;
use fedvar::privacy::PrivacyBudget;

use crate::CliError;

/// Privacy level; `"inf"` in a config file means no noise at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

impl Epsilon {
    pub const INFINITE: Epsilon = Epsilon(f64::INFINITY);

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Epsilon;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive number or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Epsilon, E> {
                if v > 0.0 && !v.is_nan() {
                    Ok(Epsilon(v))
                } else {
                    Err(E::custom(format!("epsilon must be positive, got {v}")))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Epsilon, E> {
                self.visit_f64(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Epsilon, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Epsilon, E> {
                match v {
                    "inf" => Ok(Epsilon::INFINITE),
                    _ => Err(E::custom(format!("expected a number or \"inf\", got {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub privacy: PrivacySection,
    pub adjustment: AdjustmentSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub bound: BoundSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_users: usize,
    pub num_sampled: usize,
    pub local_iters: usize,
    /// `M`; total iterations are `M * local_iters`.
    pub max_rounds: usize,
    pub clip_norm: f64,
    pub step_size: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: Epsilon,
    pub delta: f64,
    pub theta: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustmentSection {
    pub enabled: bool,
    pub factor: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Svm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_units: usize,
    pub reg: f64,
    pub hinge: HingeForm,
    /// For the SVM on class-labelled data: this class is +1, the rest -1.
    pub positive_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    LabelSorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub partition: PartitionKind,
    /// Samples held out for the aggregator when no test files are given.
    pub test_size: usize,
    /// Seed of the split and the partition.
    pub seed: u64,
    pub synth: SynthSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    pub smoothness: f64,
    pub lipschitz: f64,
    pub pl_constant: f64,
    pub dissimilarity: f64,
    pub divergence: f64,
    pub initial_gap: f64,
    /// Replace `dissimilarity` and `divergence` by point estimates at `ω(0)`.
    pub estimate: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub theta: Vec<f64>,
    pub epsilon: Vec<Epsilon>,
    pub max_rounds: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Sweep output carries one row per round instead of one per run.
    pub per_round: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            num_users: 100,
            num_sampled: 10,
            local_iters: 5,
            max_rounds: 30,
            clip_norm: 5.0,
            step_size: 0.1,
            seed: 1,
        }
    }
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self { epsilon: Epsilon(10.0), delta: 1e-3, theta: 1.0, calibration: Calibration::Standard }
    }
}

impl Default for AdjustmentSection {
    fn default() -> Self {
        Self { enabled: false, factor: 0.8, tolerance: 1e-4 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Mlp, hidden_units: 32, reg: 0.01, hinge: HingeForm::Standard, positive_class: 0 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            partition: PartitionKind::Iid,
            test_size: 1000,
            seed: 2,
            synth: SynthSection::default(),
            idx: None,
            csv: None,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { classes: 10, samples_per_class: 400, input_dim: 20, spread: 0.4, separation: 2.0, seed: 3 }
    }
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            lipschitz: 1.0,
            pl_constant: 0.5,
            dissimilarity: 1.0,
            divergence: 0.1,
            initial_gap: 1.0,
            estimate: false,
        }
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPoint {
    pub theta: f64,
    pub epsilon: Epsilon,
    pub max_rounds: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), CliError> {
        for point in self.points() {
            self.federation_config(&point).validate().map_err(config_err)?;
            if !point.epsilon.is_infinite() {
                PrivacyBudget::new(point.epsilon.0, self.privacy.delta).map_err(config_err)?;
            }
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return Err(CliError::Config(format!("delta must be in (0, 1), got {}", self.privacy.delta)));
        }
        match self.data.source {
            DataSource::Idx if self.data.idx.is_none() => {
                return Err(CliError::Config("data.source = \"idx\" needs a [data.idx] table".into()))
            }
            DataSource::Csv if self.data.csv.is_none() => {
                return Err(CliError::Config("data.source = \"csv\" needs a [data.csv] table".into()))
            }
            _ => {}
        }
        if self.model.hidden_units == 0 {
            return Err(CliError::Config("model.hidden_units must be at least 1".into()));
        }
        if !(self.model.reg > 0.0 && self.model.reg.is_finite()) {
            return Err(CliError::Config(format!("model.reg must be positive, got {}", self.model.reg)));
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes; an empty axis contributes the
    /// single value from its home section. Ordered by theta, epsilon, M, seed.
    pub fn points(&self) -> Vec<RunPoint> {
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let thetas = or(&self.sweep.theta, self.privacy.theta);
        let eps = if self.sweep.epsilon.is_empty() { vec![self.privacy.epsilon] } else { self.sweep.epsilon.clone() };
        let rounds = if self.sweep.max_rounds.is_empty() {
            vec![self.federation.max_rounds]
        } else {
            self.sweep.max_rounds.clone()
        };
        let seeds = if self.sweep.seeds.is_empty() { vec![self.federation.seed] } else { self.sweep.seeds.clone() };
        let mut out = Vec::new();
        for &theta in &thetas {
            for &epsilon in &eps {
                for &max_rounds in &rounds {
                    for &seed in &seeds {
                        out.push(RunPoint { theta, epsilon, max_rounds, seed });
                    }
                }
            }
        }
        out
    }

    /// The single point described by the non-sweep sections.
    pub fn base_point(&self) -> RunPoint {
        RunPoint {
            theta: self.privacy.theta,
            epsilon: self.privacy.epsilon,
            max_rounds: self.federation.max_rounds,
            seed: self.federation.seed,
        }
    }

    pub fn federation_config(&self, point: &RunPoint) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            num_users: f.num_users,
            num_sampled: f.num_sampled,
            local_iters: f.local_iters,
            total_iters: point.max_rounds * f.local_iters,
            clip_norm: f.clip_norm,
            step_size: f.step_size,
            budget: if point.epsilon.is_infinite() {
                None
            } else {
                PrivacyBudget::new(point.epsilon.0, self.privacy.delta).ok()
            },
            theta: point.theta,
            adjust_factor: self.adjustment.factor,
            adjust_enabled: self.adjustment.enabled,
            adjust_tolerance: self.adjustment.tolerance,
            calibration: self.privacy.calibration,
            master_seed: point.seed,
        }
    }

    pub fn bound_params(&self, max_rounds: usize) -> BoundParams {
        let b = &self.bound;
        BoundParams {
            smoothness: b.smoothness,
            lipschitz: b.lipschitz,
            step_size: self.federation.step_size,
            pl_constant: b.pl_constant,
            dissimilarity: b.dissimilarity,
            divergence: b.divergence,
            initial_gap: b.initial_gap,
            num_users: self.federation.num_users,
            num_sampled: self.federation.num_sampled,
            total_iterations: max_rounds * self.federation.local_iters,
        }
    }

    pub fn schedule_inputs(&self, point: &RunPoint, sensitivity: f64) -> ScheduleInputs {
        ScheduleInputs {
            epsilon: point.epsilon.0,
            delta: self.privacy.delta,
            sample_ratio: self.federation.num_sampled as f64 / self.federation.num_users as f64,
            sensitivity,
            theta: point.theta,
        }
    }
}

fn config_err(e: fedvar::Error) -> CliError {
    CliError::Config(e.to_string())
}
