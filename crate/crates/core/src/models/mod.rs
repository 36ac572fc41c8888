//! Trainable models with full-batch loss and gradient evaluation.
//!
//! Parameters are a single flat vector. For layered models the canonical
//! layout is layer-major; within a layer the weight matrix comes first in
//! row-major order (one row per output unit), followed by the biases.

mod least_squares;
mod mlp;
mod svm;

pub use least_squares::LeastSquares;
pub use mlp::MlpArchitecture;
pub use svm::{HingeForm, LinearSvm};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|x| *x *= factor);
    }

    /// `w <- w / max(1, ||w|| / c)`.
    pub fn clip_to_norm(&mut self, clip_norm: f64) {
        let divisor = (self.norm() / clip_norm).max(1.0);
        if divisor > 1.0 {
            self.0.iter_mut().for_each(|x| *x /= divisor);
        }
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// A differentiable objective over a dataset.
pub trait Model: Send + Sync {
    fn num_params(&self) -> usize;

    /// Mean loss over `data`.
    fn loss(&self, params: &ModelParams, data: &Dataset) -> Result<f64>;

    /// Gradient (or subgradient) of [`Model::loss`].
    fn gradient(&self, params: &ModelParams, data: &Dataset) -> Result<ModelParams>;

    /// Fraction of correctly classified samples; `None` for regression.
    fn accuracy(&self, params: &ModelParams, data: &Dataset) -> Result<Option<f64>>;

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), actual: params.len() });
        }
        Ok(())
    }
}

fn check_batch(data: &Dataset, input_dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    if data.dim() != input_dim {
        return Err(Error::DimensionMismatch { expected: input_dim, actual: data.dim() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clipping() {
        let mut w = ModelParams::from_vec(vec![6.0, 8.0]);
        w.clip_to_norm(5.0);
        assert!((w.norm() - 5.0).abs() < 1e-12);
        assert_eq!(w.as_slice(), &[3.0, 4.0]);

        let mut w = ModelParams::from_vec(vec![1.8, 2.4]);
        let before = w.clone();
        w.clip_to_norm(5.0);
        assert_eq!(w, before);
    }

    proptest! {
        #[test]
        fn serde_round_trip(values in prop::collection::vec(-1e6f64..1e6, 0..64)) {
            let p = ModelParams::from_vec(values);
            let text = serde_json::to_string(&p).unwrap();
            let back: ModelParams = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn clip_never_exceeds(values in prop::collection::vec(-100f64..100.0, 1..32), c in 0.01f64..50.0) {
            let mut p = ModelParams::from_vec(values);
            p.clip_to_norm(c);
            prop_assert!(p.norm() <= c * (1.0 + 1e-12));
        }
    }
}
