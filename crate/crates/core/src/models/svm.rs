use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};

use super::{check_batch, Model, ModelParams};

/// Which per-sample hinge term to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeForm {
    /// `max(0, 1 - y * w.x)`.
    #[default]
    Standard,
    /// `max(0, y - w.x)`, a nonstandard margin form.
    Literal,
}

/// Linear classifier with hinge loss and L2 regularization, no bias term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub input_dim: usize,
    pub reg: f64,
    pub hinge: HingeForm,
}

impl LinearSvm {
    pub fn new(input_dim: usize, reg: f64, hinge: HingeForm) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("SVM input dimension must be at least 1".into()));
        }
        if !(reg.is_finite() && reg > 0.0) {
            return Err(Error::InvalidArgument(format!("regularization must be positive, got {reg}")));
        }
        Ok(Self { input_dim, reg, hinge })
    }

    fn signs<'a>(&self, data: &'a Dataset) -> Result<&'a [f64]> {
        check_batch(data, self.input_dim)?;
        match data.labels() {
            Labels::Signs(v) => Ok(v),
            Labels::Classes { ids, .. } => {
                let (i, &c) = ids.iter().enumerate().find(|(_, &c)| c > 1).unwrap_or((0, &ids[0]));
                Err(Error::InvalidLabel { index: i, label: c as f64, reason: "SVM labels must be -1 or +1".into() })
            }
            Labels::Targets(_) => Err(Error::InvalidArgument("SVM labels must be -1 or +1".into())),
        }
    }

    /// Hinge slack for one sample; positive means the term is active.
    fn slack(&self, score: f64, y: f64) -> f64 {
        match self.hinge {
            HingeForm::Standard => 1.0 - y * score,
            HingeForm::Literal => y - score,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model for LinearSvm {
    fn num_params(&self) -> usize {
        self.input_dim
    }

    fn loss(&self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        self.check_params(params)?;
        let ys = self.signs(data)?;
        let w = params.as_slice();
        let hinge: f64 = data.rows().zip(ys).map(|(x, &y)| self.slack(dot(w, x), y).max(0.0)).sum();
        Ok(hinge / data.len() as f64 + 0.5 * self.reg * dot(w, w))
    }

    /// Uses 0 as the subgradient of the hinge at its kink.
    fn gradient(&self, params: &ModelParams, data: &Dataset) -> Result<ModelParams> {
        self.check_params(params)?;
        let ys = self.signs(data)?;
        let w = params.as_slice();
        let n = data.len() as f64;
        let mut grad: Vec<f64> = w.iter().map(|wi| self.reg * wi).collect();
        for (x, &y) in data.rows().zip(ys) {
            if self.slack(dot(w, x), y) > 0.0 {
                let coeff = match self.hinge {
                    HingeForm::Standard => -y / n,
                    HingeForm::Literal => -1.0 / n,
                };
                grad.iter_mut().zip(x).for_each(|(g, xi)| *g += coeff * xi);
            }
        }
        Ok(ModelParams::from_vec(grad))
    }

    fn accuracy(&self, params: &ModelParams, data: &Dataset) -> Result<Option<f64>> {
        self.check_params(params)?;
        let ys = self.signs(data)?;
        let w = params.as_slice();
        let correct = data.rows().zip(ys).filter(|(x, &y)| (if dot(w, x) >= 0.0 { 1.0 } else { -1.0 }) == y).count();
        Ok(Some(correct as f64 / data.len() as f64))
    }
}
