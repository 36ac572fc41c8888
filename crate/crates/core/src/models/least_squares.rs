use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};

use super::{check_batch, Model, ModelParams};

/// Linear regression with loss `mean(0.5 * (w.x - y)^2)`.
///
/// Convex and smooth, so it is the model used to check the convergence bound
/// against realized runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeastSquares {
    pub input_dim: usize,
}

impl LeastSquares {
    pub fn new(input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be at least 1".into()));
        }
        Ok(Self { input_dim })
    }

    fn targets<'a>(&self, data: &'a Dataset) -> Result<&'a [f64]> {
        check_batch(data, self.input_dim)?;
        match data.labels() {
            Labels::Targets(v) | Labels::Signs(v) => Ok(v),
            Labels::Classes { .. } => Err(Error::InvalidArgument("least squares needs real targets".into())),
        }
    }

    fn residuals<'a>(
        &self,
        w: &'a [f64],
        data: &'a Dataset,
        ys: &'a [f64],
    ) -> impl Iterator<Item = (f64, &'a [f64])> + 'a {
        data.rows().zip(ys).map(move |(x, &y)| (x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y, x))
    }
}

impl Model for LeastSquares {
    fn num_params(&self) -> usize {
        self.input_dim
    }

    fn loss(&self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        self.check_params(params)?;
        let ys = self.targets(data)?;
        let sum: f64 = self.residuals(params.as_slice(), data, ys).map(|(r, _)| 0.5 * r * r).sum();
        Ok(sum / data.len() as f64)
    }

    fn gradient(&self, params: &ModelParams, data: &Dataset) -> Result<ModelParams> {
        self.check_params(params)?;
        let ys = self.targets(data)?;
        let n = data.len() as f64;
        let mut grad = vec![0.0; self.input_dim];
        for (r, x) in self.residuals(params.as_slice(), data, ys) {
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi / n);
        }
        Ok(ModelParams::from_vec(grad))
    }

    fn accuracy(&self, _params: &ModelParams, _data: &Dataset) -> Result<Option<f64>> {
        Ok(None)
    }
}
