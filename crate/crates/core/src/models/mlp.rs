use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};

use super::{check_batch, Model, ModelParams};

/// One hidden layer with identity activation, softmax output, mean
/// cross-entropy loss.
///
/// Layout: `W1` (hidden x input), `b1` (hidden), `W2` (classes x hidden),
/// `b2` (classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_units: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_units == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("MLP sizes must all be at least 1".into()));
        }
        Ok(Self { input_dim, hidden_units, num_classes })
    }

    fn offsets(&self) -> Offsets {
        let (d, h, c) = (self.input_dim, self.hidden_units, self.num_classes);
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        Offsets { b1, w2, b2, end: b2 + c }
    }

    fn class_ids<'a>(&self, data: &'a Dataset) -> Result<&'a [usize]> {
        check_batch(data, self.input_dim)?;
        match data.labels() {
            Labels::Classes { ids, num_classes } if *num_classes <= self.num_classes => Ok(ids),
            Labels::Classes { num_classes, .. } => Err(Error::InvalidArgument(format!(
                "dataset declares {num_classes} classes, model has {}",
                self.num_classes
            ))),
            _ => Err(Error::InvalidArgument("MLP needs class-id labels".into())),
        }
    }

    /// Hidden activations and logits for one input row.
    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let o = self.offsets();
        let d = self.input_dim;
        for (j, z) in hidden.iter_mut().enumerate() {
            let row = &w[j * d..(j + 1) * d];
            *z = w[o.b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let h = self.hidden_units;
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &w[o.w2 + k * h..o.w2 + (k + 1) * h];
            *l = w[o.b2 + k] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, params: &ModelParams, x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden_units];
        let mut logits = vec![0.0; self.num_classes];
        self.forward(params.as_slice(), x, &mut hidden, &mut logits);
        argmax(&logits)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

/// Replaces logits with softmax probabilities; returns log-sum-exp.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter_mut().for_each(|l| *l = (*l - lse).exp());
    lse
}

impl Model for MlpArchitecture {
    fn num_params(&self) -> usize {
        self.offsets().end
    }

    fn loss(&self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        self.check_params(params)?;
        let ids = self.class_ids(data)?;
        let w = params.as_slice();
        let mut hidden = vec![0.0; self.hidden_units];
        let mut logits = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for (x, &y) in data.rows().zip(ids) {
            self.forward(w, x, &mut hidden, &mut logits);
            let target = logits[y];
            total += softmax_in_place(&mut logits) - target;
        }
        Ok(total / data.len() as f64)
    }

    fn gradient(&self, params: &ModelParams, data: &Dataset) -> Result<ModelParams> {
        self.check_params(params)?;
        let ids = self.class_ids(data)?;
        let o = self.offsets();
        let (d, h) = (self.input_dim, self.hidden_units);
        let w = params.as_slice();
        let mut grad = vec![0.0; o.end];
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; self.num_classes];
        let mut back = vec![0.0; h];
        for (x, &y) in data.rows().zip(ids) {
            self.forward(w, x, &mut hidden, &mut logits);
            softmax_in_place(&mut logits);
            logits[y] -= 1.0;
            back.iter_mut().for_each(|b| *b = 0.0);
            for (k, &gk) in logits.iter().enumerate() {
                grad[o.b2 + k] += gk;
                let row = o.w2 + k * h;
                for j in 0..h {
                    grad[row + j] += gk * hidden[j];
                    back[j] += gk * w[row + j];
                }
            }
            for (j, &bj) in back.iter().enumerate() {
                grad[o.b1 + j] += bj;
                for (g, &xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += bj * xi;
                }
            }
        }
        let n = data.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(ModelParams::from_vec(grad))
    }

    fn accuracy(&self, params: &ModelParams, data: &Dataset) -> Result<Option<f64>> {
        self.check_params(params)?;
        let ids = self.class_ids(data)?;
        let correct = data.rows().zip(ids).filter(|(x, &y)| self.predict(params, x) == y).count();
        Ok(Some(correct as f64 / data.len() as f64))
    }
}
