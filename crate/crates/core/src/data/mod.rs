//! Datasets, generators, loaders and partitioning across users.

mod idx;
mod partition;
mod synth;
mod tabular;

pub use idx::{load_idx, parse_idx, write_idx, IdxData, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition_iid, partition_label_sorted, Partition};
pub use synth::{synth_blobs, BlobSpec};
pub use tabular::{load_csv, parse_csv};

use crate::error::{Error, Result};

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class ids in `0..num_classes`.
    Classes { ids: Vec<usize>, num_classes: usize },
    /// Binary labels in {-1, +1}.
    Signs(Vec<f64>),
    /// Real-valued regression targets.
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Signs(v) | Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes { ids, num_classes } => {
                Labels::Classes { ids: indices.iter().map(|&i| ids[i]).collect(), num_classes: *num_classes }
            }
            Labels::Signs(v) => Labels::Signs(indices.iter().map(|&i| v[i]).collect()),
            Labels::Targets(v) => Labels::Targets(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Labels,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Labels) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be at least 1".into()));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} feature values do not divide into rows of {dim}",
                features.len()
            )));
        }
        let rows = features.len() / dim;
        if rows != labels.len() {
            return Err(Error::DimensionMismatch { expected: rows, actual: labels.len() });
        }
        match &labels {
            Labels::Classes { ids, num_classes } => {
                if let Some((i, &c)) = ids.iter().enumerate().find(|(_, &c)| c >= *num_classes) {
                    return Err(Error::InvalidLabel {
                        index: i,
                        label: c as f64,
                        reason: format!("class id must be below {num_classes}"),
                    });
                }
            }
            Labels::Signs(v) => {
                if let Some((i, &s)) = v.iter().enumerate().find(|(_, &s)| s != 1.0 && s != -1.0) {
                    return Err(Error::InvalidLabel { index: i, label: s, reason: "expected -1 or +1".into() });
                }
            }
            Labels::Targets(v) => {
                if let Some((i, &t)) = v.iter().enumerate().find(|(_, t)| !t.is_finite()) {
                    return Err(Error::InvalidLabel { index: i, label: t, reason: "target is not finite".into() });
                }
            }
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite feature in row {}", pos / dim)));
        }
        Ok(Self { features, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.features.chunks_exact(self.dim)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset { features, dim: self.dim, labels: self.labels.select(indices) }
    }

    /// One-vs-rest relabeling: `positive_class` becomes +1, every other class -1.
    pub fn to_signs(&self, positive_class: usize) -> Result<Dataset> {
        match &self.labels {
            Labels::Classes { ids, .. } => Ok(Dataset {
                features: self.features.clone(),
                dim: self.dim,
                labels: Labels::Signs(ids.iter().map(|&c| if c == positive_class { 1.0 } else { -1.0 }).collect()),
            }),
            Labels::Signs(_) => Ok(self.clone()),
            Labels::Targets(_) => Err(Error::InvalidArgument("regression targets cannot be turned into signs".into())),
        }
    }

    /// Widens the declared class count, e.g. when a file lacks the top classes.
    pub fn with_num_classes(mut self, n: usize) -> Result<Dataset> {
        match &mut self.labels {
            Labels::Classes { ids, num_classes } => {
                if ids.iter().any(|&c| c >= n) {
                    return Err(Error::InvalidArgument(format!("labels exceed {n} classes")));
                }
                *num_classes = n;
                Ok(self)
            }
            _ => Err(Error::InvalidArgument("dataset has no class labels".into())),
        }
    }

    /// Splits off the first `n` rows after a seeded shuffle; returns `(head, rest)`.
    pub fn split(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!("cannot split {n} rows from {}", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        crate::rng::Stream::new(seed, crate::rng::Purpose::Data, 1, 0).shuffle(&mut order);
        let (head, rest) = order.split_at(n);
        Ok((self.subset(head), self.subset(rest)))
    }
}
