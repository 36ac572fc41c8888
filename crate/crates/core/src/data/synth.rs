use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

use super::{Dataset, Labels};

/// Gaussian class clusters around centroids on scaled basis vectors.
///
/// Class `c` is centred at `separation * e_(c mod dim)`, shifted along
/// `e_((c / dim) mod dim)` for classes beyond `dim` so centroids stay
/// distinct. Each coordinate gets independent `N(0, spread^2)` noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, input_dim: usize, spread: f64, seed: u64) -> Self {
        Self { num_classes, samples_per_class, input_dim, spread, separation: 1.0, seed }
    }

    fn centroid(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.input_dim];
        c[class % self.input_dim] += self.separation;
        if class >= self.input_dim {
            c[(class / self.input_dim) % self.input_dim] -= 0.5 * self.separation;
        }
        c
    }
}

/// Samples are emitted class-major: all of class 0, then class 1, and so on.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.input_dim == 0 {
        return Err(Error::InvalidArgument("blob counts must all be at least 1".into()));
    }
    if !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be nonnegative, got {}", spec.spread)));
    }
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.input_dim);
    let mut ids = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let centroid = spec.centroid(class);
        let mut stream = Stream::new(spec.seed, Purpose::Data, 0, class as u64);
        for _ in 0..spec.samples_per_class {
            features.extend(centroid.iter().map(|&c| c + spec.spread * stream.standard_normal()));
            ids.push(class);
        }
    }
    Dataset::new(features, spec.input_dim, Labels::Classes { ids, num_classes: spec.num_classes })
}
