use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

use super::{Dataset, Labels};

/// Disjoint shards of sample indices, one per user, with weights
/// `p_k = |D_k| / sum |D_k|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl Partition {
    pub fn from_shards(shards: Vec<Vec<usize>>) -> Result<Self> {
        if shards.is_empty() || shards.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every shard must be nonempty".into()));
        }
        let total: usize = shards.iter().map(Vec::len).sum();
        let weights = shards.iter().map(|s| s.len() as f64 / total as f64).collect();
        Ok(Self { shards, weights })
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_users(&self) -> usize {
        self.shards.len()
    }

    pub fn smallest_shard(&self) -> usize {
        self.shards.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn materialize(&self, dataset: &Dataset) -> Vec<Dataset> {
        self.shards.iter().map(|s| dataset.subset(s)).collect()
    }
}

fn check_users(n: usize, users: usize) -> Result<()> {
    if users == 0 {
        return Err(Error::InvalidArgument("need at least one user".into()));
    }
    if users > n {
        return Err(Error::InvalidArgument(format!("{users} users but only {n} samples")));
    }
    Ok(())
}

/// Cuts `order` into `users` contiguous blocks whose sizes differ by at most one.
fn deal(order: &[usize], users: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let (base, extra) = (n / users, n % users);
    let mut shards = Vec::with_capacity(users);
    let mut start = 0;
    for k in 0..users {
        let len = base + usize::from(k < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    shards
}

/// Random equal-size shards.
pub fn partition_iid(dataset: &Dataset, users: usize, seed: u64) -> Result<Partition> {
    check_users(dataset.len(), users)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Stream::new(seed, Purpose::Partition, 0, 0).shuffle(&mut order);
    Partition::from_shards(deal(&order, users))
}

/// Label-sorted shards: each user sees only a few adjacent classes.
///
/// The default configuration uses iid shards; this split is for exploring
/// heterogeneous clients.
pub fn partition_label_sorted(dataset: &Dataset, users: usize, seed: u64) -> Result<Partition> {
    check_users(dataset.len(), users)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Stream::new(seed, Purpose::Partition, 1, 0).shuffle(&mut order);
    let key = |i: usize| -> f64 {
        match dataset.labels() {
            Labels::Classes { ids, .. } => ids[i] as f64,
            Labels::Signs(v) | Labels::Targets(v) => v[i],
        }
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    Partition::from_shards(deal(&order, users))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n).map(|i| i as f64).collect(),
            1,
            Labels::Classes { ids: (0..n).map(|i| i % 3).collect(), num_classes: 3 },
        )
        .unwrap()
    }

    fn covers(p: &Partition, n: usize) -> bool {
        let mut all: Vec<usize> = p.shards().iter().flatten().copied().collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn hundred_into_ten() {
        let p = partition_iid(&dataset(100), 10, 4).unwrap();
        assert!(p.shards().iter().all(|s| s.len() == 10));
        assert!(p.weights().iter().all(|&w| w == 0.1));
        assert!(covers(&p, 100));
    }

    #[test]
    fn single_user() {
        let p = partition_iid(&dataset(17), 1, 0).unwrap();
        assert_eq!(p.weights(), &[1.0]);
        assert!(covers(&p, 17));
    }

    #[test]
    fn uneven_sizes_differ_by_at_most_one() {
        let p = partition_iid(&dataset(103), 10, 1).unwrap();
        let sizes: Vec<usize> = p.shards().iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap(), 1);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(covers(&p, 103));
    }

    #[test]
    fn too_many_users() {
        assert!(partition_iid(&dataset(5), 6, 0).is_err());
        assert!(partition_iid(&dataset(5), 0, 0).is_err());
    }

    #[test]
    fn label_sorted_groups_classes() {
        let d = dataset(30);
        let p = partition_label_sorted(&d, 3, 2).unwrap();
        assert!(covers(&p, 30));
        for (k, shard) in p.shards().iter().enumerate() {
            assert!(shard.iter().all(|&i| i % 3 == k));
        }
    }
}
