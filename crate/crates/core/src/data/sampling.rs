use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DomainDataset};
use crate::nets::mix_seed;

/// Keeps exactly `n` labeled items per class, chosen by a seeded shuffle
/// within each class. Output is grouped by class, in the shuffled order.
pub fn subsample_per_class(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset, DataError> {
    Ok(split_per_class(ds, n, seed)?.0)
}

/// Like [`subsample_per_class`], also returning every item that was not
/// picked (unlabeled items included), in original order.
pub fn split_per_class(
    ds: &DomainDataset,
    n: usize,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset), DataError> {
    let mut by_class = vec![Vec::new(); ds.class_count()];
    for (i, l) in ds.labels().iter().enumerate() {
        if let Some(l) = l {
            by_class[*l].push(i);
        }
    }
    let mut keep = Vec::with_capacity(n * by_class.len());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < n {
            return Err(DataError::ClassTooSmall {
                class,
                have: members.len(),
                need: n,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("subsample/{class}")));
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    let mut picked = vec![false; ds.len()];
    for &i in &keep {
        picked[i] = true;
    }
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !picked[i]).collect();
    Ok((ds.subset(&keep), ds.subset(&rest)))
}

/// Keeps labels on `round(fraction × class_size)` seeded-chosen items of
/// each class and removes the rest. Images and order are untouched.
pub fn strip_labels(ds: &DomainDataset, labeled_fraction: f64, seed: u64) -> Result<DomainDataset, DataError> {
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(DataError::Invalid(format!(
            "labeled fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let mut by_class = vec![Vec::new(); ds.class_count()];
    for (i, l) in ds.labels().iter().enumerate() {
        if let Some(l) = l {
            by_class[*l].push(i);
        }
    }
    let mut labels = vec![None; ds.len()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        let keep = (labeled_fraction * members.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("strip/{class}")));
        members.shuffle(&mut rng);
        for &i in &members[..keep] {
            labels[i] = Some(class);
        }
    }
    Ok(ds.with_labels(labels))
}

/// Index batches of one epoch.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    /// Shuffles `pool` with a stream determined by `(seed, epoch)`.
    pub fn over(pool: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Self, DataError> {
        if pool.is_empty() {
            return Err(DataError::Empty);
        }
        if batch_size == 0 || batch_size > pool.len() {
            return Err(DataError::Invalid(format!(
                "batch size {batch_size} for {} items",
                pool.len()
            )));
        }
        let mut order = pool.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("epoch/{epoch}")));
        order.shuffle(&mut rng);
        Ok(BatchIter {
            order,
            batch_size,
            pos: 0,
        })
    }

    /// Number of batches in the epoch, counting the final short one.
    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// The `k`-th batch without consuming the iterator.
    pub fn nth_batch(&self, k: usize) -> Option<&[usize]> {
        let start = k * self.batch_size;
        (start < self.order.len()).then(|| &self.order[start..(start + self.batch_size).min(self.order.len())])
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let b = self.nth_batch(self.pos)?.to_vec();
        self.pos += 1;
        Some(b)
    }
}

pub fn batch_iter(ds: &DomainDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter, DataError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    BatchIter::over(&all, batch_size, seed, epoch)
}
