use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ImageId;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("unlabeled pool is empty")]
    EmptyPool,
    #[error("sample fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("train ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("need at least 2 labeled images to split, got {0}")]
    TooFewToSplit(usize),
    #[error("image {0} is not in the unlabeled pool")]
    NotUnlabeled(ImageId),
    #[error("test set is already frozen")]
    TestFrozen,
    #[error("pool invariant violated: {0}")]
    Invariant(String),
}

/// Which partition an image currently belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMembership {
    Unlabeled,
    Train,
    Test,
    /// Reviewed as sign-free and removed from the corpus.
    Discarded,
}

/// The partition of the corpus into unlabeled, train, test and discarded
/// images, plus the per-iteration record of train additions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolState {
    pub unlabeled: BTreeSet<ImageId>,
    pub train: BTreeSet<ImageId>,
    pub test: BTreeSet<ImageId>,
    pub discarded: BTreeSet<ImageId>,
    pub iteration_history: Vec<Vec<ImageId>>,
    pub test_frozen: bool,
}

impl PoolState {
    pub fn new(ids: impl IntoIterator<Item = ImageId>) -> Self {
        Self {
            unlabeled: ids.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn membership(&self, id: ImageId) -> Option<PoolMembership> {
        if self.unlabeled.contains(&id) {
            Some(PoolMembership::Unlabeled)
        } else if self.train.contains(&id) {
            Some(PoolMembership::Train)
        } else if self.test.contains(&id) {
            Some(PoolMembership::Test)
        } else if self.discarded.contains(&id) {
            Some(PoolMembership::Discarded)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.unlabeled.len() + self.train.len() + self.test.len() + self.discarded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take_unlabeled(&mut self, ids: &[ImageId]) -> Result<(), PoolError> {
        if let Some(&bad) = ids.iter().find(|id| !self.unlabeled.contains(id)) {
            return Err(PoolError::NotUnlabeled(bad));
        }
        for id in ids {
            self.unlabeled.remove(id);
        }
        Ok(())
    }

    /// Move reviewed-negative images out of the corpus for good.
    pub fn discard(&mut self, ids: &[ImageId]) -> Result<(), PoolError> {
        self.take_unlabeled(ids)?;
        self.discarded.extend(ids.iter().copied());
        Ok(())
    }

    /// Move images into the training set and record them as one iteration's
    /// additions.
    pub fn add_to_train(&mut self, ids: &[ImageId]) -> Result<(), PoolError> {
        self.take_unlabeled(ids)?;
        self.train.extend(ids.iter().copied());
        self.iteration_history.push(ids.to_vec());
        Ok(())
    }

    /// Carve the test set. Allowed once.
    pub fn freeze_test(&mut self, ids: &[ImageId]) -> Result<(), PoolError> {
        if self.test_frozen {
            return Err(PoolError::TestFrozen);
        }
        self.take_unlabeled(ids)?;
        self.test.extend(ids.iter().copied());
        self.test_frozen = true;
        Ok(())
    }

    /// Check pairwise disjointness, and optionally that the four sets cover
    /// exactly `expected_total` images.
    pub fn validate(&self, expected_total: Option<usize>) -> Result<(), PoolError> {
        let sets = [
            ("unlabeled", &self.unlabeled),
            ("train", &self.train),
            ("test", &self.test),
            ("discarded", &self.discarded),
        ];
        for (i, (na, a)) in sets.iter().enumerate() {
            for (nb, b) in &sets[i + 1..] {
                if let Some(id) = a.intersection(b).next() {
                    return Err(PoolError::Invariant(format!("image {id} in both {na} and {nb}")));
                }
            }
        }
        if let Some(total) = expected_total {
            if self.len() != total {
                return Err(PoolError::Invariant(format!(
                    "pool holds {} images, corpus has {total}",
                    self.len()
                )));
            }
        }
        let history: usize = self.iteration_history.iter().map(Vec::len).sum();
        if history != self.train.len() {
            return Err(PoolError::Invariant(format!(
                "iteration history lists {history} train images, train set has {}",
                self.train.len()
            )));
        }
        Ok(())
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Uniform sample without replacement of `round(fraction * |unlabeled|)`
/// images, returned in ascending id order.
pub fn initial_sample(pool: &PoolState, fraction: f64, seed: u64) -> Result<Vec<ImageId>, PoolError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PoolError::BadFraction(fraction));
    }
    if pool.unlabeled.is_empty() {
        return Err(PoolError::EmptyPool);
    }
    let candidates: Vec<ImageId> = pool.unlabeled.iter().copied().collect();
    let k = round_count(fraction, candidates.len());
    let mut rng = rng::keyed(seed, "initial_sample", &[]);
    let mut picked: Vec<ImageId> = index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Shuffle-and-cut split with `|train| = round(ratio * n)`, clamped so both
/// sides keep at least one image. Input order does not matter.
pub fn split_train_test(
    labeled: &[ImageId],
    train_ratio: f64,
    seed: u64,
) -> Result<(Vec<ImageId>, Vec<ImageId>), PoolError> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(PoolError::BadRatio(train_ratio));
    }
    let mut ids: Vec<ImageId> = labeled.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(PoolError::TooFewToSplit(ids.len()));
    }
    let n_train = round_count(train_ratio, ids.len()).clamp(1, ids.len() - 1);
    let mut rng = rng::keyed(seed, "split_train_test", &[]);
    ids.shuffle(&mut rng);
    let mut test = ids.split_off(n_train);
    ids.sort_unstable();
    test.sort_unstable();
    Ok((ids, test))
}
