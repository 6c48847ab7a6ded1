//! Minibatch sampling.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Indices of one minibatch; each sample carries weight `1/len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    indices: Vec<usize>,
}

impl Minibatch {
    /// Builds a batch and checks it against a dataset of `dataset_size` samples.
    pub fn new(indices: Vec<usize>, dataset_size: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("minibatch must be nonempty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset_size) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for dataset of size {dataset_size}"
            )));
        }
        Ok(Minibatch { indices })
    }

    pub fn single(index: usize) -> Self {
        Minibatch {
            indices: vec![index],
        }
    }

    /// Every index exactly once, in order.
    pub fn full(dataset_size: usize) -> Self {
        Minibatch {
            indices: (0..dataset_size).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.indices.len() as f64
    }
}

/// Draws `batch_size` indices uniformly with replacement.
pub fn sample_minibatch(dataset_size: usize, batch_size: usize, rng: &mut Rng) -> Result<Minibatch> {
    check_sizes(dataset_size, batch_size)?;
    let indices = (0..batch_size).map(|_| rng.index(dataset_size)).collect();
    Ok(Minibatch { indices })
}

fn check_sizes(dataset_size: usize, batch_size: usize) -> Result<()> {
    if batch_size == 0 || batch_size > dataset_size {
        return Err(Error::invalid(format!(
            "batch size {batch_size} must lie in 1..={dataset_size}"
        )));
    }
    Ok(())
}

/// How a trajectory draws its minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingPolicy {
    /// i.i.d. uniform indices with replacement.
    #[default]
    WithReplacement,
    /// Reshuffle once per epoch and walk the permutation without replacement.
    EpochShuffle,
}

/// Stateful batch source implementing a [`SamplingPolicy`].
#[derive(Debug, Clone)]
pub struct BatchSampler {
    policy: SamplingPolicy,
    dataset_size: usize,
    batch_size: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(policy: SamplingPolicy, dataset_size: usize, batch_size: usize) -> Result<Self> {
        check_sizes(dataset_size, batch_size)?;
        Ok(BatchSampler {
            policy,
            dataset_size,
            batch_size,
            perm: (0..dataset_size).collect(),
            cursor: dataset_size,
        })
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Minibatch {
        match self.policy {
            SamplingPolicy::WithReplacement => {
                let indices = (0..self.batch_size)
                    .map(|_| rng.index(self.dataset_size))
                    .collect();
                Minibatch { indices }
            }
            SamplingPolicy::EpochShuffle => {
                if self.cursor >= self.dataset_size {
                    rand::seq::SliceRandom::shuffle(self.perm.as_mut_slice(), rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.batch_size).min(self.dataset_size);
                let indices = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                Minibatch { indices }
            }
        }
    }
}
