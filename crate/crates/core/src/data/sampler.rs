use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Infinite stream of row-index batches over one dataset.
pub trait BatchSampler {
    fn batch_size(&self) -> usize;

    fn next_batch(&mut self) -> Vec<usize>;

    /// Batches in one pass: `ceil(N / batch_size)`.
    fn batches_per_epoch(&self) -> usize;
}

/// Draws a class uniformly, then a row of that class uniformly with
/// replacement, so every class is seen with probability `1/K`.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    len: usize,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    pub fn new(ds: &LabeledDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        let mut by_class = vec![Vec::new(); ds.num_classes()];
        for (i, &l) in ds.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        if let Some(class) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Self {
            by_class,
            batch_size,
            len: ds.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    fn draw(&mut self) -> usize {
        let class = self.rng.random_range(0..self.by_class.len());
        let rows = &self.by_class[class];
        rows[self.rng.random_range(0..rows.len())]
    }
}

impl BatchSampler for ClassBalancedSampler {
    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.draw()).collect()
    }

    fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }
}

/// Shuffled passes over all rows, reshuffling whenever a pass runs out.
/// Never reads labels.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl UniformSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        if len == 0 {
            return Err(Error::InvalidInput("cannot sample from an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            cursor: 0,
            batch_size,
            rng,
        })
    }
}

impl BatchSampler for UniformSampler {
    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}
