//! Ring-buffer replay storage and the preference dataset.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TrajectoryPair;

/// Fixed-capacity FIFO buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        Ok(Self {
            items: VecDeque::new(),
            capacity,
        })
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            self.push(item);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.items.iter_mut()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let len = self.items.len();
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..len)]).collect())
    }

    /// `n` distinct items, uniformly without replacement.
    pub fn sample_distinct<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if n > self.items.len() {
            return Err(Error::NotEnoughItems {
                requested: n,
                available: self.items.len(),
            });
        }
        Ok(index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Preference dataset of trajectory pairs. Batches never repeat a pair.
#[derive(Debug, Clone)]
pub struct PreferenceDataset<P = TrajectoryPair> {
    pairs: ReplayBuffer<P>,
}

impl<P> PreferenceDataset<P> {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            pairs: ReplayBuffer::new(capacity)?,
        })
    }

    pub fn push_pair(&mut self, pair: P) {
        self.pairs.push(pair);
    }

    pub fn sample_pairs<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&P>> {
        self.pairs.sample_distinct(n, rng)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &P> {
        self.pairs.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut P> {
        self.pairs.iter_mut()
    }
}

impl<P: Serialize + DeserializeOwned> PreferenceDataset<P> {
    /// One JSON record per line.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        for pair in self.iter() {
            serde_json::to_writer(&mut out, pair)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn restore<R: BufRead>(input: R, capacity: usize) -> Result<Self> {
        let mut ds = Self::new(capacity)?;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            ds.push_pair(serde_json::from_str(&line)?);
        }
        Ok(ds)
    }
}
