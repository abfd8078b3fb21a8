//! Fixed-capacity FIFO buffers: replay memory and the observation pool.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

/// Encoded features of every pair in one epoch, `(pairs, features)`.
pub type EpochRecord = Arc<Array2<f64>>;

/// Ring buffer that evicts its oldest entry once full.
#[derive(Debug, Clone)]
pub struct ReplayMemory<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayMemory<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity), capacity }
    }

    /// Appends `item`, returning the evicted entry when the buffer was full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity { self.items.pop_front() } else { None };
        self.items.push_back(item);
        evicted
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

    /// Entry `i`, oldest first.
    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `batch` distinct entries drawn uniformly; `None` while fewer are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&T>> {
        if batch > self.items.len() {
            return None;
        }
        Some(rand::seq::index::sample(rng, self.items.len(), batch).iter().map(|i| &self.items[i]).collect())
    }
}

/// The most recent epoch records, front-padded with a neutral record until full.
#[derive(Debug, Clone)]
pub struct ObservationPool {
    records: VecDeque<EpochRecord>,
    capacity: usize,
    neutral: EpochRecord,
}

impl ObservationPool {
    pub fn new(capacity: usize, neutral: EpochRecord) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        Self { records: VecDeque::with_capacity(capacity), capacity, neutral }
    }

    pub fn push(&mut self, record: EpochRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    /// Exactly `capacity` records, oldest first.
    pub fn window(&self) -> Vec<EpochRecord> {
        let pad = self.capacity - self.records.len();
        std::iter::repeat_n(&self.neutral, pad).chain(&self.records).cloned().collect()
    }
}
