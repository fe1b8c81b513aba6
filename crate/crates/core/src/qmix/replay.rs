//! FIFO transition store with uniform sampling.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use super::Transition;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `batch` distinct transitions chosen uniformly.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if batch > self.items.len() {
            return Err(Error::Contract(alloc::format!("batch of {batch} from {} stored transitions", self.items.len())));
        }
        Ok(index::sample(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}
