//! Bounded FIFO used for every hardware queue in the model. Capacity is
//! fixed at construction; a rejected push is the backpressure signal.

use alloc::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct ClockedQueue<T> {
    items: VecDeque<T>,
    cap: usize,
}

impl<T> ClockedQueue<T> {
    pub fn new(cap: usize) -> ClockedQueue<T> {
        assert!(cap >= 1, "queue depth must be at least 1");
        ClockedQueue { items: VecDeque::with_capacity(cap), cap }
    }

    /// Returns the item back to the caller when the queue is full.
    pub fn push(&mut self, item: T) -> Result<(), T> {
        if self.items.len() == self.cap {
            return Err(item);
        }
        self.items.push_back(item);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn peek(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.cap
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn free(&self) -> usize {
        self.cap - self.items.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}
