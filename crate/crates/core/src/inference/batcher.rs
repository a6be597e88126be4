use std::time::Instant;

use crossbeam_channel::{Receiver, RecvTimeoutError};

use super::BatchPolicy;

/// Groups items from a channel into batches under a [`BatchPolicy`].
///
/// Arrival order is preserved, empty batches are never produced, and the
/// final partial batch is flushed when every sender has gone away.
pub struct Batcher<T> {
    rx: Receiver<T>,
    policy: BatchPolicy,
}

/// Batches the stream behind `rx`.
pub fn batch_collect<T>(policy: BatchPolicy, rx: Receiver<T>) -> Batcher<T> {
    Batcher {
        rx,
        policy: BatchPolicy {
            max_batch: policy.max_batch.max(1),
            ..policy
        },
    }
}

impl<T> Batcher<T> {
    /// Additionally caps batches at `limit` rows (the backend's batch limit).
    pub fn with_limit(mut self, limit: usize) -> Self {
        self.policy.max_batch = self.policy.max_batch.min(limit.max(1));
        self
    }

    pub fn max_batch(&self) -> usize {
        self.policy.max_batch
    }
}

impl<T> Iterator for Batcher<T> {
    type Item = Vec<T>;

    fn next(&mut self) -> Option<Vec<T>> {
        let first = self.rx.recv().ok()?;
        let deadline = Instant::now() + self.policy.max_wait;
        let mut batch = Vec::with_capacity(self.policy.max_batch);
        batch.push(first);
        while batch.len() < self.policy.max_batch {
            match self.rx.recv_deadline(deadline) {
                Ok(item) => batch.push(item),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        Some(batch)
    }
}
