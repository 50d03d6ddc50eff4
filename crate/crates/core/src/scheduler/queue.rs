use std::collections::BTreeMap;

use crate::domain::{GenerationRequest, RequestId, Timestamp};

/// Requests waiting for a batch slot, ordered by arrival time then id.
#[derive(Debug, Default)]
pub struct PendingQueue {
    inner: BTreeMap<(Timestamp, RequestId), GenerationRequest>,
}

impl PendingQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Returns the request back if one with the same arrival and id is queued.
    pub fn push(&mut self, request: GenerationRequest) -> Result<(), GenerationRequest> {
        let key = (request.arrival_time, request.id);
        if self.inner.contains_key(&key) {
            return Err(request);
        }
        self.inner.insert(key, request);
        Ok(())
    }

    pub fn next_arrival(&self) -> Option<Timestamp> {
        self.inner.keys().next().map(|k| k.0)
    }

    /// Pops the head if it has arrived by `now`.
    pub fn pop_ready(&mut self, now: Timestamp) -> Option<GenerationRequest> {
        let entry = self.inner.first_entry()?;
        if entry.key().0 <= now {
            Some(entry.remove())
        } else {
            None
        }
    }

    pub fn remove(&mut self, id: RequestId) -> Option<GenerationRequest> {
        let key = *self.inner.keys().find(|k| k.1 == id)?;
        self.inner.remove(&key)
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.inner.keys().any(|k| k.1 == id)
    }

    pub fn drain(&mut self) -> impl Iterator<Item = GenerationRequest> + '_ {
        std::mem::take(&mut self.inner).into_values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TokenId;

    fn req(id: u64, at: u64) -> GenerationRequest {
        GenerationRequest::text(id, vec![TokenId(1)], 1, TokenId(256))
            .arriving_at(Timestamp::from_millis(at))
    }

    #[test]
    fn fifo_with_id_tiebreak() {
        let mut q = PendingQueue::new();
        q.push(req(3, 5)).unwrap();
        q.push(req(2, 5)).unwrap();
        q.push(req(9, 1)).unwrap();
        let now = Timestamp::from_millis(10);
        let order: Vec<u64> = std::iter::from_fn(|| q.pop_ready(now)).map(|r| r.id.0).collect();
        assert_eq!(order, vec![9, 2, 3]);
    }

    #[test]
    fn future_arrivals_wait() {
        let mut q = PendingQueue::new();
        q.push(req(1, 10)).unwrap();
        assert!(q.pop_ready(Timestamp::from_millis(9)).is_none());
        assert_eq!(q.next_arrival(), Some(Timestamp::from_millis(10)));
        assert!(q.pop_ready(Timestamp::from_millis(10)).is_some());
    }

    #[test]
    fn duplicate_rejected_and_remove_by_id() {
        let mut q = PendingQueue::new();
        q.push(req(1, 0)).unwrap();
        assert!(q.push(req(1, 0)).is_err());
        q.push(req(2, 0)).unwrap();
        assert!(q.remove(RequestId(1)).is_some());
        assert!(!q.contains(RequestId(1)));
        assert_eq!(q.len(), 1);
    }
}
