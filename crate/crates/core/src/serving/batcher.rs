//! Dynamic-batching dispatch logic, shared by the simulator and the
//! threaded server.
//!
//! A batch is dispatched when either (a) the queued item total reaches
//! `max_batch_items` — the batch takes whole requests FIFO up to that
//! many items — or (b) `batch_timeout` has elapsed since the oldest
//! undispatched request arrived, in which case everything queued goes
//! out. Requests are never reordered or split, so one request with more
//! items than `max_batch_items` forms its own oversized batch.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const NS_PER_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BatcherConfig {
    pub batch_timeout_ns: u64,
    pub max_batch_items: usize,
    /// Capacity of the pending-request queue; the newest request is
    /// rejected with an overload response beyond this.
    pub queue_capacity: usize,
}

impl BatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch_items == 0 || self.queue_capacity == 0 {
            return Err(Error::config(
                "batcher: max_batch_items and queue_capacity must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn from_ms(timeout_ms: f64, max_batch_items: usize, queue_capacity: usize) -> Self {
        BatcherConfig {
            batch_timeout_ns: (timeout_ms * NS_PER_MS as f64).round() as u64,
            max_batch_items,
            queue_capacity,
        }
    }
}

/// A queued request with its arrival time and caller payload.
#[derive(Debug, Clone)]
pub struct Pending<T> {
    pub id: u64,
    pub n_items: usize,
    pub arrived_ns: u64,
    pub payload: T,
}

/// One dispatched batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub requests: Vec<Pending<T>>,
}

impl<T> Batch<T> {
    pub fn n_items(&self) -> usize {
        self.requests.iter().map(|r| r.n_items).sum()
    }
}

#[derive(Debug)]
pub struct Batcher<T> {
    config: BatcherConfig,
    queue: VecDeque<Pending<T>>,
    queued_items: usize,
}

impl<T> Batcher<T> {
    pub fn new(config: BatcherConfig) -> Result<Self> {
        config.validate()?;
        Ok(Batcher { config, queue: VecDeque::new(), queued_items: 0 })
    }

    pub fn queued_requests(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue; `Err` returns the request when the queue is full.
    pub fn push(&mut self, req: Pending<T>) -> std::result::Result<(), Pending<T>> {
        if self.queue.len() >= self.config.queue_capacity {
            return Err(req);
        }
        self.queued_items += req.n_items;
        self.queue.push_back(req);
        Ok(())
    }

    /// Instant at which the oldest queued request times out.
    pub fn deadline_ns(&self) -> Option<u64> {
        self.queue
            .front()
            .map(|r| r.arrived_ns + self.config.batch_timeout_ns)
    }

    /// Dispatch a batch if a trigger has fired at `now_ns`.
    pub fn try_dispatch(&mut self, now_ns: u64) -> Option<Batch<T>> {
        if self.queue.is_empty() {
            return None;
        }
        let size_trigger = self.queued_items >= self.config.max_batch_items;
        let timeout_trigger = self
            .deadline_ns()
            .map(|d| now_ns >= d)
            .unwrap_or(false);
        if !size_trigger && !timeout_trigger {
            return None;
        }
        let mut requests = Vec::new();
        let mut items = 0usize;
        if size_trigger {
            // whole requests FIFO up to max_batch_items; a single oversize
            // request goes out alone
            while let Some(front) = self.queue.front() {
                if !requests.is_empty() && items + front.n_items > self.config.max_batch_items {
                    break;
                }
                let r = self.queue.pop_front().unwrap();
                items += r.n_items;
                self.queued_items -= r.n_items;
                requests.push(r);
                if items >= self.config.max_batch_items {
                    break;
                }
            }
        } else {
            // timeout: everything queued goes out
            while let Some(r) = self.queue.pop_front() {
                self.queued_items -= r.n_items;
                requests.push(r);
            }
        }
        Some(Batch { requests })
    }
}
