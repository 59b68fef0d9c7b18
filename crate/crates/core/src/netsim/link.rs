use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A packet waiting on or crossing the backhaul.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Queued {
    pub challenger: u32,
    pub probe: u32,
    pub bytes: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackhaulStats {
    pub arrivals: u64,
    pub queue_drops: u64,
    pub departures: u64,
    pub transmitted_bytes: u64,
    pub max_queued_bytes: u64,
    /// Total time spent transmitting, in ns.
    pub busy_ns: f64,
}

/// Tail drop: the packet did not fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull;

/// Drop-tail FIFO drained at a time-varying rate. Service times are kept in
/// fractional nanoseconds so long busy periods do not drift.
#[derive(Debug, Clone)]
pub struct Backhaul {
    queue: VecDeque<Queued>,
    queued_bytes: u64,
    capacity: u64,
    /// Completion time of the packet in service.
    done_at: f64,
    pub stats: BackhaulStats,
}

impl Backhaul {
    pub fn new(capacity_bytes: u64) -> Self {
        Backhaul { queue: VecDeque::new(), queued_bytes: 0, capacity: capacity_bytes, done_at: 0.0, stats: BackhaulStats::default() }
    }

    pub fn queued_bytes(&self) -> u64 {
        self.queued_bytes
    }

    /// Adds a packet at `now`. Returns `Err` if the queue is full, otherwise
    /// the completion time to schedule when the link was idle.
    pub fn enqueue(&mut self, now: u64, item: Queued, rate_bps: impl FnOnce() -> f64) -> Result<Option<f64>, QueueFull> {
        self.stats.arrivals += 1;
        if self.queued_bytes + u64::from(item.bytes) > self.capacity {
            self.stats.queue_drops += 1;
            return Err(QueueFull);
        }
        self.queue.push_back(item);
        self.queued_bytes += u64::from(item.bytes);
        self.stats.max_queued_bytes = self.stats.max_queued_bytes.max(self.queued_bytes);
        if self.queue.len() == 1 {
            let start = (now as f64).max(self.done_at);
            Ok(Some(self.start(start, item.bytes, rate_bps())))
        } else {
            Ok(None)
        }
    }

    fn start(&mut self, at: f64, bytes: u32, rate_bps: f64) -> f64 {
        let tx = f64::from(bytes) * 8.0 * 1e9 / rate_bps;
        self.stats.busy_ns += tx;
        self.done_at = at + tx;
        self.done_at
    }

    /// Finishes the packet in service. Returns it and the completion time of
    /// the next one, if any.
    pub fn complete(&mut self, rate_bps: impl FnOnce() -> f64) -> (Queued, Option<f64>) {
        let item = self.queue.pop_front().expect("completion with empty backhaul");
        self.queued_bytes -= u64::from(item.bytes);
        self.stats.departures += 1;
        self.stats.transmitted_bytes += u64::from(item.bytes);
        let next = self.queue.front().map(|n| n.bytes);
        let at = self.done_at;
        (item, next.map(|bytes| self.start(at, bytes, rate_bps())))
    }
}

/// A challenger's access link: FIFO with a byte limit, no cross traffic.
#[derive(Debug, Clone)]
pub struct Uplink {
    rate_bps: f64,
    capacity: u64,
    free_at: f64,
}

impl Uplink {
    pub fn new(rate_bps: f64, capacity_bytes: u64) -> Self {
        Uplink { rate_bps, capacity: capacity_bytes, free_at: 0.0 }
    }

    /// Returns the time the last bit leaves, or `None` when the queue is full.
    pub fn send(&mut self, now: u64, bytes: u32) -> Option<f64> {
        let now = now as f64;
        let backlog_bytes = ((self.free_at - now).max(0.0) * self.rate_bps / 8e9) as u64;
        if backlog_bytes + u64::from(bytes) > self.capacity {
            return None;
        }
        self.free_at = self.free_at.max(now) + f64::from(bytes) * 8.0 * 1e9 / self.rate_bps;
        Some(self.free_at)
    }
}
