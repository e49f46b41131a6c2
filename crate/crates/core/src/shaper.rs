//! Rate enforcement for the simulator.
//!
//! [`TokenBucket`] limits one flow to its assigned rate. [`LinkFifo`] is the
//! unshaped bottleneck: a single drop-free FIFO of packets drained at link
//! capacity.

use std::collections::VecDeque;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default FIFO packet size, kbit (a 1500-byte packet).
pub const DEFAULT_QUANTUM_KBIT: f64 = 12.0;
/// Default bucket depth, in seconds of the assigned rate.
pub const DEFAULT_BURST_S: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShaperError {
    #[error("clock went backwards: {now} < {last}")]
    TimeWentBackwards { now: f64, last: f64 },
    #[error("{field} must be finite and >= 0, got {value}")]
    Invalid { field: &'static str, value: f64 },
    #[error("tick must be finite and > 0, got {0}")]
    BadTick(f64),
}

fn non_negative(field: &'static str, value: f64) -> Result<f64, ShaperError> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ShaperError::Invalid { field, value })
    }
}

/// A token bucket measured in kbit.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    /// `Some(s)` when the depth follows the rate (`burst = rate * s`).
    burst_s: Option<f64>,
    tokens: f64,
    last_update: f64,
}

impl TokenBucket {
    /// A bucket with an explicit depth, starting empty at time `now`.
    pub fn new(rate: f64, burst: f64, now: f64) -> Result<Self, ShaperError> {
        Ok(Self {
            rate: non_negative("rate", rate)?,
            burst: non_negative("burst", burst)?,
            burst_s: None,
            tokens: 0.0,
            last_update: now,
        })
    }

    /// A bucket `burst_s` seconds deep at whatever rate it is given.
    pub fn with_burst_seconds(rate: f64, burst_s: f64, now: f64) -> Result<Self, ShaperError> {
        let mut b = Self::new(rate, 0.0, now)?;
        b.burst_s = Some(non_negative("burst_s", burst_s)?);
        b.burst = rate * burst_s;
        Ok(b)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn burst(&self) -> f64 {
        self.burst
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    fn refill(&mut self, now: f64) -> Result<(), ShaperError> {
        if now < self.last_update {
            return Err(ShaperError::TimeWentBackwards {
                now,
                last: self.last_update,
            });
        }
        self.tokens = (self.tokens + self.rate * (now - self.last_update)).min(self.burst);
        self.last_update = now;
        Ok(())
    }

    /// Refills up to `now` and takes as much of `requested` as the bucket holds.
    pub fn admit(&mut self, now: f64, requested: f64) -> Result<f64, ShaperError> {
        let requested = non_negative("requested", requested)?;
        self.refill(now)?;
        let granted = requested.min(self.tokens);
        self.tokens -= granted;
        Ok(granted)
    }

    /// Changes the rate at `now`. Tokens earned so far are kept, clipped to
    /// the new depth.
    pub fn set_rate(&mut self, now: f64, rate: f64) -> Result<(), ShaperError> {
        let rate = non_negative("rate", rate)?;
        self.refill(now)?;
        self.rate = rate;
        if let Some(s) = self.burst_s {
            self.burst = rate * s;
        }
        self.tokens = self.tokens.min(self.burst);
        Ok(())
    }
}

/// Shared bottleneck: one FIFO of packets served at `capacity` kbps.
///
/// Each tick's arrivals are cut into packets and interleaved round-robin
/// across flows (the starting flow is drawn from a seeded RNG), appended to
/// the queue, and the head of the queue is served. Unserved packets wait for
/// later ticks.
#[derive(Debug, Clone)]
pub struct LinkFifo {
    capacity: f64,
    quantum: f64,
    queue: VecDeque<(usize, f64)>,
    backlog: Vec<f64>,
    rng: ChaCha8Rng,
}

impl LinkFifo {
    pub fn new(capacity: f64, flows: usize, seed: u64) -> Result<Self, ShaperError> {
        Self::with_quantum(capacity, flows, DEFAULT_QUANTUM_KBIT, seed)
    }

    pub fn with_quantum(
        capacity: f64,
        flows: usize,
        quantum: f64,
        seed: u64,
    ) -> Result<Self, ShaperError> {
        non_negative("capacity", capacity)?;
        if !(quantum > 0.0 && quantum.is_finite()) {
            return Err(ShaperError::Invalid {
                field: "quantum",
                value: quantum,
            });
        }
        Ok(Self {
            capacity,
            quantum,
            queue: VecDeque::new(),
            backlog: vec![0.0; flows],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// Kbit of `flow` queued but not yet served.
    pub fn backlog(&self, flow: usize) -> f64 {
        self.backlog[flow]
    }

    /// Enqueues `demands[flow]` kbit per flow, then serves one tick.
    /// Returns kbit delivered per flow.
    pub fn serve(&mut self, demands: &[f64], tick: f64) -> Result<Vec<f64>, ShaperError> {
        if !(tick > 0.0 && tick.is_finite()) {
            return Err(ShaperError::BadTick(tick));
        }
        assert_eq!(demands.len(), self.backlog.len(), "one demand per flow");
        for (i, &d) in demands.iter().enumerate() {
            non_negative("demand", d)?;
            self.backlog[i] += d;
        }
        self.enqueue(demands);

        let mut grants = vec![0.0; demands.len()];
        let mut budget = self.capacity * tick;
        while budget > 0.0 {
            let Some(head) = self.queue.front_mut() else {
                break;
            };
            let take = head.1.min(budget);
            let flow = head.0;
            head.1 -= take;
            if head.1 <= 0.0 {
                self.queue.pop_front();
            }
            grants[flow] += take;
            budget -= take;
        }
        for (b, g) in self.backlog.iter_mut().zip(&grants) {
            *b = (*b - g).max(0.0);
        }
        Ok(grants)
    }

    fn enqueue(&mut self, demands: &[f64]) {
        let n = demands.len();
        if n == 0 {
            return;
        }
        let mut left = demands.to_vec();
        let mut flow = self.rng.random_range(0..n);
        let mut idle = 0;
        while idle < n {
            if left[flow] > 0.0 {
                let pkt = left[flow].min(self.quantum);
                left[flow] -= pkt;
                self.queue.push_back((flow, pkt));
                idle = 0;
            } else {
                idle += 1;
            }
            flow = (flow + 1) % n;
        }
    }
}
