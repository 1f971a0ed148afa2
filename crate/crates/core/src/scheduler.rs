//! Logical-tick executors for a [`Bus`].
//!
//! Within a tick every deliverable envelope is handed to its inbox, picking
//! the next mailbox with a seeded RNG; then each live adapter gets its tick
//! callback (also in seeded order) and the clock advances by one. With the
//! default latency of one tick nothing published during a tick is delivered
//! in that same tick.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bus::Bus;

pub struct Scheduler {
    bus: Arc<Bus>,
    rng: ChaCha8Rng,
    delivered: u64,
}

impl Scheduler {
    pub fn new(bus: Arc<Bus>, seed: u64) -> Self {
        Scheduler { bus, rng: ChaCha8Rng::seed_from_u64(seed), delivered: 0 }
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    pub fn now(&self) -> u64 {
        self.bus.now()
    }

    /// Total envelopes handed to inboxes so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Delivers every envelope that is ready at the current tick.
    pub fn deliver_ready(&mut self) -> usize {
        let mut n = 0;
        loop {
            let ready = self.bus.ready_mailboxes();
            if ready.is_empty() {
                break;
            }
            let token = ready[self.rng.gen_range(0..ready.len())];
            if let Some((inbox, envelope)) = self.bus.take_ready(token) {
                inbox.deliver(envelope);
                n += 1;
            }
        }
        self.delivered += n as u64;
        n
    }

    /// One full tick: deliveries, adapter ticks, clock advance.
    pub fn tick(&mut self) -> usize {
        let n = self.deliver_ready();
        let mut targets = self.bus.tick_targets();
        targets.shuffle(&mut self.rng);
        let now = self.bus.now();
        for (_, inbox) in targets {
            inbox.tick(now);
        }
        self.bus.advance_clock();
        n
    }

    /// Runs ticks until `done` holds (checked before each tick) or
    /// `max_ticks` elapse. Returns whether `done` was reached.
    pub fn run_until(&mut self, max_ticks: u64, mut done: impl FnMut() -> bool) -> bool {
        for _ in 0..max_ticks {
            if done() {
                return true;
            }
            self.tick();
        }
        done()
    }

    /// Runs until no envelope is queued anywhere.
    pub fn run_until_idle(&mut self, max_ticks: u64) -> bool {
        let bus = self.bus.clone();
        self.run_until(max_ticks, || bus.queued_count() == 0)
    }
}

/// Stress-mode tick: each ready mailbox is drained on its own thread and
/// adapter ticks run concurrently. Not deterministic; use only to exercise
/// actor boundaries.
pub fn tick_concurrent(bus: &Bus) {
    let ready = bus.ready_mailboxes();
    std::thread::scope(|s| {
        for token in ready {
            s.spawn(move || {
                while let Some((inbox, envelope)) = bus.take_ready(token) {
                    inbox.deliver(envelope);
                }
            });
        }
    });
    let now = bus.now();
    let targets = bus.tick_targets();
    std::thread::scope(|s| {
        for (_, inbox) in &targets {
            s.spawn(move || inbox.tick(now));
        }
    });
    bus.advance_clock();
}
