//! Event queue, per-pair link delays and pipelined uplinks.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::overlay::PeerId;

/// Times closer than this are the same instant for calibration purposes.
pub const EVENT_QUANTUM: f64 = 1e-6;

/// Pseudo peer id of the streaming server.
pub const SERVER: PeerId = PeerId(u32::MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Departure,
    ChunkEmit,
    TransferComplete,
    ControlMsg,
    PullRequest,
    BuffermapExchange,
}

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue ordered by (time, kind, insertion sequence).
#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    seq: u64,
    now: f64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn push(&mut self, time: f64, kind: EventKind, payload: P) {
        debug_assert!(time >= self.now - EVENT_QUANTUM, "event scheduled in the past");
        self.heap.push(SimEvent {
            time,
            kind,
            seq: self.seq,
            payload,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some(e)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Symmetric per-pair delays drawn uniformly from `[lo, hi]`, reproducible from the seed.
#[derive(Debug, Clone)]
pub struct LinkDelays {
    seed: u64,
    lo: f64,
    hi: f64,
    cache: HashMap<(PeerId, PeerId), f64>,
}

impl LinkDelays {
    pub fn new(seed: u64, range: [f64; 2]) -> Self {
        LinkDelays {
            seed,
            lo: range[0],
            hi: range[1],
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, a: PeerId, b: PeerId) -> f64 {
        if self.hi <= self.lo {
            return self.lo;
        }
        let key = if a <= b { (a, b) } else { (b, a) };
        let (seed, lo, hi) = (self.seed, self.lo, self.hi);
        *self.cache.entry(key).or_insert_with(|| {
            let mix = seed ^ ((key.0 .0 as u64) << 32 | key.1 .0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ChaCha8Rng::seed_from_u64(mix).random_range(lo..=hi)
        })
    }
}

/// One origin's uplink. Back-to-back sends are pipelined: transmission is
/// serialized, propagation overlaps with the next send.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Uplink {
    pub busy_until: f64,
}

impl Uplink {
    /// Queues a send that may start at `ready`; returns `(start, arrival at the receiver)`.
    pub fn send(&mut self, ready: f64, tx: f64, delay: f64) -> (f64, f64) {
        let start = ready.max(self.busy_until);
        self.busy_until = start + tx;
        (start, start + tx + delay)
    }

    pub fn idle_at(&self, time: f64) -> bool {
        self.busy_until <= time + EVENT_QUANTUM
    }
}

/// Completion times at the receivers of `count` back-to-back sends dispatched at `dispatch`.
pub fn transfer_time(uplink: &mut Uplink, dispatch: f64, count: usize, tx: f64, delay: f64) -> Vec<f64> {
    (0..count).map(|_| uplink.send(dispatch, tx, delay).1).collect()
}
