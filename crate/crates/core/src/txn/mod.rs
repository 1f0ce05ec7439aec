//! Transactions: context and API, timestamp service, commit log, history,
//! and the coordinator that runs the lock-first protocol.

mod context;
mod coordinator;
pub mod history;
pub mod log;

use std::cell::Cell;
use std::fmt;

use crate::memstore::INVISIBLE;
use crate::sim::{Sim, SimTime};

pub use context::{Access, Entry, TxnContext, TxnSpec, TxnStatus, UsageError, WriteIntent, Writes, LockAttempt, TxnLogic};
pub use coordinator::{CrashStep, Coordinator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Isolation {
    Serializable,
    SnapshotIsolation,
}

/// Where locks live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LockPlacement {
    /// Lock tables on compute nodes.
    Disaggregated,
    /// A lock word in each CVT header, taken with remote CAS.
    MemoryNode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbortReason {
    LockConflict,
    LockTableFull,
    LockOverflow,
    FutureVersion,
    KeyNotFound,
    DuplicateKey,
    VersionGarbageCollected,
    BucketFull,
    StaleShard,
    InconsistentRead,
    NodeFailure,
    Resharding,
    Crashed,
    LogFull,
    OutOfMemory,
}

impl AbortReason {
    pub const ALL: [AbortReason; 15] = [
        AbortReason::LockConflict,
        AbortReason::LockTableFull,
        AbortReason::LockOverflow,
        AbortReason::FutureVersion,
        AbortReason::KeyNotFound,
        AbortReason::DuplicateKey,
        AbortReason::VersionGarbageCollected,
        AbortReason::BucketFull,
        AbortReason::StaleShard,
        AbortReason::InconsistentRead,
        AbortReason::NodeFailure,
        AbortReason::Resharding,
        AbortReason::Crashed,
        AbortReason::LogFull,
        AbortReason::OutOfMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AbortReason::LockConflict => "lock_conflict",
            AbortReason::LockTableFull => "lock_table_full",
            AbortReason::LockOverflow => "lock_overflow",
            AbortReason::FutureVersion => "future_version",
            AbortReason::KeyNotFound => "key_not_found",
            AbortReason::DuplicateKey => "duplicate_key",
            AbortReason::VersionGarbageCollected => "version_gc",
            AbortReason::BucketFull => "bucket_full",
            AbortReason::StaleShard => "stale_shard",
            AbortReason::InconsistentRead => "inconsistent_read",
            AbortReason::NodeFailure => "node_failure",
            AbortReason::Resharding => "resharding",
            AbortReason::Crashed => "crashed",
            AbortReason::LogFull => "log_full",
            AbortReason::OutOfMemory => "out_of_memory",
        }
    }

    pub fn code(self) -> u8 {
        AbortReason::ALL.iter().position(|r| *r == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        AbortReason::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One logical counter with the physical clock in the high bits:
/// `ts = max(last + 1, now_ns << 16)`.
pub struct TimestampService {
    sim: Sim,
    last: Cell<u64>,
    issued: Cell<u64>,
    /// Round trip to the service.
    pub latency: SimTime,
}

impl TimestampService {
    pub fn new(sim: Sim, latency: SimTime) -> Self {
        TimestampService {
            sim,
            last: Cell::new(0),
            issued: Cell::new(0),
            latency,
        }
    }

    /// Issue a timestamp immediately (no simulated delay).
    pub fn next_now(&self) -> u64 {
        let phys = self.sim.now().as_ns() << 16;
        let ts = phys.max(self.last.get() + 1);
        assert!(ts != INVISIBLE, "timestamp space exhausted");
        self.last.set(ts);
        self.issued.set(self.issued.get() + 1);
        ts
    }

    /// Fetch a timestamp across the network: half a round trip each way.
    pub async fn next_timestamp(&self) -> u64 {
        let half = SimTime::from_ps(self.latency.as_ps() / 2);
        self.sim.sleep(half).await;
        let ts = self.next_now();
        self.sim.sleep(half).await;
        ts
    }

    pub fn issued(&self) -> u64 {
        self.issued.get()
    }

    pub fn last(&self) -> u64 {
        self.last.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::join_all;
    use std::collections::HashSet;
    use std::rc::Rc;

    #[test]
    fn consecutive_timestamps_increase() {
        let sim = Sim::new();
        let ts = TimestampService::new(sim.clone(), SimTime::from_us(2));
        let a = ts.next_now();
        let b = ts.next_now();
        assert!(a < b);
        assert_ne!(b, INVISIBLE);
    }

    #[test]
    fn physical_component_tracks_clock() {
        let sim = Sim::new();
        let ts = Rc::new(TimestampService::new(sim.clone(), SimTime::from_us(2)));
        let t2 = ts.clone();
        let got = sim.block_on(async move { t2.next_timestamp().await });
        assert_eq!(got >> 16, 1_000);
        assert_eq!(sim.now(), SimTime::from_us(2));
    }

    #[test]
    fn million_timestamps_across_coordinators_are_distinct() {
        let sim = Sim::new();
        let ts = Rc::new(TimestampService::new(sim.clone(), SimTime::from_ns(100)));
        let s = sim.clone();
        let t2 = ts.clone();
        let all = sim.block_on(async move {
            let futs: Vec<_> = (0..100)
                .map(|_| {
                    let (ts, s) = (t2.clone(), s.clone());
                    async move {
                        let mut v = Vec::with_capacity(10_000);
                        for i in 0..10_000u64 {
                            if i % 1000 == 0 {
                                s.sleep(SimTime::from_ns(i % 7)).await;
                            }
                            v.push(ts.next_now());
                        }
                        v
                    }
                })
                .collect();
            join_all(futs).await
        });
        let mut seen = HashSet::new();
        for v in all {
            for t in v {
                assert!(seen.insert(t));
            }
        }
        assert_eq!(seen.len(), 1_000_000);
    }

    #[test]
    fn abort_codes_round_trip() {
        for r in AbortReason::ALL {
            assert_eq!(AbortReason::from_code(r.code()), Some(r));
        }
    }
}
