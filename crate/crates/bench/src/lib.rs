//! Benchmark harness: workloads, run configuration, metrics, history files
//! and the offline isolation checker.

pub mod checker;
pub mod config;
pub mod history_io;
pub mod metrics;
pub mod runner;
pub mod workload;

use disagg_txn::txn::Isolation;

use config::{Mode, WorkloadKind};

pub fn isolation_name(i: Isolation) -> &'static str {
    match i {
        Isolation::Serializable => "sr",
        Isolation::SnapshotIsolation => "si",
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Lotus => "lotus",
        Mode::MnLock => "mn-lock",
    }
}

pub fn workload_name(w: WorkloadKind) -> &'static str {
    match w {
        WorkloadKind::Kvs => "kvs",
        WorkloadKind::SmallBank => "smallbank",
    }
}
