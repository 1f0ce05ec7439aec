//! Build a cluster from a [`BenchConfig`], load it, drive it and check the
//! resulting history.

use std::rc::Rc;

use disagg_txn::cluster::{Cluster, ClusterConfig};
use disagg_txn::driver::{run_workload, DriverConfig};
use disagg_txn::sim::SimTime;
use disagg_txn::txn::LockPlacement;

use crate::checker::{check_balance, check_history, CheckOptions, Verdict};
use crate::config::{BenchConfig, ConfigError, Mode, WorkloadKind};
use crate::history_io::{self, HistoryFile};
use crate::metrics::{CheckerSummary, RunMetrics};
use crate::workload::{Kvs, SmallBank, Workload};

/// Longest wait for crashed nodes to finish recovery after the clients stop.
const RECOVERY_SETTLE: SimTime = SimTime::from_ms(500);
/// Quiet time after the run so fire-and-forget unlocks land.
const DRAIN: SimTime = SimTime::from_ms(1);

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub history: HistoryFile,
    pub verdict: Verdict,
}

impl RunOutput {
    /// True when the checker and, for SmallBank, the balance audit are clean.
    pub fn passed(&self) -> bool {
        self.verdict.passed()
    }
}

pub fn cluster_config(cfg: &BenchConfig) -> ClusterConfig {
    ClusterConfig {
        cns: cfg.cns,
        mns: cfg.mns,
        replication: (cfg.mns as usize).min(3),
        coordinators: cfg.coordinators,
        placement: match cfg.mode {
            Mode::Lotus => LockPlacement::Disaggregated,
            Mode::MnLock => LockPlacement::MemoryNode,
        },
        isolation: cfg.isolation,
        cache_entries: cfg.cache_entries,
        reshard: cfg.reshard,
        seed: cfg.seed,
        ..Default::default()
    }
}

enum AnyWorkload {
    Kvs(Kvs),
    SmallBank(SmallBank),
}

impl AnyWorkload {
    fn get(&self) -> &dyn Workload {
        match self {
            AnyWorkload::Kvs(w) => w,
            AnyWorkload::SmallBank(w) => w,
        }
    }
}

fn build(cfg: &BenchConfig) -> Result<(Rc<Cluster>, AnyWorkload), ConfigError> {
    cfg.validate()?;
    let w = match cfg.workload {
        WorkloadKind::Kvs => AnyWorkload::Kvs(Kvs {
            keys: cfg.default_keys(),
            rw_ratio: cfg.default_rw_ratio(),
            zipf: cfg.zipf,
        }),
        WorkloadKind::SmallBank => AnyWorkload::SmallBank(SmallBank {
            accounts: cfg.default_keys(),
            rw_ratio: cfg.default_rw_ratio(),
            zipf: cfg.zipf,
        }),
    };
    let cluster = Cluster::new(cluster_config(cfg), w.get().tables(cfg.versions))
        .map_err(|e| ConfigError::new("cluster", e.to_string()))?;
    w.get().load(&cluster);
    Ok((cluster, w))
}

/// Run one benchmark end to end. The cluster is shut down before returning.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<RunOutput, ConfigError> {
    let (cluster, w) = build(cfg)?;
    for c in &cfg.crashes {
        cluster.schedule_crash(c.cn, cluster.now() + SimTime::from_ms(c.at_ms));
    }
    let driver = DriverConfig {
        clients: cfg.client_count(),
        txns: cfg.txns,
        duration: cfg.duration_ms.map(SimTime::from_ms),
        ..Default::default()
    };
    let started = cluster.now();
    let stats = run_workload(&cluster, w.get().source(cfg.seed), &driver);
    let elapsed = cluster.now().saturating_sub(started);

    cluster.settle(DRAIN);
    let deadline = cluster.now() + RECOVERY_SETTLE;
    while cluster.stats.borrow().recoveries.len() < cluster.stats.borrow().crashes.len() && cluster.now() < deadline {
        cluster.settle(SimTime::from_ms(1));
    }

    let history = HistoryFile {
        load_ts: cluster.load_ts(),
        records: cluster.history.borrow().records().to_vec(),
    };
    let mut verdict = check_history(
        &history,
        CheckOptions {
            isolation: cfg.isolation,
            conservation: cfg.workload == WorkloadKind::SmallBank,
        },
    )
    .map_err(|e| ConfigError::new("history", e.to_string()))?;

    let mut metrics = RunMetrics::collect(&cluster, &stats, elapsed);
    metrics.workload = crate::workload_name(cfg.workload).to_string();
    metrics.mode = crate::mode_name(cfg.mode).to_string();
    if let AnyWorkload::SmallBank(sb) = &w {
        // a missing account counts as zero so the audit still fails loudly
        let total = sb.audit_total(&cluster).unwrap_or(0);
        let committed_delta: i64 = history.records.iter().filter(|r| r.committed()).map(|r| r.app_delta).sum();
        metrics.balance_drift = Some(total - sb.initial_total() - committed_delta);
        verdict.violations.extend(check_balance(&history, sb.initial_total(), total));
    }
    metrics.checker = Some(CheckerSummary::from_verdict(&verdict));

    if let Some(path) = &cfg.history {
        std::fs::write(path, history_io::encode(&history)).map_err(|e| ConfigError::new("history", e.to_string()))?;
    }
    cluster.shutdown();
    Ok(RunOutput {
        metrics,
        history,
        verdict,
    })
}

/// The same run with every lock held in a word next to its CVT and taken
/// with remote CAS.
pub fn run_baseline_mn_lock(cfg: &BenchConfig) -> Result<RunOutput, ConfigError> {
    let mut c = cfg.clone();
    c.mode = Mode::MnLock;
    run_benchmark(&c)
}

/// FNV digest of the committed values of `keys`, in order.
pub fn state_checksum(cluster: &Cluster, keys: &[(u16, u64)]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &(t, k) in keys {
        if let Some((_, bytes)) = cluster.peek_committed(t, k) {
            for b in bytes.iter().chain(k.to_le_bytes().iter()) {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Like [`run_benchmark`] but hands back the live cluster for inspection.
/// Crashes in the config are ignored. The caller must call `shutdown`.
pub fn run_and_keep(cfg: &BenchConfig) -> Result<(Rc<Cluster>, RunMetrics), ConfigError> {
    let (cluster, w) = build(cfg)?;
    let driver = DriverConfig {
        clients: cfg.client_count(),
        txns: cfg.txns,
        duration: cfg.duration_ms.map(SimTime::from_ms),
        ..Default::default()
    };
    let started = cluster.now();
    let stats = run_workload(&cluster, w.get().source(cfg.seed), &driver);
    let elapsed = cluster.now().saturating_sub(started);
    cluster.settle(DRAIN);
    let mut m = RunMetrics::collect(&cluster, &stats, elapsed);
    m.workload = crate::workload_name(cfg.workload).to_string();
    m.mode = crate::mode_name(cfg.mode).to_string();
    Ok((cluster, m))
}
