//! Run metrics and their export formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use disagg_txn::balance::ReshardOutcome;
use disagg_txn::cluster::{Cluster, Stats};
use disagg_txn::sim::SimTime;
use serde::Serialize;

use crate::checker::Verdict;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NicMetrics {
    pub node: String,
    pub reads: u64,
    pub writes: u64,
    pub atomics: u64,
    pub rpcs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReshardMetrics {
    pub shard: u16,
    pub from: u16,
    pub to: u16,
    pub started_ms: f64,
    /// How long the shard was unavailable.
    pub interruption_ms: f64,
    pub aborted_holders: u64,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    pub cn: u16,
    pub crashed_ms: f64,
    pub detected_ms: f64,
    pub ready_ms: f64,
    pub rolled_forward: u64,
    pub aborted: u64,
    pub released_locks: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CheckerSummary {
    pub isolation: String,
    pub passed: bool,
    pub committed: usize,
    pub violations: usize,
    /// The first few violations, for diagnostics.
    pub examples: Vec<String>,
}

impl CheckerSummary {
    pub fn from_verdict(v: &Verdict) -> Self {
        CheckerSummary {
            isolation: crate::isolation_name(v.isolation).to_string(),
            passed: v.passed(),
            committed: v.committed,
            violations: v.violations.len(),
            examples: v.violations.iter().take(5).map(|x| format!("{x:?}")).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub workload: String,
    pub mode: String,
    pub isolation: String,
    pub seed: u64,
    /// Simulated length of the measured run.
    pub elapsed_ms: f64,
    pub attempted: u64,
    pub committed: u64,
    pub aborted: u64,
    /// Committed transactions per simulated second.
    pub throughput: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub aborts: BTreeMap<String, u64>,
    pub nics: Vec<NicMetrics>,
    pub mn_atomics: u64,
    pub vt_hits: u64,
    pub vt_misses: u64,
    pub vt_hit_rate: f64,
    pub vt_stale_hits: u64,
    pub lock_rpcs: u64,
    pub single_shard_rw: u64,
    pub single_shard_rw_local: u64,
    pub mn_lock_attempts: u64,
    pub mn_lock_acquired: u64,
    pub mn_lock_releases: u64,
    pub reshards: Vec<ReshardMetrics>,
    pub recoveries: Vec<RecoveryMetrics>,
    /// Commits per simulated millisecond.
    pub timeline: Vec<u64>,
    pub checker: Option<CheckerSummary>,
    /// Audited minus expected total balance (SmallBank only).
    pub balance_drift: Option<i64>,
}

fn ms(t: SimTime) -> f64 {
    t.as_ps() as f64 / 1e9
}

/// Nearest-rank percentile.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl RunMetrics {
    pub fn collect(cluster: &Cluster, stats: &Stats, elapsed: SimTime) -> Self {
        let mut lat = stats.latencies_ns.clone();
        lat.sort_unstable();
        let nics: Vec<NicMetrics> = cluster
            .fabric
            .nics()
            .into_iter()
            .map(|(id, n)| NicMetrics {
                node: id.to_string(),
                reads: n.reads,
                writes: n.writes,
                atomics: n.atomics,
                rpcs: n.rpcs,
            })
            .collect();
        let mn_atomics = cluster
            .fabric
            .nics()
            .iter()
            .filter(|(id, _)| id.is_memory())
            .map(|(_, n)| n.atomics)
            .sum();
        let vt_misses: u64 = cluster.nodes.iter().map(|n| n.vt.misses()).sum();
        let lookups = stats.vt_hits + vt_misses;
        let secs = elapsed.as_ps() as f64 / 1e12;
        RunMetrics {
            workload: String::new(),
            mode: String::new(),
            isolation: crate::isolation_name(cluster.config.isolation).to_string(),
            seed: cluster.config.seed,
            elapsed_ms: ms(elapsed),
            attempted: stats.attempted,
            committed: stats.committed,
            aborted: stats.aborted(),
            throughput: if secs > 0.0 { stats.committed as f64 / secs } else { 0.0 },
            p50_us: percentile(&lat, 50.0) as f64 / 1e3,
            p99_us: percentile(&lat, 99.0) as f64 / 1e3,
            aborts: stats.aborts.iter().map(|(r, n)| (r.name().to_string(), *n)).collect(),
            nics,
            mn_atomics,
            vt_hits: stats.vt_hits,
            vt_misses,
            vt_hit_rate: if lookups > 0 { stats.vt_hits as f64 / lookups as f64 } else { 0.0 },
            vt_stale_hits: stats.vt_stale_hits,
            lock_rpcs: stats.lock_rpcs,
            single_shard_rw: stats.single_shard_rw,
            single_shard_rw_local: stats.single_shard_rw_local,
            mn_lock_attempts: stats.mn_lock_attempts,
            mn_lock_acquired: stats.mn_lock_acquired,
            mn_lock_releases: stats.mn_lock_releases,
            reshards: stats
                .reshards
                .iter()
                .map(|e| ReshardMetrics {
                    shard: e.shard,
                    from: e.from,
                    to: e.to,
                    started_ms: ms(e.started),
                    interruption_ms: ms(e.finished.saturating_sub(e.started)),
                    aborted_holders: e.aborted_holders,
                    completed: e.outcome == ReshardOutcome::Ok,
                })
                .collect(),
            recoveries: stats
                .recoveries
                .iter()
                .map(|e| RecoveryMetrics {
                    cn: e.cn,
                    crashed_ms: ms(e.crashed_at),
                    detected_ms: ms(e.detected_at),
                    ready_ms: ms(e.ready_at),
                    rolled_forward: e.continued,
                    aborted: e.aborted,
                    released_locks: e.released_locks,
                })
                .collect(),
            timeline: stats.timeline.clone(),
            checker: None,
            balance_drift: None,
        }
    }

    /// Share of single-shard read-write transactions that sent no lock RPC.
    pub fn locality(&self) -> f64 {
        if self.single_shard_rw == 0 {
            return 1.0;
        }
        self.single_shard_rw_local as f64 / self.single_shard_rw as f64
    }

    /// One JSON object per line: the summary, then one line per NIC,
    /// reshard and recovery.
    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            record: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(serde_json::to_string(&Tagged { record: "run", body: self }).expect("serialize"));
        for n in &self.nics {
            line(serde_json::to_string(&Tagged { record: "nic", body: n }).expect("serialize"));
        }
        for r in &self.reshards {
            line(serde_json::to_string(&Tagged { record: "reshard", body: r }).expect("serialize"));
        }
        for r in &self.recoveries {
            line(serde_json::to_string(&Tagged { record: "recovery", body: r }).expect("serialize"));
        }
        out
    }

    fn scalar_rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("workload".into(), self.workload.clone()),
            ("mode".into(), self.mode.clone()),
            ("isolation".into(), self.isolation.clone()),
            ("seed".into(), self.seed.to_string()),
            ("elapsed_ms".into(), format!("{:.3}", self.elapsed_ms)),
            ("attempted".into(), self.attempted.to_string()),
            ("committed".into(), self.committed.to_string()),
            ("aborted".into(), self.aborted.to_string()),
            ("throughput".into(), format!("{:.1}", self.throughput)),
            ("p50_us".into(), format!("{:.2}", self.p50_us)),
            ("p99_us".into(), format!("{:.2}", self.p99_us)),
        ];
        for (r, n) in &self.aborts {
            rows.push((format!("abort.{r}"), n.to_string()));
        }
        for n in &self.nics {
            rows.push((format!("{}.reads", n.node), n.reads.to_string()));
            rows.push((format!("{}.writes", n.node), n.writes.to_string()));
            rows.push((format!("{}.atomics", n.node), n.atomics.to_string()));
            rows.push((format!("{}.rpcs", n.node), n.rpcs.to_string()));
        }
        rows.extend([
            ("mn_atomics".into(), self.mn_atomics.to_string()),
            ("vt_hit_rate".into(), format!("{:.4}", self.vt_hit_rate)),
            ("vt_stale_hits".into(), self.vt_stale_hits.to_string()),
            ("lock_rpcs".into(), self.lock_rpcs.to_string()),
            ("locality".into(), format!("{:.4}", self.locality())),
            ("mn_lock_attempts".into(), self.mn_lock_attempts.to_string()),
            ("mn_lock_releases".into(), self.mn_lock_releases.to_string()),
            ("reshards".into(), self.reshards.len().to_string()),
            ("recoveries".into(), self.recoveries.len().to_string()),
        ]);
        if let Some(c) = &self.checker {
            rows.push(("checker".into(), if c.passed { "pass".into() } else { format!("{} violations", c.violations) }));
        }
        if let Some(d) = self.balance_drift {
            rows.push(("balance_drift".into(), d.to_string()));
        }
        rows
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.scalar_rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let rows = self.scalar_rows();
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        for r in &self.reshards {
            let _ = writeln!(
                out,
                "reshard shard {} cn{} -> cn{} at {:.3} ms, unavailable {:.3} ms{}",
                r.shard,
                r.from,
                r.to,
                r.started_ms,
                r.interruption_ms,
                if r.completed { "" } else { " (rolled back)" }
            );
        }
        for r in &self.recoveries {
            let _ = writeln!(
                out,
                "recovery cn{}: crashed {:.3} ms, detected {:.3} ms, ready {:.3} ms",
                r.cn, r.crashed_ms, r.detected_ms, r.ready_ms
            );
        }
        out
    }
}
