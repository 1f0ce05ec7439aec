//! Offline history checker.
//!
//! Serializability: the dependency graph over committed transactions
//! (write-write by version order, write-read by the version read, read-write
//! from a read to the next version of the same key) must be acyclic.
//!
//! Snapshot isolation: concurrent writers of one key must not both commit,
//! and a read must return the newest version below the reader's start
//! timestamp among those already visible when the reader started.
//!
//! Both check that every version read was written by a committed
//! transaction (or is the initial load).

use std::collections::{BTreeMap, HashMap};

use disagg_txn::txn::history::{HistoryRecord, OpKind};
use disagg_txn::txn::Isolation;
use disagg_txn::memstore::INVISIBLE;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::history_io::{HistoryFile, MalformedHistory};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Transactions on a dependency cycle.
    Cycle { txns: Vec<u64> },
    /// Read a version no committed transaction wrote.
    DirtyRead { txn: u64, table: u16, key: u64, version: u64 },
    /// Read a version at or above the reader's start timestamp.
    FutureRead { txn: u64, table: u16, key: u64, version: u64 },
    /// Two overlapping writers of one key both committed.
    LostUpdate { table: u16, key: u64, first: u64, second: u64 },
    /// A newer version below the start timestamp was visible but not read.
    StaleRead { txn: u64, table: u16, key: u64, read: u64, missed: u64 },
    /// A writer did not read the version it replaced.
    BrokenChain { txn: u64, table: u16, key: u64, read: Option<u64>, previous: u64 },
    /// A transaction's writes do not add up to its declared net change.
    Conservation { txn: u64, declared: i64, actual: i64 },
    /// Total balance differs from the initial total plus declared changes.
    Balance { expected: i64, actual: i64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckOptions {
    pub isolation: Isolation,
    /// Check per-transaction value conservation and version chains.
    pub conservation: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub isolation: Isolation,
    pub committed: usize,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

type Key = (u16, u64);

struct Write {
    version: u64,
    txn: usize,
    value: i64,
}

fn malformed(r: &HistoryRecord, msg: impl Into<String>) -> MalformedHistory {
    MalformedHistory::Record {
        seq: r.seq,
        msg: msg.into(),
    }
}

pub fn check_history(h: &HistoryFile, opts: CheckOptions) -> Result<Verdict, MalformedHistory> {
    let mut last_seq = None;
    for r in &h.records {
        if last_seq.is_some_and(|s| r.seq <= s) {
            return Err(malformed(r, "sequence numbers must increase"));
        }
        last_seq = Some(r.seq);
    }
    let committed: Vec<&HistoryRecord> = h.records.iter().filter(|r| r.committed()).collect();
    let mut seen = HashMap::new();
    for r in &committed {
        if seen.insert(r.txn_id, r.seq).is_some() {
            return Err(malformed(r, format!("txn {} committed twice", r.txn_id)));
        }
    }

    // version chains per key
    let mut chains: BTreeMap<Key, Vec<Write>> = BTreeMap::new();
    for (i, r) in committed.iter().enumerate() {
        let writes: Vec<_> = r.ops.iter().filter(|o| matches!(o.kind, OpKind::Write { .. })).collect();
        if writes.is_empty() {
            continue;
        }
        let tc = r.commit_ts.ok_or_else(|| malformed(r, "committed writer without commit timestamp"))?;
        if tc <= r.start_ts {
            return Err(malformed(r, "commit timestamp not after start timestamp"));
        }
        for o in writes {
            let OpKind::Write { version, .. } = o.kind else { unreachable!() };
            if version == INVISIBLE || version != tc {
                return Err(malformed(r, format!("write version {version} differs from commit timestamp {tc}")));
            }
            chains.entry((o.table, o.key)).or_default().push(Write {
                version,
                txn: i,
                value: o.value,
            });
        }
    }
    for (k, c) in chains.iter_mut() {
        c.sort_by_key(|w| w.version);
        if c.windows(2).any(|w| w[0].version == w[1].version) {
            return Err(MalformedHistory::Record {
                seq: 0,
                msg: format!("two committed writes of t{}:{:#x} share a version", k.0, k.1),
            });
        }
        if c.first().is_some_and(|w| w.version <= h.load_ts) {
            return Err(MalformedHistory::Record {
                seq: 0,
                msg: format!("t{}:{:#x} written at or before the load version", k.0, k.1),
            });
        }
    }
    // position of a version in its chain; 0 is the initial load
    let pos = |k: &Key, v: u64| -> Option<usize> {
        if v == h.load_ts {
            return Some(0);
        }
        chains.get(k)?.binary_search_by_key(&v, |w| w.version).ok().map(|i| i + 1)
    };

    let mut violations = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, r) in committed.iter().enumerate() {
        for o in &r.ops {
            let OpKind::Read { version } = o.kind else { continue };
            let k = (o.table, o.key);
            let Some(p) = pos(&k, version) else {
                violations.push(Violation::DirtyRead {
                    txn: r.txn_id,
                    table: o.table,
                    key: o.key,
                    version,
                });
                continue;
            };
            if version >= r.start_ts {
                violations.push(Violation::FutureRead {
                    txn: r.txn_id,
                    table: o.table,
                    key: o.key,
                    version,
                });
            }
            let chain = chains.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            match opts.isolation {
                Isolation::Serializable => {
                    if p > 0 && chain[p - 1].txn != i {
                        edges.push((chain[p - 1].txn, i));
                    }
                    if let Some(next) = chain.get(p) {
                        if next.txn != i {
                            edges.push((i, next.txn));
                        }
                    }
                }
                Isolation::SnapshotIsolation => {
                    let missed = chain[p..]
                        .iter()
                        .filter(|w| w.txn != i && w.version < r.start_ts)
                        .filter(|w| committed[w.txn].visible_time < r.start_time)
                        .map(|w| w.version)
                        .max();
                    if let Some(m) = missed {
                        violations.push(Violation::StaleRead {
                            txn: r.txn_id,
                            table: o.table,
                            key: o.key,
                            read: version,
                            missed: m,
                        });
                    }
                }
            }
        }
    }

    match opts.isolation {
        Isolation::Serializable => {
            for c in chains.values() {
                for w in c.windows(2) {
                    edges.push((w[0].txn, w[1].txn));
                }
            }
            let mut g: DiGraph<usize, ()> = DiGraph::with_capacity(committed.len(), edges.len());
            let nodes: Vec<_> = (0..committed.len()).map(|i| g.add_node(i)).collect();
            for (a, b) in edges {
                g.add_edge(nodes[a], nodes[b], ());
            }
            for scc in tarjan_scc(&g) {
                if scc.len() > 1 {
                    let mut txns: Vec<u64> = scc.iter().map(|n| committed[g[*n]].txn_id).collect();
                    txns.sort();
                    violations.push(Violation::Cycle { txns });
                }
            }
        }
        Isolation::SnapshotIsolation => {
            for (k, c) in &chains {
                for w in c.windows(2) {
                    let (a, b) = (committed[w[0].txn], committed[w[1].txn]);
                    if b.start_ts < w[0].version {
                        violations.push(Violation::LostUpdate {
                            table: k.0,
                            key: k.1,
                            first: a.txn_id,
                            second: b.txn_id,
                        });
                    }
                }
            }
        }
    }

    if opts.conservation {
        for (k, c) in &chains {
            for (j, w) in c.iter().enumerate() {
                let r = committed[w.txn];
                let previous = if j == 0 { h.load_ts } else { c[j - 1].version };
                let read = r
                    .ops
                    .iter()
                    .find_map(|o| match o.kind {
                        OpKind::Read { version } if (o.table, o.key) == *k => Some((version, o.value)),
                        _ => None,
                    });
                let prev_value = (j > 0).then(|| c[j - 1].value);
                let ok = match (read, prev_value) {
                    (Some((v, _)), None) => v == previous,
                    (Some((v, val)), Some(pv)) => v == previous && val == pv,
                    (None, _) => false,
                };
                if !ok {
                    violations.push(Violation::BrokenChain {
                        txn: r.txn_id,
                        table: k.0,
                        key: k.1,
                        read: read.map(|r| r.0),
                        previous,
                    });
                }
            }
        }
        for r in &committed {
            let mut actual = 0i64;
            for o in &r.ops {
                if let OpKind::Write { .. } = o.kind {
                    let old = r.ops.iter().find_map(|p| match p.kind {
                        OpKind::Read { .. } if (p.table, p.key) == (o.table, o.key) => Some(p.value),
                        _ => None,
                    });
                    actual += o.value - old.unwrap_or(0);
                }
            }
            if actual != r.app_delta {
                violations.push(Violation::Conservation {
                    txn: r.txn_id,
                    declared: r.app_delta,
                    actual,
                });
            }
        }
    }

    Ok(Verdict {
        isolation: opts.isolation,
        committed: committed.len(),
        violations,
    })
}

/// Compare an audited total with the initial total plus every committed
/// transaction's declared change.
pub fn check_balance(h: &HistoryFile, initial: i64, audited: i64) -> Option<Violation> {
    let expected = initial + h.records.iter().filter(|r| r.committed()).map(|r| r.app_delta).sum::<i64>();
    (expected != audited).then_some(Violation::Balance {
        expected,
        actual: audited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use disagg_txn::sim::SimTime;
    use disagg_txn::txn::history::{HistOp, Outcome};
    use disagg_txn::txn::AbortReason;

    const LOAD: u64 = 1;

    fn rd(key: u64, version: u64, value: i64) -> HistOp {
        HistOp {
            table: 0,
            key,
            kind: OpKind::Read { version },
            value,
        }
    }

    fn wr(key: u64, version: u64, value: i64) -> HistOp {
        HistOp {
            table: 0,
            key,
            kind: OpKind::Write {
                version,
                tombstone: false,
            },
            value,
        }
    }

    /// `times` = (start_time, visible_time) in ns.
    fn txn(id: u64, start: u64, commit: Option<u64>, ops: Vec<HistOp>, times: (u64, u64)) -> HistoryRecord {
        HistoryRecord {
            seq: 0,
            txn_id: id,
            kind: 0,
            read_only: commit.is_none(),
            cn: 0,
            start_ts: start,
            commit_ts: commit,
            ops,
            outcome: Outcome::Committed,
            app_delta: 0,
            start_time: SimTime::from_ns(times.0),
            visible_time: SimTime::from_ns(times.1),
        }
    }

    fn file(mut records: Vec<HistoryRecord>) -> HistoryFile {
        for (i, r) in records.iter_mut().enumerate() {
            r.seq = i as u64;
        }
        HistoryFile { load_ts: LOAD, records }
    }

    fn sr() -> CheckOptions {
        CheckOptions {
            isolation: Isolation::Serializable,
            conservation: false,
        }
    }

    fn si() -> CheckOptions {
        CheckOptions {
            isolation: Isolation::SnapshotIsolation,
            conservation: false,
        }
    }

    #[test]
    fn serial_history_passes_both() {
        let h = file(vec![
            txn(1, 10, Some(11), vec![rd(1, LOAD, 0), wr(1, 11, 1)], (10, 11)),
            txn(2, 20, Some(21), vec![rd(1, 11, 1), rd(2, LOAD, 0), wr(2, 21, 1)], (20, 21)),
            txn(3, 30, None, vec![rd(1, 11, 1), rd(2, 21, 1)], (30, 30)),
        ]);
        assert!(check_history(&h, sr()).unwrap().passed());
        assert!(check_history(&h, si()).unwrap().passed());
        let mut c = sr();
        c.conservation = true;
        let mut h2 = h.clone();
        for r in &mut h2.records {
            r.app_delta = r.ops.iter().filter(|o| matches!(o.kind, OpKind::Write { .. })).count() as i64;
        }
        assert!(check_history(&h2, c).unwrap().passed());
    }

    #[test]
    fn write_skew_passes_si_fails_sr() {
        // both read x and y at the load version, each writes the other key
        let h = file(vec![
            txn(1, 10, Some(12), vec![rd(1, LOAD, 0), rd(2, LOAD, 0), wr(1, 12, 1)], (10, 12)),
            txn(2, 11, Some(13), vec![rd(1, LOAD, 0), rd(2, LOAD, 0), wr(2, 13, 1)], (10, 13)),
        ]);
        assert!(check_history(&h, si()).unwrap().passed());
        let v = check_history(&h, sr()).unwrap();
        assert_eq!(v.violations, vec![Violation::Cycle { txns: vec![1, 2] }]);
    }

    #[test]
    fn lost_update_rejected() {
        let h = file(vec![
            txn(1, 10, Some(12), vec![rd(1, LOAD, 0), wr(1, 12, 1)], (10, 12)),
            txn(2, 11, Some(13), vec![rd(1, LOAD, 0), wr(1, 13, 1)], (10, 13)),
        ]);
        let v = check_history(&h, si()).unwrap();
        assert!(v.violations.iter().any(|x| matches!(x, Violation::LostUpdate { first: 1, second: 2, .. })));
        assert!(!check_history(&h, sr()).unwrap().passed());
    }

    #[test]
    fn dirty_read_rejected() {
        let mut aborted = txn(1, 10, None, vec![], (10, 12));
        aborted.outcome = Outcome::Aborted(AbortReason::LockConflict);
        let h = file(vec![aborted, txn(2, 20, None, vec![rd(1, 12, 1)], (20, 20))]);
        for o in [sr(), si()] {
            let v = check_history(&h, o).unwrap();
            assert_eq!(
                v.violations,
                vec![Violation::DirtyRead {
                    txn: 2,
                    table: 0,
                    key: 1,
                    version: 12
                }]
            );
        }
    }

    #[test]
    fn stale_snapshot_rejected_only_when_visible() {
        let writer = txn(1, 10, Some(12), vec![rd(1, LOAD, 0), wr(1, 12, 1)], (10, 15));
        // reader started after the write became visible and still missed it
        let late = file(vec![writer.clone(), txn(2, 20, None, vec![rd(1, LOAD, 0)], (16, 16))]);
        let v = check_history(&late, si()).unwrap();
        assert!(matches!(v.violations[..], [Violation::StaleRead { txn: 2, missed: 12, .. }]));
        // reader started while the write was still invisible
        let early = file(vec![writer, txn(2, 20, None, vec![rd(1, LOAD, 0)], (14, 14))]);
        assert!(check_history(&early, si()).unwrap().passed());
    }

    #[test]
    fn future_read_rejected() {
        let h = file(vec![
            txn(1, 10, Some(12), vec![rd(1, LOAD, 0), wr(1, 12, 1)], (10, 12)),
            txn(2, 11, None, vec![rd(1, 12, 1)], (13, 13)),
        ]);
        assert!(check_history(&h, sr())
            .unwrap()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::FutureRead { txn: 2, .. })));
    }

    #[test]
    fn conservation_and_chain() {
        let mut c = sr();
        c.conservation = true;
        let mut t1 = txn(1, 10, Some(11), vec![rd(1, LOAD, 100), wr(1, 11, 90)], (10, 11));
        t1.app_delta = -10;
        let mut t2 = txn(2, 20, Some(21), vec![rd(1, 11, 90), wr(1, 21, 95)], (20, 21));
        t2.app_delta = 0;
        let v = check_history(&file(vec![t1.clone(), t2.clone()]), c).unwrap();
        assert_eq!(
            v.violations,
            vec![Violation::Conservation {
                txn: 2,
                declared: 0,
                actual: 5
            }]
        );
        t2.app_delta = 5;
        t2.ops[0] = rd(1, 11, 80);
        let v = check_history(&file(vec![t1, t2]), c).unwrap();
        assert!(matches!(v.violations[..], [Violation::BrokenChain { txn: 2, .. }, ..]));
    }

    #[test]
    fn balance_totals() {
        let mut t = txn(1, 10, Some(11), vec![], (10, 11));
        t.app_delta = 7;
        let h = file(vec![t]);
        assert_eq!(check_balance(&h, 100, 107), None);
        assert_eq!(
            check_balance(&h, 100, 100),
            Some(Violation::Balance {
                expected: 107,
                actual: 100
            })
        );
    }

    #[test]
    fn malformed_inputs() {
        let mut a = txn(1, 10, None, vec![wr(1, 11, 1)], (0, 0));
        a.read_only = false;
        assert!(check_history(&file(vec![a]), sr()).is_err());
        let dup = file(vec![
            txn(1, 10, Some(11), vec![wr(1, 11, 1)], (0, 0)),
            txn(1, 12, Some(13), vec![wr(2, 13, 1)], (0, 0)),
        ]);
        assert!(check_history(&dup, sr()).is_err());
        let mut h = file(vec![txn(1, 10, Some(11), vec![], (0, 0)), txn(2, 10, Some(12), vec![], (0, 0))]);
        h.records[1].seq = 0;
        assert!(check_history(&h, sr()).is_err());
        let same = file(vec![
            txn(1, 10, Some(11), vec![wr(1, 11, 1)], (0, 0)),
            txn(2, 10, Some(11), vec![wr(1, 11, 1)], (0, 0)),
        ]);
        assert!(check_history(&same, sr()).is_err());
    }
}
