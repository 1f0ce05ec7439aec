//! Execution history recorded for offline checking. Recording is free in
//! simulated time.

use std::collections::BTreeMap;

use crate::memstore::LotusKey;
use crate::sim::SimTime;

use super::AbortReason;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read { version: u64 },
    Write { version: u64, tombstone: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistOp {
    pub table: u16,
    pub key: LotusKey,
    pub kind: OpKind,
    /// First 8 payload bytes of the version read or written.
    pub value: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Committed,
    Aborted(AbortReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryRecord {
    pub seq: u64,
    pub txn_id: u64,
    pub kind: u8,
    pub read_only: bool,
    pub cn: u16,
    pub start_ts: u64,
    pub commit_ts: Option<u64>,
    pub ops: Vec<HistOp>,
    pub outcome: Outcome,
    /// Application-level net change (e.g. money created), for conservation checks.
    pub app_delta: i64,
    /// When execution began.
    pub start_time: SimTime,
    /// When the last write became visible (commit time for read-only).
    pub visible_time: SimTime,
}

impl HistoryRecord {
    pub fn committed(&self) -> bool {
        self.outcome == Outcome::Committed
    }
}

/// Finished records in completion order, plus records of transactions
/// whose commit started but whose fate is not yet known.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub load_ts: u64,
    records: Vec<HistoryRecord>,
    pending: BTreeMap<u64, HistoryRecord>,
}

impl History {
    pub fn new(load_ts: u64) -> Self {
        History {
            load_ts,
            ..Default::default()
        }
    }

    pub fn push(&mut self, mut rec: HistoryRecord) {
        rec.seq = self.records.len() as u64;
        self.records.push(rec);
    }

    pub fn register_pending(&mut self, rec: HistoryRecord) {
        self.pending.insert(rec.txn_id, rec);
    }

    pub fn is_pending(&self, txn_id: u64) -> bool {
        self.pending.contains_key(&txn_id)
    }

    pub fn pending_ids(&self) -> Vec<u64> {
        self.pending.keys().copied().collect()
    }

    pub fn pending_of_cn(&self, cn: u16) -> Vec<u64> {
        self.pending.values().filter(|r| r.cn == cn).map(|r| r.txn_id).collect()
    }

    /// Resolve a pending record. Writes take `commit_ts` as their version.
    pub fn finalize(&mut self, txn_id: u64, outcome: Outcome, commit_ts: Option<u64>, visible_time: SimTime) -> bool {
        let Some(mut rec) = self.pending.remove(&txn_id) else {
            return false;
        };
        rec.outcome = outcome;
        rec.visible_time = visible_time;
        if outcome == Outcome::Committed {
            let ts = commit_ts.expect("committed without timestamp");
            rec.commit_ts = Some(ts);
            for op in &mut rec.ops {
                if let OpKind::Write { version, .. } = &mut op.kind {
                    *version = ts;
                }
            }
        } else {
            rec.commit_ts = None;
            rec.ops.clear();
        }
        self.push(rec);
        true
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<HistoryRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
