//! History files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! file    = magic "LTSHIST\0" | version u16 = 1 | load_ts u64 | count u64 | record*
//! record  = len u32 | body (len bytes)
//! body    = seq u64 | txn_id u64 | kind u8 | read_only u8 | cn u16
//!           | start_ts u64 | commit_ts u64 (u64::MAX = none)
//!           | outcome u8 (0 = committed, 1 + abort code otherwise)
//!           | app_delta i64 | start_time_ps u64 | visible_time_ps u64
//!           | op_count u32 | op*
//! op      = table u16 | key u64 | op_kind u8 (0 read, 1 write, 2 delete)
//!           | version u64 | value i64
//! ```

use std::fmt::Write as _;

use disagg_txn::sim::SimTime;
use disagg_txn::txn::history::{HistOp, HistoryRecord, OpKind, Outcome};
use disagg_txn::txn::AbortReason;
use thiserror::Error;

use crate::workload::kind_name;

pub const MAGIC: &[u8; 8] = b"LTSHIST\0";
pub const FORMAT_VERSION: u16 = 1;
const NO_TS: u64 = u64::MAX;
const RECORD_FIXED: usize = 8 + 8 + 1 + 1 + 2 + 8 + 8 + 1 + 8 + 8 + 8 + 4;
const OP_LEN: usize = 2 + 8 + 1 + 8 + 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MalformedHistory {
    #[error("bad magic or version")]
    Header,
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("record {seq}: {msg}")]
    Record { seq: u64, msg: String },
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("header promises {expected} records, found {found}")]
    Count { expected: u64, found: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct HistoryFile {
    /// Version of the initially loaded data.
    pub load_ts: u64,
    pub records: Vec<HistoryRecord>,
}

pub fn encode(h: &HistoryFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + h.records.len() * 96);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&h.load_ts.to_le_bytes());
    out.extend_from_slice(&(h.records.len() as u64).to_le_bytes());
    for r in &h.records {
        let mut b = Vec::with_capacity(RECORD_FIXED + r.ops.len() * OP_LEN);
        b.extend_from_slice(&r.seq.to_le_bytes());
        b.extend_from_slice(&r.txn_id.to_le_bytes());
        b.push(r.kind);
        b.push(u8::from(r.read_only));
        b.extend_from_slice(&r.cn.to_le_bytes());
        b.extend_from_slice(&r.start_ts.to_le_bytes());
        b.extend_from_slice(&r.commit_ts.unwrap_or(NO_TS).to_le_bytes());
        b.push(match r.outcome {
            Outcome::Committed => 0,
            Outcome::Aborted(a) => 1 + a.code(),
        });
        b.extend_from_slice(&r.app_delta.to_le_bytes());
        b.extend_from_slice(&r.start_time.as_ps().to_le_bytes());
        b.extend_from_slice(&r.visible_time.as_ps().to_le_bytes());
        b.extend_from_slice(&(r.ops.len() as u32).to_le_bytes());
        for op in &r.ops {
            b.extend_from_slice(&op.table.to_le_bytes());
            b.extend_from_slice(&op.key.to_le_bytes());
            let (k, v) = match op.kind {
                OpKind::Read { version } => (0u8, version),
                OpKind::Write { version, tombstone } => (1 + u8::from(tombstone), version),
            };
            b.push(k);
            b.extend_from_slice(&v.to_le_bytes());
            b.extend_from_slice(&op.value.to_le_bytes());
        }
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(&b);
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MalformedHistory> {
        if self.b.len() - self.pos < n {
            return Err(MalformedHistory::Truncated(self.pos));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, MalformedHistory> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, MalformedHistory> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, MalformedHistory> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, MalformedHistory> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<HistoryFile, MalformedHistory> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(8).map_err(|_| MalformedHistory::Header)? != MAGIC || r.u16().map_err(|_| MalformedHistory::Header)? != FORMAT_VERSION {
        return Err(MalformedHistory::Header);
    }
    let load_ts = r.u64()?;
    let count = r.u64()?;
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        let base = r.pos - len;
        let mut br = Reader { b: body, pos: 0 };
        let shift = |e: MalformedHistory| match e {
            MalformedHistory::Truncated(p) => MalformedHistory::Truncated(base + p),
            e => e,
        };
        let seq = br.u64().map_err(shift)?;
        let bad = |msg: String| MalformedHistory::Record { seq, msg };
        let txn_id = br.u64().map_err(shift)?;
        let kind = br.u8().map_err(shift)?;
        let read_only = match br.u8().map_err(shift)? {
            0 => false,
            1 => true,
            x => return Err(bad(format!("read_only flag {x}"))),
        };
        let cn = br.u16().map_err(shift)?;
        let start_ts = br.u64().map_err(shift)?;
        let commit_ts = Some(br.u64().map_err(shift)?).filter(|t| *t != NO_TS);
        let outcome = match br.u8().map_err(shift)? {
            0 => Outcome::Committed,
            x => Outcome::Aborted(AbortReason::from_code(x - 1).ok_or_else(|| bad(format!("outcome code {x}")))?),
        };
        let app_delta = br.u64().map_err(shift)? as i64;
        let start_time = SimTime::from_ps(br.u64().map_err(shift)?);
        let visible_time = SimTime::from_ps(br.u64().map_err(shift)?);
        let n = br.u32().map_err(shift)? as usize;
        if body.len() != RECORD_FIXED + n * OP_LEN {
            return Err(bad(format!("length {} does not fit {n} ops", body.len())));
        }
        let mut ops = Vec::with_capacity(n);
        for _ in 0..n {
            let table = br.u16().map_err(shift)?;
            let key = br.u64().map_err(shift)?;
            let k = br.u8().map_err(shift)?;
            let version = br.u64().map_err(shift)?;
            let value = br.u64().map_err(shift)? as i64;
            let kind = match k {
                0 => OpKind::Read { version },
                1 | 2 => OpKind::Write {
                    version,
                    tombstone: k == 2,
                },
                x => return Err(bad(format!("op kind {x}"))),
            };
            ops.push(HistOp { table, key, kind, value });
        }
        records.push(HistoryRecord {
            seq,
            txn_id,
            kind,
            read_only,
            cn,
            start_ts,
            commit_ts,
            ops,
            outcome,
            app_delta,
            start_time,
            visible_time,
        });
    }
    if records.len() as u64 != count {
        return Err(MalformedHistory::Count {
            expected: count,
            found: records.len() as u64,
        });
    }
    Ok(HistoryFile { load_ts, records })
}

/// One line per record, then one indented line per operation.
pub fn dump_text(h: &HistoryFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# load_ts {} records {}", h.load_ts, h.records.len());
    for r in &h.records {
        let outcome = match r.outcome {
            Outcome::Committed => "committed".to_string(),
            Outcome::Aborted(a) => format!("aborted:{}", a.name()),
        };
        let tc = r.commit_ts.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{} txn={} {} cn={} {} start={} commit={} delta={} t={}ns..{}ns",
            r.seq,
            r.txn_id,
            kind_name(r.kind),
            r.cn,
            outcome,
            r.start_ts,
            tc,
            r.app_delta,
            r.start_time.as_ns(),
            r.visible_time.as_ns()
        );
        for op in &r.ops {
            let (what, v) = match op.kind {
                OpKind::Read { version } => ("R", version),
                OpKind::Write { version, tombstone: false } => ("W", version),
                OpKind::Write { version, tombstone: true } => ("D", version),
            };
            let _ = writeln!(s, "  {what} t{}:{:#x} v={} val={}", op.table, op.key, v, op.value);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_record() -> impl Strategy<Value = HistoryRecord> {
        let op = (any::<u16>(), any::<u64>(), 0u8..3, any::<u64>(), any::<i64>()).prop_map(|(table, key, k, version, value)| HistOp {
            table,
            key,
            kind: if k == 0 {
                OpKind::Read { version }
            } else {
                OpKind::Write {
                    version,
                    tombstone: k == 2,
                }
            },
            value,
        });
        (
            (any::<u64>(), any::<u64>(), any::<u8>(), any::<bool>(), any::<u16>()),
            (any::<u64>(), proptest::option::of(0u64..u64::MAX)),
            proptest::collection::vec(op, 0..6),
            proptest::option::of(0usize..AbortReason::ALL.len()),
            (any::<i64>(), any::<u64>(), any::<u64>()),
        )
            .prop_map(|((seq, txn_id, kind, read_only, cn), (start_ts, commit_ts), ops, ab, (app_delta, st, vt))| HistoryRecord {
                seq,
                txn_id,
                kind,
                read_only,
                cn,
                start_ts,
                commit_ts,
                ops,
                outcome: ab.map(|i| Outcome::Aborted(AbortReason::ALL[i])).unwrap_or(Outcome::Committed),
                app_delta,
                start_time: SimTime::from_ps(st),
                visible_time: SimTime::from_ps(vt),
            })
    }

    proptest! {
        #[test]
        fn roundtrip(load_ts in any::<u64>(), records in proptest::collection::vec(arb_record(), 0..8)) {
            let h = HistoryFile { load_ts, records };
            let b = encode(&h);
            prop_assert_eq!(decode(&b).unwrap(), h);
        }

        #[test]
        fn truncation_is_detected(records in proptest::collection::vec(arb_record(), 1..4), cut in 1usize..40) {
            let b = encode(&HistoryFile { load_ts: 1, records });
            let cut = cut.min(b.len() - 1);
            prop_assert!(decode(&b[..b.len() - cut]).is_err());
        }
    }

    #[test]
    fn header_checked() {
        assert_eq!(decode(b"nothing here at all"), Err(MalformedHistory::Header));
        let mut b = encode(&HistoryFile::default());
        b[8] = 9;
        assert_eq!(decode(&b), Err(MalformedHistory::Header));
    }

    #[test]
    fn dump_mentions_every_record() {
        let h = HistoryFile {
            load_ts: 5,
            records: vec![HistoryRecord {
                seq: 0,
                txn_id: 42,
                kind: 1,
                read_only: false,
                cn: 2,
                start_ts: 10,
                commit_ts: Some(11),
                ops: vec![HistOp {
                    table: 0,
                    key: 0x10,
                    kind: OpKind::Write {
                        version: 11,
                        tombstone: false,
                    },
                    value: 3,
                }],
                outcome: Outcome::Committed,
                app_delta: 0,
                start_time: SimTime::ZERO,
                visible_time: SimTime::ZERO,
            }],
        };
        let t = dump_text(&h);
        assert!(t.contains("txn=42 UpdateOne cn=2 committed start=10 commit=11"));
        assert!(t.contains("W t0:0x10 v=11 val=3"));
    }
}
