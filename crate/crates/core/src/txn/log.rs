//! Per-coordinator commit log record.
//!
//! ```text
//! header (24 B): magic u32 "LOGR", state u8 (1 live, 2 retired), 3 B zero,
//!                txn_id u64, count u32, 4 B zero
//! entry  (56 B): table_id u16, cell_index u8, flags u8 (bit0 insert),
//!                4 B zero, key u64, cvt_addr u64, cell image 32 B
//! marker  (8 B): txn_id ^ LOG_MARKER
//! ```
//!
//! The record is written in one piece; the trailing marker tells a scanner
//! the write landed in full. Retiring rewrites the state byte.

use thiserror::Error;

use crate::memstore::{decode_cell, encode_cell, CvtCell, LotusKey, CVT_CELL_LEN};

pub const LOG_MAGIC: u32 = 0x5247_4f4c;
pub const LOG_MARKER: u64 = 0xc0ff_ee00_d15c_0de5;
pub const LOG_SLOT_LEN: usize = 4096;
pub const LOG_HEADER_LEN: usize = 24;
pub const LOG_ENTRY_LEN: usize = 56;
pub const LOG_STATE_OFFSET: usize = 4;
pub const STATE_LIVE: u8 = 1;
pub const STATE_RETIRED: u8 = 2;
pub const MAX_LOG_ENTRIES: usize = (LOG_SLOT_LEN - LOG_HEADER_LEN - 8) / LOG_ENTRY_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub table_id: u16,
    pub key: LotusKey,
    pub cvt_addr: u64,
    pub cell_index: u8,
    pub insert: bool,
    pub cell: CvtCell,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitLogRecord {
    pub txn_id: u64,
    pub entries: Vec<LogEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogScan {
    Empty,
    Retired(u64),
    /// Header present but the marker does not match.
    Incomplete(u64),
    Complete(CommitLogRecord),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("{0} entries do not fit in one log slot")]
    TooLarge(usize),
}

impl CommitLogRecord {
    pub fn encode(&self) -> Result<Vec<u8>, LogError> {
        if self.entries.len() > MAX_LOG_ENTRIES {
            return Err(LogError::TooLarge(self.entries.len()));
        }
        let mut out = vec![0u8; LOG_HEADER_LEN + self.entries.len() * LOG_ENTRY_LEN + 8];
        out[0..4].copy_from_slice(&LOG_MAGIC.to_le_bytes());
        out[LOG_STATE_OFFSET] = STATE_LIVE;
        out[8..16].copy_from_slice(&self.txn_id.to_le_bytes());
        out[16..20].copy_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (i, e) in self.entries.iter().enumerate() {
            let b = &mut out[LOG_HEADER_LEN + i * LOG_ENTRY_LEN..][..LOG_ENTRY_LEN];
            b[0..2].copy_from_slice(&e.table_id.to_le_bytes());
            b[2] = e.cell_index;
            b[3] = u8::from(e.insert);
            b[8..16].copy_from_slice(&e.key.to_le_bytes());
            b[16..24].copy_from_slice(&e.cvt_addr.to_le_bytes());
            encode_cell(&e.cell, &mut b[24..24 + CVT_CELL_LEN]);
        }
        let m = out.len() - 8;
        out[m..].copy_from_slice(&(self.txn_id ^ LOG_MARKER).to_le_bytes());
        Ok(out)
    }

    /// Interpret a whole log slot.
    pub fn scan(slot: &[u8]) -> LogScan {
        let u32_at = |o: usize| u32::from_le_bytes(slot[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(slot[o..o + 8].try_into().unwrap());
        if slot.len() < LOG_HEADER_LEN || u32_at(0) != LOG_MAGIC {
            return LogScan::Empty;
        }
        let txn_id = u64_at(8);
        if slot[LOG_STATE_OFFSET] == STATE_RETIRED {
            return LogScan::Retired(txn_id);
        }
        let count = u32_at(16) as usize;
        let end = LOG_HEADER_LEN + count * LOG_ENTRY_LEN;
        if count > MAX_LOG_ENTRIES || end + 8 > slot.len() || u64_at(end) != txn_id ^ LOG_MARKER {
            return LogScan::Incomplete(txn_id);
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let b = &slot[LOG_HEADER_LEN + i * LOG_ENTRY_LEN..][..LOG_ENTRY_LEN];
            let Ok(cell) = decode_cell(&b[24..24 + CVT_CELL_LEN]) else {
                return LogScan::Incomplete(txn_id);
            };
            entries.push(LogEntry {
                table_id: u16::from_le_bytes([b[0], b[1]]),
                cell_index: b[2],
                insert: b[3] & 1 != 0,
                key: u64::from_le_bytes(b[8..16].try_into().unwrap()),
                cvt_addr: u64::from_le_bytes(b[16..24].try_into().unwrap()),
                cell,
            });
        }
        LogScan::Complete(CommitLogRecord { txn_id, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memstore::INVISIBLE;
    use proptest::prelude::*;

    fn rec(n: usize) -> CommitLogRecord {
        CommitLogRecord {
            txn_id: 77,
            entries: (0..n)
                .map(|i| LogEntry {
                    table_id: i as u16,
                    key: 1000 + i as u64,
                    cvt_addr: 0x8000 + i as u64 * 88,
                    cell_index: (i % 2) as u8,
                    insert: i % 3 == 0,
                    cell: CvtCell {
                        head_cv: 3,
                        valid: true,
                        tombstone: false,
                        address: 0x9000,
                        version: INVISIBLE,
                        tail_cv: 3,
                    },
                })
                .collect(),
        }
    }

    fn slot(bytes: &[u8]) -> Vec<u8> {
        let mut s = vec![0u8; LOG_SLOT_LEN];
        s[..bytes.len()].copy_from_slice(bytes);
        s
    }

    #[test]
    fn complete_record_scans_back() {
        let r = rec(3);
        assert_eq!(CommitLogRecord::scan(&slot(&r.encode().unwrap())), LogScan::Complete(r));
    }

    #[test]
    fn empty_retired_and_torn() {
        assert_eq!(CommitLogRecord::scan(&vec![0u8; LOG_SLOT_LEN]), LogScan::Empty);
        let b = rec(2).encode().unwrap();
        let mut s = slot(&b);
        s[LOG_STATE_OFFSET] = STATE_RETIRED;
        assert_eq!(CommitLogRecord::scan(&s), LogScan::Retired(77));
        let cut = slot(&b[..b.len() - 8]);
        assert_eq!(CommitLogRecord::scan(&cut), LogScan::Incomplete(77));
    }

    #[test]
    fn stale_marker_from_longer_record_is_rejected() {
        // an older, longer record leaves bytes behind; the new marker position differs
        let mut s = slot(&rec(5).encode().unwrap());
        let short = CommitLogRecord { txn_id: 78, ..rec(2) };
        let b = short.encode().unwrap();
        s[..b.len() - 8].copy_from_slice(&b[..b.len() - 8]);
        assert_eq!(CommitLogRecord::scan(&s), LogScan::Incomplete(78));
    }

    #[test]
    fn oversize_is_refused() {
        assert!(rec(MAX_LOG_ENTRIES).encode().is_ok());
        assert_eq!(rec(MAX_LOG_ENTRIES + 1).encode(), Err(LogError::TooLarge(MAX_LOG_ENTRIES + 1)));
    }

    proptest! {
        #[test]
        fn round_trip(n in 0usize..10, txn in any::<u64>()) {
            let r = CommitLogRecord { txn_id: txn, ..rec(n) };
            prop_assert_eq!(CommitLogRecord::scan(&slot(&r.encode().unwrap())), LogScan::Complete(r));
        }
    }
}
