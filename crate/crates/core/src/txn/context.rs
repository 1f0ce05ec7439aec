use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::locktable::{LockMode, LockTarget};
use crate::memstore::{Cvt, LotusKey};
use crate::sharding::shard_of;
use crate::sim::SimTime;

use super::AbortReason;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WriteIntent {
    Update,
    Insert,
    Delete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    ReadOnly,
    ReadWrite(WriteIntent),
}

impl Access {
    pub fn is_write(&self) -> bool {
        matches!(self, Access::ReadWrite(_))
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub table: u16,
    pub key: LotusKey,
    pub access: Access,
    /// Lock held on the record: mode and the compute node holding it.
    pub lock: Option<(LockMode, u16)>,
    /// Index-bucket lock for inserts: bucket address and holder node.
    pub bucket_lock: Option<(u64, u16)>,
    /// Lock word held in the CVT header (memory-node lock mode).
    pub mn_lock: Option<LockMode>,
    pub bucket: u64,
    pub cvt_addr: Option<u64>,
    pub cvt: Option<Cvt>,
    /// Cell read from; `None` when the key has no version to read.
    pub cell: Option<usize>,
    pub read_version: Option<u64>,
    /// Payload of the version read; `None` if absent or deleted.
    pub value: Option<Vec<u8>>,
    pub new_value: Option<Vec<u8>>,
    /// Bucket slot chosen for an insert of a new CVT.
    pub insert_slot: Option<usize>,
    pub fetched: bool,
    pub read_done: bool,
}

impl Entry {
    fn new(table: u16, key: LotusKey, access: Access) -> Self {
        Entry {
            table,
            key,
            access,
            lock: None,
            bucket_lock: None,
            mn_lock: None,
            bucket: 0,
            cvt_addr: None,
            cvt: None,
            cell: None,
            read_version: None,
            value: None,
            new_value: None,
            insert_slot: None,
            fetched: false,
            read_done: false,
        }
    }

    pub fn wanted_lock(&self, isolation: super::Isolation) -> Option<LockMode> {
        match (self.access, isolation) {
            (Access::ReadWrite(_), _) => Some(LockMode::Write),
            (Access::ReadOnly, super::Isolation::Serializable) => Some(LockMode::Read),
            (Access::ReadOnly, super::Isolation::SnapshotIsolation) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Running,
    Committing,
    Committed,
    Aborted(AbortReason),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum UsageError {
    #[error("transaction already finished")]
    Terminated,
    #[error("key is not in the read-write set")]
    NotWritable,
    #[error("key was never added")]
    UnknownKey,
}

/// A lock request whose outcome on a remote node is not certain; released
/// on abort regardless, since release is idempotent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockAttempt {
    pub target: LockTarget,
    pub mode: LockMode,
    pub owner: u16,
}

pub struct TxnContext {
    pub txn_id: u64,
    pub cn: u16,
    pub coord: usize,
    pub kind: u8,
    pub start_ts: u64,
    pub commit_ts: Option<u64>,
    pub status: TxnStatus,
    pub entries: Vec<Entry>,
    pub locks: Vec<LockAttempt>,
    /// Lock request messages sent to other nodes.
    pub lock_rpcs: u32,
    pub app_delta: i64,
    pub start_time: SimTime,
}

impl fmt::Debug for TxnContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TxnContext")
            .field("txn_id", &self.txn_id)
            .field("start_ts", &self.start_ts)
            .field("status", &self.status)
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl TxnContext {
    pub fn new(txn_id: u64, cn: u16, coord: usize, start_ts: u64, start_time: SimTime) -> Self {
        TxnContext {
            txn_id,
            cn,
            coord,
            kind: 0,
            start_ts,
            commit_ts: None,
            status: TxnStatus::Running,
            entries: Vec::new(),
            locks: Vec::new(),
            lock_rpcs: 0,
            app_delta: 0,
            start_time,
        }
    }

    fn running(&self) -> Result<(), UsageError> {
        match self.status {
            TxnStatus::Running => Ok(()),
            _ => Err(UsageError::Terminated),
        }
    }

    pub fn position(&self, key: LotusKey) -> Option<usize> {
        self.entries.iter().position(|e| e.key == key)
    }

    pub fn add_ro(&mut self, table: u16, key: LotusKey) -> Result<(), UsageError> {
        self.running()?;
        if self.position(key).is_none() {
            self.entries.push(Entry::new(table, key, Access::ReadOnly));
        }
        Ok(())
    }

    /// Stage a write. A key already in the read-only set moves to the
    /// read-write set.
    pub fn add_rw(&mut self, table: u16, key: LotusKey, intent: WriteIntent) -> Result<(), UsageError> {
        self.running()?;
        match self.position(key) {
            Some(i) => {
                let e = &mut self.entries[i];
                if !e.access.is_write() {
                    e.access = Access::ReadWrite(intent);
                    e.fetched = false;
                    e.read_done = false;
                }
            }
            None => self.entries.push(Entry::new(table, key, Access::ReadWrite(intent))),
        }
        Ok(())
    }

    pub fn is_read_only(&self) -> bool {
        self.entries.iter().all(|e| !e.access.is_write())
    }

    /// Payload read for `key` (after execute).
    pub fn get(&self, key: LotusKey) -> Option<&[u8]> {
        self.position(key).and_then(|i| self.entries[i].value.as_deref())
    }

    pub fn read_version(&self, key: LotusKey) -> Option<u64> {
        self.position(key).and_then(|i| self.entries[i].read_version)
    }

    pub fn set(&mut self, key: LotusKey, payload: Vec<u8>) -> Result<(), UsageError> {
        self.running()?;
        let i = self.position(key).ok_or(UsageError::UnknownKey)?;
        let e = &mut self.entries[i];
        if !e.access.is_write() {
            return Err(UsageError::NotWritable);
        }
        e.new_value = Some(payload);
        Ok(())
    }

    pub fn write_set(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.access.is_write())
    }
}

/// New payloads computed by a transaction's logic from what it read.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Writes {
    pub values: Vec<(LotusKey, Vec<u8>)>,
    pub app_delta: i64,
}

pub type TxnLogic = Rc<dyn Fn(&TxnContext) -> Writes>;

/// A transaction as a workload describes it: its keys and how to compute
/// the new values once the reads are in.
#[derive(Clone)]
pub struct TxnSpec {
    pub kind: u8,
    pub ro: Vec<(u16, LotusKey)>,
    pub rw: Vec<(u16, LotusKey, WriteIntent)>,
    /// `None` adds one to the first 8 bytes of every updated record.
    pub logic: Option<TxnLogic>,
}

impl fmt::Debug for TxnSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TxnSpec")
            .field("kind", &self.kind)
            .field("ro", &self.ro)
            .field("rw", &self.rw)
            .finish()
    }
}

impl TxnSpec {
    pub fn read_only(&self) -> bool {
        self.rw.is_empty()
    }

    pub fn first_key(&self) -> LotusKey {
        self.rw
            .first()
            .map(|r| r.1)
            .or_else(|| self.ro.first().map(|r| r.1))
            .unwrap_or(0)
    }

    pub fn single_shard(&self) -> bool {
        let first = shard_of(self.first_key());
        self.ro.iter().map(|r| r.1).chain(self.rw.iter().map(|r| r.1)).all(|k| shard_of(k) == first)
    }
}
