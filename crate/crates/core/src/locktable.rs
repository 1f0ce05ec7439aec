//! Compute-node lock table.
//!
//! Slots are 8-byte words `fingerprint(56) << 8 | counter(8)`, eight to a
//! bucket. Counter 1 is a write lock; even counters count readers twice.
//! Beside the slots, a lock-state map records who holds each slot so that
//! repeated requests are idempotent and a failed node's holds can be found.
//!
//! Two keys with the same bucket and fingerprint share one slot and are
//! therefore serialized as one lock.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use thiserror::Error;

use crate::memstore::LotusKey;

pub const SLOTS_PER_BUCKET: usize = 8;
pub const SHARDS: usize = 4096;
pub const MAX_READ_COUNTER: u8 = 254;
const FP_MASK: u64 = (1 << 56) - 1;
const STRIPES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LockMode {
    Read,
    Write,
}

/// What a lock protects: a record key or an index bucket (by address).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LockTarget {
    pub key: u64,
    pub index_bucket: bool,
}

impl LockTarget {
    pub const fn record(key: LotusKey) -> Self {
        LockTarget {
            key,
            index_bucket: false,
        }
    }
    pub const fn bucket(addr: u64) -> Self {
        LockTarget {
            key: addr,
            index_bucket: true,
        }
    }
    pub fn shard(&self) -> u16 {
        if self.index_bucket {
            (mix64(self.key) & 0xfff) as u16
        } else {
            (self.key & 0xfff) as u16
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn default_lock_hash(t: LockTarget) -> u64 {
    mix64(t.key ^ if t.index_bucket { 0x5bd1_e995_0000_0001 } else { 0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Holder {
    pub txn_id: u64,
    pub cn_id: u16,
    pub mode: LockMode,
    pub target: LockTarget,
}

/// Result codes shared by the local API and the wire format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LockCode {
    Ok = 0,
    Conflict = 1,
    BucketFull = 2,
    Overflow = 3,
    ShardNotOwned = 4,
}

impl LockCode {
    pub fn is_ok(self) -> bool {
        self == LockCode::Ok
    }
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => LockCode::Ok,
            1 => LockCode::Conflict,
            2 => LockCode::BucketFull,
            3 => LockCode::Overflow,
            4 => LockCode::ShardNotOwned,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LockError {
    #[error("shard {0} is not owned by this node")]
    ShardNotOwned(u16),
    #[error("release by a transaction that does not hold the lock")]
    NotHolder,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct SlotState {
    holders: Vec<Holder>,
}

/// Exported table contents, used to compare or restore states.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LockTableState {
    pub slots: Vec<u64>,
    pub holders: Vec<(usize, Vec<Holder>)>,
}

pub type LockHasher = fn(LockTarget) -> u64;

pub struct LockTable {
    cn_id: u16,
    buckets: usize,
    slots: Vec<AtomicU64>,
    stripes: Vec<Mutex<HashMap<usize, SlotState>>>,
    owned: Vec<AtomicBool>,
    shard_hits: Vec<AtomicU64>,
    hasher: LockHasher,
    acquires: AtomicU64,
    releases: AtomicU64,
}

impl LockTable {
    /// Slot count for a table of `bytes` bytes.
    pub fn buckets_for_bytes(bytes: usize) -> usize {
        (bytes / 8 / SLOTS_PER_BUCKET).max(1)
    }

    pub fn new(cn_id: u16, buckets: usize) -> Self {
        Self::with_hasher(cn_id, buckets, default_lock_hash)
    }

    pub fn with_hasher(cn_id: u16, buckets: usize, hasher: LockHasher) -> Self {
        let buckets = buckets.max(1);
        LockTable {
            cn_id,
            buckets,
            slots: (0..buckets * SLOTS_PER_BUCKET).map(|_| AtomicU64::new(0)).collect(),
            stripes: (0..STRIPES).map(|_| Mutex::new(HashMap::new())).collect(),
            owned: (0..SHARDS).map(|_| AtomicBool::new(false)).collect(),
            shard_hits: (0..SHARDS).map(|_| AtomicU64::new(0)).collect(),
            hasher,
            acquires: AtomicU64::new(0),
            releases: AtomicU64::new(0),
        }
    }

    pub fn cn_id(&self) -> u16 {
        self.cn_id
    }

    pub fn set_owned(&self, shard: u16, owned: bool) {
        self.owned[shard as usize].store(owned, Ordering::SeqCst);
    }

    pub fn owns(&self, shard: u16) -> bool {
        self.owned[shard as usize].load(Ordering::SeqCst)
    }

    pub fn owned_shards(&self) -> Vec<u16> {
        (0..SHARDS as u16).filter(|s| self.owns(*s)).collect()
    }

    fn locate(&self, t: LockTarget) -> (usize, u64) {
        let h = (self.hasher)(t);
        ((h % self.buckets as u64) as usize, (h >> 8) & FP_MASK)
    }

    /// Acquire without a cache-invalidation hook.
    pub fn acquire(&self, t: LockTarget, mode: LockMode, cn_id: u16, txn_id: u64) -> Result<LockCode, LockError> {
        self.acquire_with(t, mode, cn_id, txn_id, &mut |_| {})
    }

    /// Acquire a lock. `invalidate` runs before a remote write lock is
    /// granted.
    pub fn acquire_with(
        &self,
        t: LockTarget,
        mode: LockMode,
        cn_id: u16,
        txn_id: u64,
        invalidate: &mut dyn FnMut(LockTarget),
    ) -> Result<LockCode, LockError> {
        let shard = t.shard();
        if !self.owns(shard) {
            return Err(LockError::ShardNotOwned(shard));
        }
        let (bucket, fp) = self.locate(t);
        let mut states = self.stripes[bucket % STRIPES].lock();

        // lock state check: the requester may already hold it
        let base = bucket * SLOTS_PER_BUCKET;
        for i in base..base + SLOTS_PER_BUCKET {
            if let Some(st) = states.get(&i) {
                if let Some(h) = st
                    .holders
                    .iter()
                    .find(|h| h.txn_id == txn_id && h.cn_id == cn_id && h.target == t)
                {
                    if h.mode == LockMode::Write || mode == LockMode::Read {
                        return Ok(LockCode::Ok);
                    }
                }
            }
        }

        for _attempt in 0..2 {
            let mut free = None;
            let mut matched = None;
            for i in base..base + SLOTS_PER_BUCKET {
                let w = self.slots[i].load(Ordering::SeqCst);
                let counter = (w & 0xff) as u8;
                if counter != 0 && w >> 8 == fp {
                    matched = Some((i, w));
                    break;
                }
                if counter == 0 && free.is_none() {
                    free = Some((i, w));
                }
            }
            let Some((idx, old)) = matched.or(free) else {
                return Ok(LockCode::BucketFull);
            };
            let counter = (old & 0xff) as u8;
            let new_counter = match mode {
                LockMode::Write if counter != 0 => return Ok(LockCode::Conflict),
                LockMode::Write => 1,
                LockMode::Read if counter == 1 => return Ok(LockCode::Conflict),
                LockMode::Read if counter >= MAX_READ_COUNTER => return Ok(LockCode::Overflow),
                LockMode::Read => counter + 2,
            };
            if mode == LockMode::Write && cn_id != self.cn_id {
                invalidate(t);
            }
            let new = fp << 8 | u64::from(new_counter);
            if self.slots[idx]
                .compare_exchange(old, new, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                states.entry(idx).or_default().holders.push(Holder {
                    txn_id,
                    cn_id,
                    mode,
                    target: t,
                });
                self.acquires.fetch_add(1, Ordering::Relaxed);
                self.shard_hits[shard as usize].fetch_add(1, Ordering::Relaxed);
                return Ok(LockCode::Ok);
            }
        }
        Ok(LockCode::Conflict)
    }

    /// Release a hold. Ownership is not checked, so holds left behind by a
    /// transfer can still be drained.
    pub fn release(&self, t: LockTarget, mode: LockMode, cn_id: u16, txn_id: u64) -> Result<(), LockError> {
        let (bucket, _) = self.locate(t);
        let mut states = self.stripes[bucket % STRIPES].lock();
        let base = bucket * SLOTS_PER_BUCKET;
        for i in base..base + SLOTS_PER_BUCKET {
            let Some(st) = states.get_mut(&i) else { continue };
            let Some(pos) = st
                .holders
                .iter()
                .position(|h| h.txn_id == txn_id && h.cn_id == cn_id && h.target == t && h.mode == mode)
            else {
                continue;
            };
            st.holders.remove(pos);
            if st.holders.is_empty() {
                states.remove(&i);
            }
            Self::drop_hold(&self.slots[i], mode);
            self.releases.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }
        Err(LockError::NotHolder)
    }

    fn drop_hold(slot: &AtomicU64, mode: LockMode) {
        let mut cur = slot.load(Ordering::SeqCst);
        loop {
            let counter = (cur & 0xff) as u8;
            let next_counter = match mode {
                LockMode::Write => 0,
                LockMode::Read => counter.saturating_sub(2),
            };
            let next = if next_counter == 0 {
                0
            } else {
                (cur & !0xff) | u64::from(next_counter)
            };
            match slot.compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => return,
                Err(v) => cur = v,
            }
        }
    }

    /// Lock an index bucket for an insert.
    pub fn lock_index_bucket(&self, bucket_addr: u64, cn_id: u16, txn_id: u64) -> Result<LockCode, LockError> {
        self.acquire(LockTarget::bucket(bucket_addr), LockMode::Write, cn_id, txn_id)
    }

    fn all_holders(&self) -> Vec<Holder> {
        let mut v: Vec<Holder> = self
            .stripes
            .iter()
            .flat_map(|s| s.lock().values().flat_map(|st| st.holders.clone()).collect::<Vec<_>>())
            .collect();
        v.sort();
        v
    }

    /// Holds attributed to `cn_id`, sorted.
    pub fn holders_of_cn(&self, cn_id: u16) -> Vec<Holder> {
        self.all_holders().into_iter().filter(|h| h.cn_id == cn_id).collect()
    }

    pub fn holders_in_shard(&self, shard: u16) -> Vec<Holder> {
        self.all_holders().into_iter().filter(|h| h.target.shard() == shard).collect()
    }

    pub fn holders_of(&self, t: LockTarget) -> Vec<Holder> {
        self.all_holders().into_iter().filter(|h| h.target == t).collect()
    }

    /// Release every hold of `cn_id`; returns how many were released.
    pub fn release_all(&self, cn_id: u16) -> usize {
        let hs = self.holders_of_cn(cn_id);
        for h in &hs {
            let _ = self.release(h.target, h.mode, h.cn_id, h.txn_id);
        }
        hs.len()
    }

    /// Drop all lock metadata of a shard.
    pub fn drop_shard(&self, shard: u16) -> usize {
        let hs = self.holders_in_shard(shard);
        for h in &hs {
            let _ = self.release(h.target, h.mode, h.cn_id, h.txn_id);
        }
        hs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stripes.iter().all(|s| s.lock().is_empty())
            && self.slots.iter().all(|s| s.load(Ordering::SeqCst) == 0)
    }

    /// Forget everything, as after a restart.
    pub fn clear(&self) {
        for s in &self.stripes {
            s.lock().clear();
        }
        for s in &self.slots {
            s.store(0, Ordering::SeqCst);
        }
    }

    pub fn slot_word(&self, t: LockTarget) -> u64 {
        let (bucket, fp) = self.locate(t);
        let base = bucket * SLOTS_PER_BUCKET;
        (base..base + SLOTS_PER_BUCKET)
            .map(|i| self.slots[i].load(Ordering::SeqCst))
            .find(|w| w & 0xff != 0 && w >> 8 == fp)
            .unwrap_or(0)
    }

    pub fn counter(&self, t: LockTarget) -> u8 {
        (self.slot_word(t) & 0xff) as u8
    }

    /// Check that every nonzero slot has holders matching its counter and
    /// every state entry points at a nonzero slot.
    pub fn check_coherence(&self) -> Result<(), String> {
        let mut seen = HashMap::new();
        for stripe in &self.stripes {
            for (idx, st) in stripe.lock().iter() {
                seen.insert(*idx, st.clone());
            }
        }
        for (i, slot) in self.slots.iter().enumerate() {
            let w = slot.load(Ordering::SeqCst);
            let counter = (w & 0xff) as u8;
            let st = seen.get(&i);
            let expect = match st {
                None => 0,
                Some(st) => {
                    let writers = st.holders.iter().filter(|h| h.mode == LockMode::Write).count();
                    if writers > 0 {
                        if st.holders.len() != 1 {
                            return Err(format!("slot {i}: writer shares with {:?}", st.holders));
                        }
                        1
                    } else {
                        (2 * st.holders.len()) as u8
                    }
                }
            };
            if counter != expect {
                return Err(format!("slot {i}: counter {counter} but holders {st:?}"));
            }
        }
        Ok(())
    }

    pub fn export_state(&self) -> LockTableState {
        let mut holders: Vec<(usize, Vec<Holder>)> = self
            .stripes
            .iter()
            .flat_map(|s| s.lock().iter().map(|(i, st)| (*i, st.holders.clone())).collect::<Vec<_>>())
            .collect();
        holders.sort();
        LockTableState {
            slots: self.slots.iter().map(|s| s.load(Ordering::SeqCst)).collect(),
            holders,
        }
    }

    pub fn import_state(&self, st: &LockTableState) {
        assert_eq!(st.slots.len(), self.slots.len(), "state from a table of another size");
        self.clear();
        for (i, w) in st.slots.iter().enumerate() {
            self.slots[i].store(*w, Ordering::SeqCst);
        }
        for (i, hs) in &st.holders {
            let bucket = i / SLOTS_PER_BUCKET;
            self.stripes[bucket % STRIPES]
                .lock()
                .insert(*i, SlotState { holders: hs.clone() });
        }
    }

    /// Per-shard successful acquires since the last call.
    pub fn take_shard_hits(&self) -> Vec<u64> {
        self.shard_hits.iter().map(|h| h.swap(0, Ordering::Relaxed)).collect()
    }

    pub fn acquires(&self) -> u64 {
        self.acquires.load(Ordering::Relaxed)
    }

    pub fn releases(&self) -> u64 {
        self.releases.load(Ordering::Relaxed)
    }

    /// Apply one batch of wire requests in order.
    pub fn handle_lock_rpc(&self, batch: &[LockRequest], invalidate: &mut dyn FnMut(LockTarget)) -> Vec<LockCode> {
        batch
            .iter()
            .map(|r| match r.op {
                LockOp::Acquire => match self.acquire_with(r.target, r.mode, r.cn_id, r.txn_id, invalidate) {
                    Ok(c) => c,
                    Err(_) => LockCode::ShardNotOwned,
                },
                // a repeated release finds no holder; that is success
                LockOp::Release => {
                    let _ = self.release(r.target, r.mode, r.cn_id, r.txn_id);
                    LockCode::Ok
                }
            })
            .collect()
    }
}

// ---- wire format ----------------------------------------------------------------

pub const LOCK_WIRE_VERSION: u8 = 1;
const RECORD_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LockOp {
    Acquire,
    Release,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LockRequest {
    pub op: LockOp,
    pub target: LockTarget,
    pub mode: LockMode,
    pub txn_id: u64,
    pub cn_id: u16,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("truncated message")]
    Truncated,
    #[error("bad field value {0:#x}")]
    BadField(u8),
}

/// `[version u8][count u32]` then `count` records of
/// `op u8, key u64, flags u8 (bit0 write, bit1 index bucket), txn_id u64, cn_id u16`.
pub fn encode_lock_batch(batch: &[LockRequest]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + batch.len() * RECORD_LEN);
    out.push(LOCK_WIRE_VERSION);
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for r in batch {
        out.push(match r.op {
            LockOp::Acquire => 0,
            LockOp::Release => 1,
        });
        out.extend_from_slice(&r.target.key.to_le_bytes());
        out.push(u8::from(r.mode == LockMode::Write) | u8::from(r.target.index_bucket) << 1);
        out.extend_from_slice(&r.txn_id.to_le_bytes());
        out.extend_from_slice(&r.cn_id.to_le_bytes());
    }
    out
}

fn wire_header(b: &[u8]) -> Result<usize, WireError> {
    if b.len() < 5 {
        return Err(WireError::Truncated);
    }
    if b[0] != LOCK_WIRE_VERSION {
        return Err(WireError::Version(b[0]));
    }
    Ok(u32::from_le_bytes(b[1..5].try_into().unwrap()) as usize)
}

pub fn decode_lock_batch(b: &[u8]) -> Result<Vec<LockRequest>, WireError> {
    let n = wire_header(b)?;
    let body = &b[5..];
    if body.len() != n * RECORD_LEN {
        return Err(WireError::Truncated);
    }
    body.chunks_exact(RECORD_LEN)
        .map(|r| {
            let op = match r[0] {
                0 => LockOp::Acquire,
                1 => LockOp::Release,
                x => return Err(WireError::BadField(x)),
            };
            let flags = r[9];
            if flags & !3 != 0 {
                return Err(WireError::BadField(flags));
            }
            Ok(LockRequest {
                op,
                target: LockTarget {
                    key: u64::from_le_bytes(r[1..9].try_into().unwrap()),
                    index_bucket: flags & 2 != 0,
                },
                mode: if flags & 1 != 0 { LockMode::Write } else { LockMode::Read },
                txn_id: u64::from_le_bytes(r[10..18].try_into().unwrap()),
                cn_id: u16::from_le_bytes([r[18], r[19]]),
            })
        })
        .collect()
}

pub fn encode_lock_response(codes: &[LockCode]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + codes.len());
    out.push(LOCK_WIRE_VERSION);
    out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    out.extend(codes.iter().map(|c| *c as u8));
    out
}

pub fn decode_lock_response(b: &[u8]) -> Result<Vec<LockCode>, WireError> {
    let n = wire_header(b)?;
    if b.len() != 5 + n {
        return Err(WireError::Truncated);
    }
    b[5..]
        .iter()
        .map(|x| LockCode::from_u8(*x).ok_or(WireError::BadField(*x)))
        .collect()
}
