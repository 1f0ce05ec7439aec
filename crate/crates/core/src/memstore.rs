//! Memory-node data layout: hash-indexed buckets of consecutive version
//! tables (CVTs), full-record version storage guarded by cacheline versions,
//! and cell recycling.
//!
//! Byte layout (little endian):
//!
//! ```text
//! CVT header (24 B)
//!   0  key        u64
//!   8  table_id   u16
//!  10  flags      u8   bit0 = slot occupied
//!  11  reserved   u8   must be 0
//!  12  length     u32  record payload length
//!  16  lock_word  u64  only used by the MN-side lock baseline
//! CVT cell (32 B), N of them after the header
//!   0  head_cv    u8
//!   1  valid      u8   bit0 = valid, bit1 = tombstone
//!   2  reserved   6 B  zero
//!   8  address    u64
//!  16  version    u64
//!  24  tail_cv    u8
//!  25  reserved   7 B  zero
//! Data record: ceil(len / 63) cachelines of 64 B, byte 0 of each is a CV.
//! ```

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, NodeId};

pub type LotusKey = u64;

/// Version placeholder for a write that is not yet visible.
pub const INVISIBLE: u64 = u64::MAX;
pub const CACHELINE: usize = 64;
pub const LINE_PAYLOAD: usize = CACHELINE - 1;
pub const CVT_HEADER_LEN: usize = 24;
pub const CVT_CELL_LEN: usize = 32;
pub const CVTS_PER_BUCKET: usize = 4;
/// Offset of the version word inside a cell.
pub const CELL_VERSION_OFFSET: usize = 16;
pub const HEADER_LOCK_OFFSET: usize = 16;

const FLAG_OCCUPIED: u8 = 1;
const VALID_BIT: u8 = 1;
const TOMBSTONE_BIT: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemstoreError {
    #[error("malformed bytes: {0}")]
    MalformedBytes(String),
    #[error("unknown table {0}")]
    UnknownTable(u16),
    #[error("table {0} has no free record memory")]
    OutOfRecords(u16),
    #[error("versions per CVT must be at least 2, got {0}")]
    TooFewVersions(usize),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CvtHeader {
    pub key: LotusKey,
    pub table_id: u16,
    pub occupied: bool,
    pub length: u32,
    pub lock_word: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CvtCell {
    pub head_cv: u8,
    pub valid: bool,
    pub tombstone: bool,
    pub address: u64,
    pub version: u64,
    pub tail_cv: u8,
}

impl CvtCell {
    pub fn is_torn(&self) -> bool {
        self.head_cv != self.tail_cv
    }

    /// Valid, untorn and committed.
    pub fn is_visible(&self) -> bool {
        self.valid && !self.is_torn() && self.version != INVISIBLE
    }

    pub fn cv(&self) -> u8 {
        self.head_cv
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cvt {
    pub header: CvtHeader,
    pub cells: Vec<CvtCell>,
}

pub const fn cvt_len(versions: usize) -> usize {
    CVT_HEADER_LEN + CVT_CELL_LEN * versions
}

impl Cvt {
    pub fn empty(key: LotusKey, table_id: u16, length: u32, versions: usize) -> Self {
        Cvt {
            header: CvtHeader {
                key,
                table_id,
                occupied: true,
                length,
                lock_word: 0,
            },
            cells: vec![CvtCell::default(); versions],
        }
    }

    /// Visible cell with the largest version strictly below `ts`.
    pub fn visible_before(&self, ts: u64) -> Option<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_visible() && c.version < ts)
            .max_by_key(|(_, c)| c.version)
            .map(|(i, _)| i)
    }

    /// Largest visible version, if any.
    pub fn newest(&self) -> Option<usize> {
        self.visible_before(INVISIBLE)
    }

    pub fn has_version_after(&self, ts: u64) -> bool {
        self.cells.iter().any(|c| c.is_visible() && c.version > ts)
    }
}

pub fn encode_cell(cell: &CvtCell, out: &mut [u8]) {
    out[..CVT_CELL_LEN].fill(0);
    out[0] = cell.head_cv;
    out[1] = u8::from(cell.valid) * VALID_BIT | u8::from(cell.tombstone) * TOMBSTONE_BIT;
    out[8..16].copy_from_slice(&cell.address.to_le_bytes());
    out[16..24].copy_from_slice(&cell.version.to_le_bytes());
    out[24] = cell.tail_cv;
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn decode_cell(b: &[u8]) -> Result<CvtCell, MemstoreError> {
    if b.len() < CVT_CELL_LEN {
        return Err(MemstoreError::MalformedBytes(format!("cell of {} bytes", b.len())));
    }
    let flags = b[1];
    if flags & !(VALID_BIT | TOMBSTONE_BIT) != 0 || flags == TOMBSTONE_BIT {
        return Err(MemstoreError::MalformedBytes(format!("cell valid byte {flags:#x}")));
    }
    if b[2..8].iter().chain(&b[25..32]).any(|&x| x != 0) {
        return Err(MemstoreError::MalformedBytes("cell reserved bytes set".into()));
    }
    Ok(CvtCell {
        head_cv: b[0],
        valid: flags & VALID_BIT != 0,
        tombstone: flags & TOMBSTONE_BIT != 0,
        address: u64_at(b, 8),
        version: u64_at(b, 16),
        tail_cv: b[24],
    })
}

pub fn encode_header(h: &CvtHeader, out: &mut [u8]) {
    out[..CVT_HEADER_LEN].fill(0);
    out[0..8].copy_from_slice(&h.key.to_le_bytes());
    out[8..10].copy_from_slice(&h.table_id.to_le_bytes());
    out[10] = u8::from(h.occupied) * FLAG_OCCUPIED;
    out[12..16].copy_from_slice(&h.length.to_le_bytes());
    out[16..24].copy_from_slice(&h.lock_word.to_le_bytes());
}

pub fn decode_header(b: &[u8]) -> Result<CvtHeader, MemstoreError> {
    if b.len() < CVT_HEADER_LEN {
        return Err(MemstoreError::MalformedBytes(format!("header of {} bytes", b.len())));
    }
    if b[10] & !FLAG_OCCUPIED != 0 || b[11] != 0 {
        return Err(MemstoreError::MalformedBytes(format!("header flags {:#x}/{:#x}", b[10], b[11])));
    }
    Ok(CvtHeader {
        key: u64_at(b, 0),
        table_id: u16::from_le_bytes([b[8], b[9]]),
        occupied: b[10] & FLAG_OCCUPIED != 0,
        length: u32::from_le_bytes(b[12..16].try_into().unwrap()),
        lock_word: u64_at(b, 16),
    })
}

pub fn encode_cvt(cvt: &Cvt) -> Vec<u8> {
    let mut out = vec![0u8; cvt_len(cvt.cells.len())];
    encode_header(&cvt.header, &mut out);
    for (i, c) in cvt.cells.iter().enumerate() {
        let off = CVT_HEADER_LEN + i * CVT_CELL_LEN;
        encode_cell(c, &mut out[off..off + CVT_CELL_LEN]);
    }
    out
}

/// Decode a CVT; the cell count is implied by the length.
pub fn decode_cvt(b: &[u8]) -> Result<Cvt, MemstoreError> {
    if b.len() < cvt_len(1) || (b.len() - CVT_HEADER_LEN) % CVT_CELL_LEN != 0 {
        return Err(MemstoreError::MalformedBytes(format!("CVT of {} bytes", b.len())));
    }
    let header = decode_header(b)?;
    let cells = b[CVT_HEADER_LEN..]
        .chunks_exact(CVT_CELL_LEN)
        .map(decode_cell)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cvt { header, cells })
}

// ---- data records ----------------------------------------------------------

pub fn record_lines(payload_len: usize) -> usize {
    payload_len.div_ceil(LINE_PAYLOAD).max(1)
}

pub fn stored_record_len(payload_len: usize) -> usize {
    record_lines(payload_len) * CACHELINE
}

/// Lay out `payload` over cachelines, each headed by `cv`.
pub fn encode_record(payload: &[u8], cv: u8) -> Vec<u8> {
    let lines = record_lines(payload.len());
    let mut out = vec![0u8; lines * CACHELINE];
    for (i, chunk) in payload.chunks(LINE_PAYLOAD).enumerate() {
        out[i * CACHELINE + 1..i * CACHELINE + 1 + chunk.len()].copy_from_slice(chunk);
    }
    for i in 0..lines {
        out[i * CACHELINE] = cv;
    }
    out
}

/// Strip the CVs back out.
pub fn decode_record(bytes: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload_len);
    for line in bytes.chunks(CACHELINE) {
        let take = (payload_len - out.len()).min(LINE_PAYLOAD);
        out.extend_from_slice(&line[1..1 + take]);
        if out.len() == payload_len {
            break;
        }
    }
    out
}

/// Set every embedded CV of `record` and both CVs of `cell` to `new_cv`.
pub fn cv_stamp(record: &mut [u8], cell: &mut CvtCell, new_cv: u8) {
    for line in record.chunks_mut(CACHELINE) {
        line[0] = new_cv;
    }
    cell.head_cv = new_cv;
    cell.tail_cv = new_cv;
}

/// True iff the cell is untorn and every line of `record` carries its CV.
pub fn cv_check(record: &[u8], cell: &CvtCell) -> bool {
    !cell.is_torn() && record.chunks(CACHELINE).all(|line| line[0] == cell.head_cv)
}

/// First 8 payload bytes as a signed integer; workloads keep their numeric
/// field there.
pub fn payload_value(payload: &[u8]) -> i64 {
    let mut b = [0u8; 8];
    let n = payload.len().min(8);
    b[..n].copy_from_slice(&payload[..n]);
    i64::from_le_bytes(b)
}

pub fn payload_with_value(len: usize, value: i64) -> Vec<u8> {
    let mut p = vec![0u8; len];
    let v = value.to_le_bytes();
    let n = len.min(8);
    p[..n].copy_from_slice(&v[..n]);
    p
}

// ---- cell recycling ----------------------------------------------------------

/// Physical nanoseconds embedded in a timestamp.
pub fn ts_physical_ns(ts: u64) -> u64 {
    ts >> 16
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellChoice {
    pub index: usize,
    /// Cells cleared because they expired (includes `index` when it was one).
    pub cleared: Vec<usize>,
    /// Record memory released by this choice, with the CV it carried.
    pub released: Vec<(u64, u8)>,
}

/// Pick the cell a new version goes into, clearing expired cells in `cvt`.
///
/// Order of preference: a free cell, an expired cell, the oldest valid cell.
/// The newest visible version is never cleared.
pub fn select_cell_for_write(cvt: &mut Cvt, local_clock_ns: u64, threshold_ns: u64) -> CellChoice {
    let newest = cvt.newest();
    let mut cleared = Vec::new();
    let mut released = Vec::new();
    for (i, c) in cvt.cells.iter_mut().enumerate() {
        let expired = c.valid
            && c.version != INVISIBLE
            && Some(i) != newest
            && ts_physical_ns(c.version).saturating_add(threshold_ns) < local_clock_ns;
        if expired {
            released.push((c.address, c.head_cv));
            c.valid = false;
            c.tombstone = false;
            cleared.push(i);
        }
    }
    let index = if let Some(i) = cvt.cells.iter().position(|c| !c.valid) {
        i
    } else {
        let oldest = cvt
            .cells
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != newest)
            .min_by_key(|(_, c)| c.version)
            .map(|(i, _)| i)
            .unwrap_or(0);
        let c = &cvt.cells[oldest];
        released.push((c.address, c.head_cv));
        oldest
    };
    CellChoice {
        index,
        cleared,
        released,
    }
}

// ---- tables, buckets, replicas ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableSchema {
    pub table_id: u16,
    pub name: String,
    /// Payload bytes per record.
    pub record_len: u32,
    /// Cells per CVT.
    pub versions: usize,
    /// Number of index buckets; rounded up to a power of two.
    pub bucket_count: u64,
    /// Record slots reserved in the data area.
    pub record_capacity: u64,
}

impl TableSchema {
    /// Schema sized for `keys` records with headroom for old versions.
    pub fn sized_for(table_id: u16, name: &str, record_len: u32, versions: usize, keys: u64) -> Self {
        TableSchema {
            table_id,
            name: name.to_string(),
            record_len,
            versions,
            bucket_count: keys.div_ceil(3).max(1).next_power_of_two(),
            record_capacity: keys * (versions as u64 + 1) + 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TableMeta {
    pub schema: TableSchema,
    pub index_base: u64,
    pub data_base: u64,
    bucket_bits: u32,
}

impl TableMeta {
    pub fn table_id(&self) -> u16 {
        self.schema.table_id
    }
    pub fn versions(&self) -> usize {
        self.schema.versions
    }
    pub fn cvt_len(&self) -> usize {
        cvt_len(self.schema.versions)
    }
    pub fn bucket_len(&self) -> usize {
        CVTS_PER_BUCKET * self.cvt_len()
    }
    pub fn record_stride(&self) -> u64 {
        stored_record_len(self.schema.record_len as usize) as u64
    }
    pub fn index_len(&self) -> u64 {
        self.schema.bucket_count * self.bucket_len() as u64
    }
    pub fn data_len(&self) -> u64 {
        self.schema.record_capacity * self.record_stride()
    }
    pub fn bucket_index(&self, key: LotusKey) -> u64 {
        bucket_hash(key, self.bucket_bits)
    }
    pub fn bucket_addr(&self, bucket: u64) -> u64 {
        self.index_base + bucket * self.bucket_len() as u64
    }
    pub fn cvt_addr(&self, bucket: u64, slot: usize) -> u64 {
        self.bucket_addr(bucket) + (slot * self.cvt_len()) as u64
    }
    /// Which bucket and slot a CVT address falls in.
    pub fn slot_of(&self, addr: u64) -> Option<(u64, usize)> {
        if addr < self.index_base || addr >= self.index_base + self.index_len() {
            return None;
        }
        let off = addr - self.index_base;
        let b = off / self.bucket_len() as u64;
        let within = (off % self.bucket_len() as u64) as usize;
        (within % self.cvt_len() == 0).then_some((b, within / self.cvt_len()))
    }
}

/// Fibonacci hash of the key with its shard bits dropped, so keys that share
/// a shard still spread over buckets.
pub fn bucket_hash(key: LotusKey, bits: u32) -> u64 {
    if bits == 0 {
        return 0;
    }
    (key >> 12).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> (64 - bits)
}

/// Decode the CVTs of a bucket read.
pub fn decode_bucket(bytes: &[u8], cvt_len: usize) -> Result<Vec<Cvt>, MemstoreError> {
    bytes.chunks_exact(cvt_len).map(decode_cvt).collect()
}

/// Table metadata shared by every node, plus the address plan that is
/// identical on every memory node.
#[derive(Clone, Debug)]
pub struct Catalog {
    tables: BTreeMap<u16, TableMeta>,
    mns: u16,
    replication: usize,
    next_base: u64,
    regions: Vec<(u64, u64)>,
}

const REGION_ALIGN: u64 = 4096;

impl Catalog {
    pub fn new(mns: u16, replication: usize) -> Self {
        Catalog {
            tables: BTreeMap::new(),
            mns: mns.max(1),
            replication: replication.clamp(1, mns.max(1) as usize),
            next_base: 0x10_0000,
            regions: Vec::new(),
        }
    }

    pub fn mns(&self) -> u16 {
        self.mns
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    /// Reserve a region at the same address on every memory node.
    pub fn reserve(&mut self, len: u64) -> u64 {
        let base = self.next_base;
        let len = len.max(1).div_ceil(REGION_ALIGN) * REGION_ALIGN;
        self.next_base += len + REGION_ALIGN;
        self.regions.push((base, len));
        base
    }

    pub fn add_table(&mut self, mut schema: TableSchema) -> Result<&TableMeta, MemstoreError> {
        if schema.versions < 2 {
            return Err(MemstoreError::TooFewVersions(schema.versions));
        }
        schema.bucket_count = schema.bucket_count.max(1).next_power_of_two();
        let bucket_bits = schema.bucket_count.trailing_zeros();
        let id = schema.table_id;
        let mut meta = TableMeta {
            schema,
            index_base: 0,
            data_base: 0,
            bucket_bits,
        };
        meta.index_base = self.reserve(meta.index_len());
        meta.data_base = self.reserve(meta.data_len());
        self.tables.insert(id, meta);
        Ok(&self.tables[&id])
    }

    pub fn table(&self, table_id: u16) -> Result<&TableMeta, MemstoreError> {
        self.tables.get(&table_id).ok_or(MemstoreError::UnknownTable(table_id))
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableMeta> {
        self.tables.values()
    }

    /// Primary first, then backups.
    pub fn replicas(&self, bucket: u64) -> Vec<NodeId> {
        let primary = (bucket % u64::from(self.mns)) as u16;
        (0..self.replication as u16)
            .map(|i| NodeId::memory((primary + i) % self.mns))
            .collect()
    }

    pub fn locate_bucket(&self, key: LotusKey, table_id: u16) -> Result<(NodeId, u64), MemstoreError> {
        let t = self.table(table_id)?;
        let b = t.bucket_index(key);
        Ok((self.replicas(b)[0], t.bucket_addr(b)))
    }

    /// Register every reserved region on every memory node.
    pub fn register_all(&self, fabric: &Fabric) -> Result<(), FabricError> {
        for mn in 0..self.mns {
            for &(base, len) in &self.regions {
                fabric.register_region(NodeId::memory(mn), base, len)?;
            }
        }
        Ok(())
    }
}

/// Bump allocator with a FIFO free list for one table's record area.
///
/// A recycled slot keeps the CV it last carried so the next record written
/// there is stamped with a different one.
#[derive(Clone, Debug)]
pub struct RecordAllocator {
    table_id: u16,
    base: u64,
    next: u64,
    end: u64,
    stride: u64,
    free: VecDeque<(u64, u8)>,
    live: u64,
}

impl RecordAllocator {
    pub fn new(meta: &TableMeta) -> Self {
        RecordAllocator {
            table_id: meta.table_id(),
            base: meta.data_base,
            next: meta.data_base,
            end: meta.data_base + meta.data_len(),
            stride: meta.record_stride(),
            free: VecDeque::new(),
            live: 0,
        }
    }

    /// Returns the address and the CV the new record must carry.
    pub fn alloc(&mut self) -> Result<(u64, u8), MemstoreError> {
        let slot = if let Some((addr, cv)) = self.free.pop_front() {
            (addr, next_cv(cv))
        } else if self.next + self.stride <= self.end {
            let a = self.next;
            self.next += self.stride;
            (a, 1)
        } else {
            return Err(MemstoreError::OutOfRecords(self.table_id));
        };
        self.live += 1;
        Ok(slot)
    }

    pub fn free(&mut self, addr: u64, cv: u8) {
        debug_assert!(self.live > 0);
        self.live = self.live.saturating_sub(1);
        self.free.push_back((addr, cv));
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    pub fn free_len(&self) -> usize {
        self.free.len()
    }

    /// Slots ever carved from the data area.
    pub fn carved(&self) -> u64 {
        (self.next - self.base) / self.stride
    }
}

/// CVs skip 0 so a zeroed line never matches a live cell.
pub fn next_cv(cv: u8) -> u8 {
    match cv.wrapping_add(1) {
        0 => 1,
        v => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::FabricConfig;
    use crate::sim::{Sim, SimTime};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn cell(version: u64, valid: bool, cv: u8) -> CvtCell {
        CvtCell {
            head_cv: cv,
            valid,
            tombstone: false,
            address: 0x4000 + version,
            version,
            tail_cv: cv,
        }
    }

    #[test]
    fn layout_offsets() {
        let mut c = Cvt::empty(0x1122, 7, 40, 2);
        c.header.lock_word = 0xabcd;
        c.cells[1] = CvtCell {
            head_cv: 3,
            valid: true,
            tombstone: true,
            address: 0x55,
            version: 0x99,
            tail_cv: 4,
        };
        let b = encode_cvt(&c);
        assert_eq!(b.len(), 24 + 64);
        assert_eq!(u64_at(&b, 0), 0x1122);
        assert_eq!(u16::from_le_bytes([b[8], b[9]]), 7);
        assert_eq!(b[10], 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 40);
        assert_eq!(u64_at(&b, 16), 0xabcd);
        let cell = &b[56..88];
        assert_eq!((cell[0], cell[1], cell[24]), (3, 3, 4));
        assert_eq!(u64_at(cell, 8), 0x55);
        assert_eq!(u64_at(cell, CELL_VERSION_OFFSET), 0x99);
    }

    #[test]
    fn torn_cell_is_flagged() {
        let mut c = Cvt::empty(1, 0, 8, 2);
        c.cells[0] = CvtCell {
            head_cv: 2,
            valid: true,
            tail_cv: 3,
            version: 5,
            ..Default::default()
        };
        let d = decode_cvt(&encode_cvt(&c)).unwrap();
        assert!(d.cells[0].is_torn());
        assert!(!d.cells[0].is_visible());
    }

    #[test]
    fn impossible_flags_are_malformed() {
        let mut b = encode_cvt(&Cvt::empty(1, 0, 8, 2));
        b[CVT_HEADER_LEN + 1] = TOMBSTONE_BIT;
        assert!(matches!(decode_cvt(&b), Err(MemstoreError::MalformedBytes(_))));
        let mut b = encode_cvt(&Cvt::empty(1, 0, 8, 2));
        b[11] = 1;
        assert!(decode_cvt(&b).is_err());
        assert!(decode_cvt(&b[..30]).is_err());
    }

    fn arb_cell() -> impl Strategy<Value = CvtCell> {
        (any::<u8>(), any::<bool>(), any::<bool>(), any::<u64>(), any::<u64>(), any::<u8>()).prop_map(
            |(h, valid, tomb, address, version, t)| CvtCell {
                head_cv: h,
                valid: valid || tomb,
                tombstone: tomb,
                address,
                version,
                tail_cv: t,
            },
        )
    }

    fn arb_cvt() -> impl Strategy<Value = Cvt> {
        (
            any::<u64>(),
            any::<u16>(),
            any::<bool>(),
            any::<u32>(),
            any::<u64>(),
            prop::collection::vec(arb_cell(), 2..6),
        )
            .prop_map(|(key, table_id, occupied, length, lock_word, cells)| Cvt {
                header: CvtHeader {
                    key,
                    table_id,
                    occupied,
                    length,
                    lock_word,
                },
                cells,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]
        #[test]
        fn cvt_round_trip(c in arb_cvt()) {
            let b = encode_cvt(&c);
            let d = decode_cvt(&b).unwrap();
            prop_assert_eq!(&d, &c);
            prop_assert_eq!(encode_cvt(&d), b);
        }
    }

    proptest! {
        #[test]
        fn record_round_trip(payload in prop::collection::vec(any::<u8>(), 0..400), cv in 1u8..) {
            let r = encode_record(&payload, cv);
            prop_assert_eq!(r.len(), stored_record_len(payload.len()));
            prop_assert_eq!(decode_record(&r, payload.len()), payload);
            let c = CvtCell { head_cv: cv, tail_cv: cv, valid: true, ..Default::default() };
            prop_assert!(cv_check(&r, &c));
        }

        /// Recycling never frees the newest version and never exceeds N cells.
        #[test]
        fn recycling_keeps_newest(
            versions in prop::collection::vec((1u64..1_000_000, any::<bool>()), 2..5),
            clock in 0u64..2_000_000,
            threshold in 0u64..1_000_000,
        ) {
            let mut cvt = Cvt::empty(1, 0, 8, versions.len());
            for (i, (v, valid)) in versions.iter().enumerate() {
                cvt.cells[i] = cell(*v << 16 | i as u64, *valid, 1);
            }
            let newest = cvt.newest();
            let newest_version = newest.map(|i| cvt.cells[i].version);
            let choice = select_cell_for_write(&mut cvt, clock, threshold);
            prop_assert!(choice.index < versions.len());
            prop_assert!(Some(choice.index) != newest);
            if let Some(v) = newest_version {
                prop_assert!(cvt.cells.iter().any(|c| c.valid && c.version == v));
            }
        }
    }

    #[test]
    fn fresh_stamp_is_consistent_and_tear_is_caught() {
        let mut rec = encode_record(&[7u8; 150], 0);
        let mut c = CvtCell::default();
        cv_stamp(&mut rec, &mut c, 9);
        assert!(cv_check(&rec, &c));
        rec[CACHELINE] = 10;
        assert!(!cv_check(&rec, &c));
    }

    #[test]
    fn picks_free_cell() {
        let mut cvt = Cvt::empty(1, 0, 8, 3);
        cvt.cells[0] = cell(10, true, 1);
        cvt.cells[2] = cell(20, true, 1);
        let ch = select_cell_for_write(&mut cvt, 0, u64::MAX);
        assert_eq!(ch.index, 1);
        assert!(ch.released.is_empty());
    }

    #[test]
    fn overwrites_oldest_when_full() {
        let mut cvt = Cvt::empty(1, 0, 8, 2);
        cvt.cells[0] = cell(20, true, 1);
        cvt.cells[1] = cell(10, true, 1);
        let ch = select_cell_for_write(&mut cvt, 0, 500_000_000);
        assert_eq!(ch.index, 1);
        assert!(ch.cleared.is_empty());
        assert_eq!(ch.released, vec![(0x4000 + 10, 1)]);
    }

    #[test]
    fn expired_cell_is_cleared() {
        let ms = 1_000_000u64;
        let mut cvt = Cvt::empty(1, 0, 8, 3);
        cvt.cells[0] = cell((900 * ms) << 16, true, 1);
        cvt.cells[1] = cell((100 * ms) << 16, true, 1);
        cvt.cells[2] = cell((950 * ms) << 16, true, 1);
        let ch = select_cell_for_write(&mut cvt, 1000 * ms, 500 * ms);
        assert_eq!(ch.index, 1);
        assert_eq!(ch.cleared, vec![1]);
        assert!(!cvt.cells[1].valid);
    }

    #[test]
    fn lone_old_version_survives() {
        let ms = 1_000_000u64;
        let mut cvt = Cvt::empty(1, 0, 8, 2);
        cvt.cells[0] = cell((1 * ms) << 16, true, 1);
        let ch = select_cell_for_write(&mut cvt, 1000 * ms, 500 * ms);
        assert_eq!(ch.index, 1);
        assert!(cvt.cells[0].valid);
    }

    /// Independent restatement of the bucket hash: multiply by 2^64 / phi,
    /// with 1 / phi taken as the ratio of consecutive Fibonacci numbers.
    fn oracle_bucket(key: u64, buckets: u64) -> u64 {
        let (mut a, mut b) = (0u128, 1u128);
        for _ in 0..92 {
            (a, b) = (b, a + b);
        }
        let golden = (a << 64) / b;
        let prod = ((key >> 12) as u128).wrapping_mul(golden) & (u64::MAX as u128);
        (prod >> (64 - buckets.trailing_zeros())) as u64
    }

    fn catalog() -> Catalog {
        let mut cat = Catalog::new(3, 3);
        cat.add_table(TableSchema::sized_for(1, "t", 40, 2, 1000)).unwrap();
        cat
    }

    #[test]
    fn bucket_hash_matches_oracle() {
        let cat = catalog();
        let t = cat.table(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let k: u64 = rng.random();
            let b = t.bucket_index(k);
            assert_eq!(b, oracle_bucket(k, t.schema.bucket_count));
            assert!(b < t.schema.bucket_count);
        }
    }

    #[test]
    fn locate_is_deterministic_and_colliding_keys_share_bucket() {
        let cat = catalog();
        let t = cat.table(1).unwrap();
        let k1 = 5u64 << 12 | 7;
        assert_eq!(cat.locate_bucket(k1, 1).unwrap(), cat.locate_bucket(k1, 1).unwrap());
        let target = oracle_bucket(k1, t.schema.bucket_count);
        let k2 = (6u64..)
            .map(|id| id << 12 | 7)
            .find(|k| oracle_bucket(*k, t.schema.bucket_count) == target)
            .unwrap();
        assert_ne!(k1, k2);
        assert_eq!(cat.locate_bucket(k1, 1).unwrap(), cat.locate_bucket(k2, 1).unwrap());
        assert_eq!(cat.locate_bucket(k1, 2), Err(MemstoreError::UnknownTable(2)));
    }

    #[test]
    fn default_sizing_keeps_buckets_within_capacity() {
        let keys = 20_000u64;
        let mut cat = Catalog::new(3, 3);
        let t = cat.add_table(TableSchema::sized_for(1, "t", 40, 2, keys)).unwrap().clone();
        let mut load = vec![0usize; t.schema.bucket_count as usize];
        for id in 0..keys {
            load[t.bucket_index(id << 12 | (id * 2654435761) & 0xfff) as usize] += 1;
        }
        assert!(load.iter().all(|&l| l <= CVTS_PER_BUCKET));
    }

    #[test]
    fn replicas_are_distinct() {
        let cat = catalog();
        for b in 0..10 {
            let r = cat.replicas(b);
            assert_eq!(r.len(), 3);
            assert_eq!(r[0], NodeId::memory((b % 3) as u16));
            let mut s = r.clone();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn too_few_versions_rejected() {
        let mut cat = Catalog::new(1, 1);
        assert!(cat.add_table(TableSchema::sized_for(1, "t", 8, 1, 10)).is_err());
    }

    #[test]
    fn allocator_recycles_with_new_cv() {
        let cat = catalog();
        let mut a = RecordAllocator::new(cat.table(1).unwrap());
        let (x, cvx) = a.alloc().unwrap();
        let (y, _) = a.alloc().unwrap();
        assert_ne!(x, y);
        assert_eq!(cvx, 1);
        a.free(x, cvx);
        assert_eq!(a.live(), 1);
        let (z, cvz) = a.alloc().unwrap();
        assert_eq!((z, cvz), (x, 2));
        assert_eq!(a.live(), 2);
        assert_eq!(a.carved(), 2);
        assert_eq!(next_cv(255), 1);
    }

    /// A writer overwrites a three-line record line by line while a reader
    /// fetches it at a random moment. Ground truth is the payload the
    /// reader's cell refers to.
    #[test]
    fn cacheline_race_never_passes_a_torn_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let addr = 0x1000u64;
        let len = 150;
        let old_payload = vec![0xaau8; len];
        let new_payload = vec![0x55u8; len];
        let mut flagged = 0;
        for _ in 0..10_000 {
            let sim = Sim::new();
            let fabric = Fabric::new(sim.clone(), FabricConfig::default());
            fabric.register_region(NodeId::memory(0), addr, 4096).unwrap();
            let mut old_cell = CvtCell { valid: true, ..Default::default() };
            let mut rec = encode_record(&old_payload, 0);
            cv_stamp(&mut rec, &mut old_cell, 4);
            fabric.poke(NodeId::memory(0), addr, &rec).unwrap();
            let mut new_cell = CvtCell { valid: true, ..Default::default() };
            let mut new_rec = encode_record(&new_payload, 0);
            cv_stamp(&mut new_rec, &mut new_cell, 5);

            let line_gap: u64 = rng.random_range(0..200_000);
            let start: u64 = rng.random_range(0..400_000);
            let read_at: u64 = rng.random_range(0..1_000_000);
            let holds_new = rng.random_bool(0.5);
            let (reader_cell, truth) = if holds_new {
                (new_cell, new_payload.clone())
            } else {
                (old_cell, old_payload.clone())
            };

            let f = fabric.clone();
            let s = sim.clone();
            sim.spawn(None, async move {
                s.sleep(SimTime::from_ps(start)).await;
                for (i, line) in new_rec.chunks(CACHELINE).enumerate() {
                    f.rdma_write(NodeId::memory(0), addr + (i * CACHELINE) as u64, line).await.unwrap();
                    s.sleep(SimTime::from_ps(line_gap)).await;
                }
            });
            let got = Rc::new(RefCell::new(Vec::new()));
            let (f, s, g) = (fabric.clone(), sim.clone(), got.clone());
            sim.spawn(None, async move {
                s.sleep(SimTime::from_ps(read_at)).await;
                *g.borrow_mut() = f.rdma_read(NodeId::memory(0), addr, stored_record_len(len)).await.unwrap();
            });
            sim.run();
            let bytes = got.borrow().clone();
            let ok = cv_check(&bytes, &reader_cell);
            let correct = decode_record(&bytes, len) == truth;
            assert_eq!(ok, correct, "check={ok} truth={correct}");
            flagged += usize::from(!ok);
        }
        assert!(flagged > 0);
    }
}
