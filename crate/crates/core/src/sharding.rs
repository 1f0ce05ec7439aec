//! Key construction, shard ownership and routing, and overload detection.

use rand::Rng;
use thiserror::Error;

use crate::locktable::{mix64, SHARDS};
use crate::memstore::LotusKey;

pub const SHARD_BITS: u32 = 12;
pub const SHARD_MASK: u64 = (1 << SHARD_BITS) - 1;
/// Bits above the shard number available to field packings.
pub const PACK_BITS: u32 = 44;
pub const TAG_SHIFT: u32 = 56;

pub fn shard_of(key: LotusKey) -> u16 {
    (key & SHARD_MASK) as u16
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("field {field} value {value} does not fit in {bits} bits")]
    FieldOutOfDomain { field: String, value: u64, bits: u32 },
    #[error("expected {expected} fields, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("packing uses {0} bits, more than the {PACK_BITS} available")]
    TooWide(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub bits: u32,
}

/// How a table's primary-key fields become a 64-bit key.
///
/// Fields are packed upward from bit 12 in declaration order, the table tag
/// sits in the top byte, and the low 12 bits hold the critical field (or a
/// seeded hash when there is none).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableKeySpec {
    pub table_id: u16,
    pub tag: u8,
    pub fields: Vec<FieldSpec>,
    pub critical: Option<usize>,
    pub seed: u64,
}

impl TableKeySpec {
    pub fn new(table_id: u16, tag: u8, fields: &[(&str, u32)], critical: Option<usize>, seed: u64) -> Result<Self, KeyError> {
        let total: u32 = fields.iter().map(|f| f.1).sum();
        if total > PACK_BITS {
            return Err(KeyError::TooWide(total));
        }
        Ok(TableKeySpec {
            table_id,
            tag,
            fields: fields
                .iter()
                .map(|(n, b)| FieldSpec {
                    name: n.to_string(),
                    bits: *b,
                })
                .collect(),
            critical,
            seed,
        })
    }
}

pub fn make_key(spec: &TableKeySpec, values: &[u64]) -> Result<LotusKey, KeyError> {
    if values.len() != spec.fields.len() {
        return Err(KeyError::Arity {
            expected: spec.fields.len(),
            got: values.len(),
        });
    }
    let mut packed = 0u64;
    let mut shift = 0;
    for (f, &v) in spec.fields.iter().zip(values) {
        if f.bits < 64 && v >> f.bits != 0 {
            return Err(KeyError::FieldOutOfDomain {
                field: f.name.clone(),
                value: v,
                bits: f.bits,
            });
        }
        packed |= v << shift;
        shift += f.bits;
    }
    let shard = match spec.critical {
        Some(i) => values[i] & SHARD_MASK,
        None => mix64(packed ^ spec.seed.rotate_left(17)) & SHARD_MASK,
    };
    Ok(u64::from(spec.tag) << TAG_SHIFT | packed << SHARD_BITS | shard)
}

/// Table tag stored in a key.
pub fn key_tag(key: LotusKey) -> u8 {
    (key >> TAG_SHIFT) as u8
}

/// Shard number to owning compute node, plus a version that moves on every
/// transfer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardMap {
    owners: Vec<u16>,
    version: u64,
}

impl ShardMap {
    /// Contiguous, near-equal shard ranges per node.
    pub fn even(cns: u16) -> Self {
        let cns = cns.max(1) as usize;
        let owners = (0..SHARDS).map(|s| (s * cns / SHARDS) as u16).collect();
        ShardMap { owners, version: 1 }
    }

    pub fn owner(&self, shard: u16) -> u16 {
        self.owners[shard as usize]
    }

    pub fn owner_of_key(&self, key: LotusKey) -> u16 {
        self.owner(shard_of(key))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn shards_of(&self, cn: u16) -> Vec<u16> {
        (0..SHARDS as u16).filter(|s| self.owner(*s) == cn).collect()
    }

    pub fn transfer(&mut self, shard: u16, to: u16) {
        self.owners[shard as usize] = to;
        self.version += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TxnRoute {
    pub read_only: bool,
    pub first_key: LotusKey,
}

/// Read-only transactions go to a uniformly chosen node; read-write
/// transactions go to the owner of their first key's shard.
pub fn route_txn<R: Rng>(map: &ShardMap, live: &[u16], route: TxnRoute, rng: &mut R) -> u16 {
    if route.read_only && !live.is_empty() {
        live[rng.random_range(0..live.len())]
    } else {
        map.owner_of_key(route.first_key)
    }
}

/// Latency ratio above the cluster average that counts as overloaded.
pub const OVERLOAD_FACTOR: f64 = 1.5;
pub const OVERLOAD_INTERVALS: usize = 3;

/// `intervals` holds per-interval, per-node average latencies, oldest
/// first; `None` means the node reported nothing. A node is overloaded when
/// it exceeded 1.5x the average of reporting nodes in each of the last
/// three intervals. Among several, the one with the highest latest ratio
/// wins.
pub fn detect_overload(intervals: &[Vec<Option<f64>>]) -> Option<u16> {
    if intervals.len() < OVERLOAD_INTERVALS {
        return None;
    }
    let recent = &intervals[intervals.len() - OVERLOAD_INTERVALS..];
    let nodes = recent.iter().map(|v| v.len()).min()?;
    let ratio = |iv: &Vec<Option<f64>>, n: usize| -> Option<f64> {
        let vals: Vec<f64> = iv.iter().flatten().copied().collect();
        if vals.len() < 2 {
            return None;
        }
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        let mine = iv[n]?;
        (avg > 0.0).then(|| mine / avg)
    };
    let mut best: Option<(u16, f64)> = None;
    for n in 0..nodes {
        let all = recent
            .iter()
            .all(|iv| ratio(iv, n).is_some_and(|r| r > OVERLOAD_FACTOR));
        if all {
            let r = ratio(recent.last().unwrap(), n).unwrap();
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((n as u16, r));
            }
        }
    }
    best.map(|(n, _)| n)
}

/// Node with the lowest latest latency among those that reported, skipping
/// `exclude`.
pub fn least_loaded(latest: &[Option<f64>], exclude: u16, live: &[u16]) -> Option<u16> {
    latest
        .iter()
        .enumerate()
        .filter(|(i, v)| *i as u16 != exclude && v.is_some() && live.contains(&(*i as u16)))
        .min_by(|a, b| a.1.unwrap().total_cmp(&b.1.unwrap()))
        .map(|(i, _)| i as u16)
}

/// Shard with the most lock requests among `owned`, ties to the lowest.
pub fn hottest_shard(hits: &[u64], owned: &[u16]) -> Option<u16> {
    owned
        .iter()
        .copied()
        .filter(|s| hits[*s as usize] > 0)
        .max_by_key(|s| (hits[*s as usize], std::cmp::Reverse(*s)))
}

/// Per-node load record published to memory each interval (32 bytes):
/// `interval u64, avg_latency_ns u64, committed u64, hottest_shard u16,
/// reported u8, reserved 5 B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadRecord {
    pub interval: u64,
    pub avg_latency_ns: u64,
    pub committed: u64,
    pub hottest_shard: u16,
    pub reported: bool,
}

pub const LOAD_RECORD_LEN: usize = 32;

impl LoadRecord {
    pub fn encode(&self) -> [u8; LOAD_RECORD_LEN] {
        let mut b = [0u8; LOAD_RECORD_LEN];
        b[0..8].copy_from_slice(&self.interval.to_le_bytes());
        b[8..16].copy_from_slice(&self.avg_latency_ns.to_le_bytes());
        b[16..24].copy_from_slice(&self.committed.to_le_bytes());
        b[24..26].copy_from_slice(&self.hottest_shard.to_le_bytes());
        b[26] = u8::from(self.reported);
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        LoadRecord {
            interval: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            avg_latency_ns: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            committed: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            hottest_shard: u16::from_le_bytes([b[24], b[25]]),
            reported: b[26] != 0,
        }
    }
}

/// Ownership hand-off message: `version u8 = 1, shard u16, map_version u64`.
pub fn encode_transfer(shard: u16, map_version: u64) -> Vec<u8> {
    let mut b = vec![1u8];
    b.extend_from_slice(&shard.to_le_bytes());
    b.extend_from_slice(&map_version.to_le_bytes());
    b
}

pub fn decode_transfer(b: &[u8]) -> Option<(u16, u64)> {
    if b.len() != 11 || b[0] != 1 {
        return None;
    }
    Some((u16::from_le_bytes([b[1], b[2]]), u64::from_le_bytes(b[3..11].try_into().unwrap())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tpcc() -> TableKeySpec {
        TableKeySpec::new(3, 3, &[("w_id", 16), ("d_id", 8), ("c_id", 16)], Some(0), 0).unwrap()
    }

    #[test]
    fn warehouse_is_the_shard() {
        assert_eq!(shard_of(make_key(&tpcc(), &[5, 1, 1]).unwrap()), 5);
        assert_eq!(shard_of(make_key(&tpcc(), &[4101, 1, 1]).unwrap()), 5);
    }

    #[test]
    fn out_of_domain_field() {
        let e = make_key(&tpcc(), &[1, 300, 1]).unwrap_err();
        assert!(matches!(e, KeyError::FieldOutOfDomain { bits: 8, .. }));
        assert!(make_key(&tpcc(), &[1]).is_err());
        assert!(TableKeySpec::new(0, 0, &[("a", 40), ("b", 8)], None, 0).is_err());
    }

    #[test]
    fn account_keys_are_injective() {
        let spec = TableKeySpec::new(1, 1, &[("acct", 40)], Some(0), 0).unwrap();
        let other = TableKeySpec::new(2, 2, &[("acct", 40)], Some(0), 0).unwrap();
        let mut seen = HashSet::new();
        for id in 0..200_000u64 {
            assert!(seen.insert(make_key(&spec, &[id]).unwrap()));
            assert!(seen.insert(make_key(&other, &[id]).unwrap()));
        }
    }

    #[test]
    fn hashed_shard_is_seeded() {
        let a = TableKeySpec::new(1, 1, &[("id", 30)], None, 1).unwrap();
        let b = TableKeySpec::new(1, 1, &[("id", 30)], None, 2).unwrap();
        let ka: Vec<_> = (0..64).map(|i| shard_of(make_key(&a, &[i]).unwrap())).collect();
        let kb: Vec<_> = (0..64).map(|i| shard_of(make_key(&b, &[i]).unwrap())).collect();
        assert_ne!(ka, kb);
        assert_eq!(ka, (0..64).map(|i| shard_of(make_key(&a, &[i]).unwrap())).collect::<Vec<_>>());
    }

    #[test]
    fn even_map_is_total_and_contiguous() {
        let m = ShardMap::even(3);
        let counts: Vec<usize> = (0..3).map(|c| m.shards_of(c).len()).collect();
        assert_eq!(counts.iter().sum::<usize>(), SHARDS);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        for s in 1..SHARDS as u16 {
            assert!(m.owner(s) >= m.owner(s - 1));
        }
    }

    #[test]
    fn rw_goes_to_owner_and_follows_transfer() {
        let mut m = ShardMap::even(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let key = 9u64 << 12 | 7;
        let r = TxnRoute {
            read_only: false,
            first_key: key,
        };
        assert_eq!(route_txn(&m, &[0, 1, 2], r, &mut rng), m.owner(7));
        let v = m.version();
        m.transfer(7, 2);
        assert_eq!(m.version(), v + 1);
        assert_eq!(route_txn(&m, &[0, 1, 2], r, &mut rng), 2);
    }

    #[test]
    fn read_only_routing_is_uniform() {
        let m = ShardMap::even(3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0u32; 3];
        for i in 0..n {
            let r = TxnRoute {
                read_only: true,
                first_key: i,
            };
            counts[route_txn(&m, &[0, 1, 2], r, &mut rng) as usize] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    fn iv(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().map(|x| Some(*x)).collect()
    }

    #[test]
    fn overload_needs_three_consecutive_intervals() {
        // node 0 at 1.6x the average: a = 1.6 * (a + 2) / 3  =>  a = 2.2857
        let hot = 3.2 / 1.4;
        let avg = (hot + 2.0) / 3.0;
        assert!(hot / avg > 1.5);
        let h = vec![iv(&[hot, 1.0, 1.0]); 3];
        assert_eq!(detect_overload(&h), Some(0));
        let mid = 1.2 * 2.0 / 1.8;
        let h2 = vec![iv(&[hot, 1.0, 1.0]), iv(&[mid, 1.0, 1.0]), iv(&[hot, 1.0, 1.0])];
        assert_eq!(detect_overload(&h2), None);
        assert_eq!(detect_overload(&vec![iv(&[1.0, 1.0, 1.0]); 5]), None);
        assert_eq!(detect_overload(&h[..2]), None);
    }

    #[test]
    fn silent_nodes_are_left_out_of_the_average() {
        let h = vec![vec![Some(10.0), Some(1.0), Some(1.0), None]; 3];
        assert_eq!(detect_overload(&h), Some(0));
    }

    #[test]
    fn helper_choices() {
        assert_eq!(least_loaded(&[Some(5.0), Some(1.0), Some(2.0)], 1, &[0, 1, 2]), Some(2));
        let mut hits = vec![0u64; SHARDS];
        hits[4] = 10;
        hits[9] = 12;
        assert_eq!(hottest_shard(&hits, &[4, 9, 11]), Some(9));
        assert_eq!(hottest_shard(&hits, &[4]), Some(4));
        assert_eq!(hottest_shard(&hits, &[1]), None);
    }

    #[test]
    fn record_codecs() {
        let r = LoadRecord {
            interval: 3,
            avg_latency_ns: 12345,
            committed: 99,
            hottest_shard: 4095,
            reported: true,
        };
        assert_eq!(LoadRecord::decode(&r.encode()), r);
        assert_eq!(decode_transfer(&encode_transfer(77, 5)), Some((77, 5)));
        assert_eq!(decode_transfer(&[2; 11]), None);
    }
}
