//! Workload generators: a key-value store (UpdateOne / ReadOne on 40-byte
//! records) and SmallBank.

use std::rc::Rc;

use disagg_txn::cluster::Cluster;
use disagg_txn::driver::TxnSource;
use disagg_txn::memstore::{payload_value, payload_with_value, LotusKey, TableSchema};
use disagg_txn::sharding::{make_key, TableKeySpec};
use disagg_txn::txn::{TxnContext, TxnSpec, WriteIntent, Writes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

pub const KVS_TABLE: u16 = 0;
pub const KVS_RECORD_LEN: u32 = 40;
pub const SAVINGS: u16 = 1;
pub const CHECKING: u16 = 2;
pub const ACCOUNT_LEN: u32 = 16;
pub const INITIAL_BALANCE: i64 = 10_000;

pub const KIND_UPDATE_ONE: u8 = 1;
pub const KIND_READ_ONE: u8 = 2;
pub const KIND_BALANCE: u8 = 10;
pub const KIND_DEPOSIT_CHECKING: u8 = 11;
pub const KIND_TRANSACT_SAVINGS: u8 = 12;
pub const KIND_AMALGAMATE: u8 = 13;
pub const KIND_WRITE_CHECK: u8 = 14;
pub const KIND_SEND_PAYMENT: u8 = 15;

pub fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_UPDATE_ONE => "UpdateOne",
        KIND_READ_ONE => "ReadOne",
        KIND_BALANCE => "Balance",
        KIND_DEPOSIT_CHECKING => "DepositChecking",
        KIND_TRANSACT_SAVINGS => "TransactSavings",
        KIND_AMALGAMATE => "Amalgamate",
        KIND_WRITE_CHECK => "WriteCheck",
        KIND_SEND_PAYMENT => "SendPayment",
        _ => "Custom",
    }
}

/// Draws key indices in `0..n`, uniformly or Zipf-distributed. Ranks are
/// scattered over the key space so hot keys do not cluster in one shard.
#[derive(Clone, Debug)]
pub struct KeyDist {
    n: u64,
    zipf: Option<Zipf<f64>>,
    stride: u64,
}

impl KeyDist {
    pub fn new(n: u64, theta: f64) -> Self {
        assert!(n > 0, "empty key space");
        let zipf = (theta > 0.0).then(|| Zipf::new(n as f64, theta).expect("valid zipf parameters"));
        let mut stride = 0x9E37_79B1 % n.max(2);
        while stride == 0 || gcd(stride, n) != 1 {
            stride += 1;
        }
        KeyDist { n, zipf, stride }
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Hotness rank of the sample (0 = hottest), before scattering.
    pub fn sample_rank<R: Rng>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            Some(z) => (z.sample(rng) as u64).clamp(1, self.n) - 1,
            None => rng.random_range(0..self.n),
        }
    }

    pub fn scatter(&self, rank: u64) -> u64 {
        ((rank as u128 * self.stride as u128) % self.n as u128) as u64
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        self.scatter(self.sample_rank(rng))
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn kvs_key_spec() -> TableKeySpec {
    TableKeySpec::new(KVS_TABLE, 1, &[("id", 40)], Some(0), 0).expect("fits")
}

pub fn account_key_spec(table: u16) -> TableKeySpec {
    TableKeySpec::new(table, table as u8 + 1, &[("account", 40)], Some(0), 0).expect("fits")
}

pub fn kvs_key(i: u64) -> LotusKey {
    make_key(&kvs_key_spec(), &[i]).expect("id in domain")
}

pub fn savings_key(a: u64) -> LotusKey {
    make_key(&account_key_spec(SAVINGS), &[a]).expect("id in domain")
}

pub fn checking_key(a: u64) -> LotusKey {
    make_key(&account_key_spec(CHECKING), &[a]).expect("id in domain")
}

/// A workload: its tables, its initial data and its transaction stream.
pub trait Workload {
    fn tables(&self, versions: usize) -> Vec<TableSchema>;
    fn load(&self, cluster: &Cluster);
    fn source(&self, seed: u64) -> Box<dyn TxnSource>;
}

// ---- KVS ----------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Kvs {
    pub keys: u64,
    pub rw_ratio: f64,
    pub zipf: f64,
}

impl Workload for Kvs {
    fn tables(&self, versions: usize) -> Vec<TableSchema> {
        vec![TableSchema::sized_for(KVS_TABLE, "kvs", KVS_RECORD_LEN, versions, self.keys)]
    }

    fn load(&self, cluster: &Cluster) {
        for i in 0..self.keys {
            cluster
                .load(KVS_TABLE, kvs_key(i), &payload_with_value(KVS_RECORD_LEN as usize, 0))
                .expect("load kvs record");
        }
    }

    fn source(&self, seed: u64) -> Box<dyn TxnSource> {
        let dist = KeyDist::new(self.keys, self.zipf);
        let rw = self.rw_ratio;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Box::new(move || {
            let k = kvs_key(dist.sample(&mut rng));
            if rng.random_bool(rw) {
                TxnSpec {
                    kind: KIND_UPDATE_ONE,
                    ro: vec![],
                    rw: vec![(KVS_TABLE, k, WriteIntent::Update)],
                    logic: None,
                }
            } else {
                TxnSpec {
                    kind: KIND_READ_ONE,
                    ro: vec![(KVS_TABLE, k)],
                    rw: vec![],
                    logic: None,
                }
            }
        })
    }
}

// ---- SmallBank -------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SmallBank {
    pub accounts: u64,
    pub rw_ratio: f64,
    pub zipf: f64,
}

fn bal(ctx: &TxnContext, key: LotusKey) -> i64 {
    ctx.get(key).map(payload_value).unwrap_or(0)
}

fn acct(v: i64) -> Vec<u8> {
    payload_with_value(ACCOUNT_LEN as usize, v)
}

/// Read-write transaction types with their relative weights.
const RW_MIX: [(u8, u32); 5] = [
    (KIND_DEPOSIT_CHECKING, 15),
    (KIND_TRANSACT_SAVINGS, 15),
    (KIND_AMALGAMATE, 15),
    (KIND_WRITE_CHECK, 15),
    (KIND_SEND_PAYMENT, 25),
];

impl SmallBank {
    pub fn initial_total(&self) -> i64 {
        2 * INITIAL_BALANCE * self.accounts as i64
    }

    /// Sum of every balance as committed in memory.
    pub fn audit_total(&self, cluster: &Cluster) -> Option<i64> {
        let mut total = 0i64;
        for a in 0..self.accounts {
            for k in [savings_key(a), checking_key(a)] {
                let t = if k == savings_key(a) { SAVINGS } else { CHECKING };
                total += payload_value(&cluster.peek_committed(t, k)?.1);
            }
        }
        Some(total)
    }

    pub fn txn(kind: u8, a: u64, b: u64, amount: i64) -> TxnSpec {
        let (sa, ca, cb) = (savings_key(a), checking_key(a), checking_key(b));
        let up = WriteIntent::Update;
        let (ro, rw, logic): (Vec<_>, Vec<_>, disagg_txn::txn::TxnLogic) = match kind {
            KIND_BALANCE => (vec![(SAVINGS, sa), (CHECKING, ca)], vec![], Rc::new(|_: &TxnContext| Writes::default())),
            KIND_DEPOSIT_CHECKING => (
                vec![],
                vec![(CHECKING, ca, up)],
                Rc::new(move |c: &TxnContext| Writes {
                    values: vec![(ca, acct(bal(c, ca) + amount))],
                    app_delta: amount,
                }),
            ),
            KIND_TRANSACT_SAVINGS => (
                vec![],
                vec![(SAVINGS, sa, up)],
                Rc::new(move |c: &TxnContext| Writes {
                    values: vec![(sa, acct(bal(c, sa) + amount))],
                    app_delta: amount,
                }),
            ),
            KIND_AMALGAMATE => (
                vec![],
                vec![(SAVINGS, sa, up), (CHECKING, ca, up), (CHECKING, cb, up)],
                Rc::new(move |c: &TxnContext| {
                    let moved = bal(c, sa) + bal(c, ca);
                    Writes {
                        values: vec![(sa, acct(0)), (ca, acct(0)), (cb, acct(bal(c, cb) + moved))],
                        app_delta: 0,
                    }
                }),
            ),
            KIND_WRITE_CHECK => (
                vec![(SAVINGS, sa)],
                vec![(CHECKING, ca, up)],
                Rc::new(move |c: &TxnContext| {
                    let penalty = i64::from(bal(c, sa) + bal(c, ca) < amount);
                    Writes {
                        values: vec![(ca, acct(bal(c, ca) - amount - penalty))],
                        app_delta: -amount - penalty,
                    }
                }),
            ),
            KIND_SEND_PAYMENT => (
                vec![],
                vec![(CHECKING, ca, up), (CHECKING, cb, up)],
                Rc::new(move |c: &TxnContext| {
                    let (x, y) = (bal(c, ca), bal(c, cb));
                    let amt = if x >= amount { amount } else { 0 };
                    Writes {
                        values: vec![(ca, acct(x - amt)), (cb, acct(y + amt))],
                        app_delta: 0,
                    }
                }),
            ),
            _ => panic!("unknown SmallBank transaction kind {kind}"),
        };
        TxnSpec {
            kind,
            ro,
            rw,
            logic: Some(logic),
        }
    }
}

impl Workload for SmallBank {
    fn tables(&self, versions: usize) -> Vec<TableSchema> {
        vec![
            TableSchema::sized_for(SAVINGS, "savings", ACCOUNT_LEN, versions, self.accounts),
            TableSchema::sized_for(CHECKING, "checking", ACCOUNT_LEN, versions, self.accounts),
        ]
    }

    fn load(&self, cluster: &Cluster) {
        for a in 0..self.accounts {
            cluster.load(SAVINGS, savings_key(a), &acct(INITIAL_BALANCE)).expect("load savings");
            cluster.load(CHECKING, checking_key(a), &acct(INITIAL_BALANCE)).expect("load checking");
        }
    }

    fn source(&self, seed: u64) -> Box<dyn TxnSource> {
        let dist = KeyDist::new(self.accounts, self.zipf);
        let rw = self.rw_ratio;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: u32 = RW_MIX.iter().map(|m| m.1).sum();
        Box::new(move || {
            let a = dist.sample(&mut rng);
            let mut b = dist.sample(&mut rng);
            while b == a {
                b = dist.sample(&mut rng);
            }
            let amount = rng.random_range(1..=100);
            let kind = if rng.random_bool(rw) {
                let mut pick = rng.random_range(0..total);
                let mut kind = RW_MIX[0].0;
                for (k, w) in RW_MIX {
                    if pick < w {
                        kind = k;
                        break;
                    }
                    pick -= w;
                }
                kind
            } else {
                KIND_BALANCE
            };
            SmallBank::txn(kind, a, b, amount)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_a_permutation() {
        for n in [1u64, 2, 7, 100, 4096, 10_007] {
            let d = KeyDist::new(n, 0.0);
            let mut seen: Vec<u64> = (0..n).map(|r| d.scatter(r)).collect();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>(), "n={n}");
        }
    }

    #[test]
    fn zipf_favours_low_ranks() {
        let d = KeyDist::new(1000, 0.99);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = vec![0u32; 1000];
        for _ in 0..100_000 {
            hits[d.sample_rank(&mut rng) as usize] += 1;
        }
        // P(rank 1) / P(rank 10) = 10^0.99 for a Zipf law
        let ratio = hits[0] as f64 / hits[9] as f64;
        assert!((ratio - 10f64.powf(0.99)).abs() < 1.5, "ratio {ratio}");
        assert!(hits.iter().all(|h| *h > 0) || hits[999] == 0);
    }

    #[test]
    fn uniform_covers_the_space() {
        let d = KeyDist::new(50, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = [0u32; 50];
        for _ in 0..50_000 {
            hits[d.sample(&mut rng) as usize] += 1;
        }
        assert!(hits.iter().all(|h| (800..1200).contains(h)));
    }

    #[test]
    fn smallbank_accounts_share_a_shard() {
        use disagg_txn::sharding::shard_of;
        for a in [0u64, 1, 4095, 4096, 123_456] {
            assert_eq!(shard_of(savings_key(a)), shard_of(checking_key(a)));
            assert_ne!(savings_key(a), checking_key(a));
        }
    }
}
