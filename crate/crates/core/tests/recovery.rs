use std::collections::BTreeMap;
use std::rc::Rc;

use disagg_txn::cluster::{Cluster, ClusterConfig};
use disagg_txn::driver::{run_workload, DriverConfig};
use disagg_txn::memstore::{payload_value, payload_with_value, TableSchema};
use disagg_txn::sharding::{make_key, TableKeySpec};
use disagg_txn::sim::SimTime;
use disagg_txn::txn::history::{OpKind, Outcome};
use disagg_txn::txn::{CrashStep, TxnSpec, WriteIntent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(cfg: ClusterConfig, keys: u64) -> (Rc<Cluster>, Vec<u64>) {
    let cl = Cluster::new(cfg, vec![TableSchema::sized_for(0, "t", 40, 4, keys)]).unwrap();
    let spec = TableKeySpec::new(0, 1, &[("id", 32)], None, 0).unwrap();
    let ks: Vec<u64> = (0..keys).map(|i| make_key(&spec, &[i]).unwrap()).collect();
    for &k in &ks {
        cl.load(0, k, &payload_with_value(40, 0)).unwrap();
    }
    (cl, ks)
}

fn source(ks: Vec<u64>, seed: u64) -> impl FnMut() -> TxnSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || {
        let a = rng.random_range(0..ks.len());
        let mut b = rng.random_range(0..ks.len());
        while b == a {
            b = rng.random_range(0..ks.len());
        }
        TxnSpec { kind: 1, ro: vec![], rw: vec![(0, ks[a], WriteIntent::Update), (0, ks[b], WriteIntent::Update)], logic: None }
    }
}

/// Every key's value equals the number of committed writes to it, on all replicas.
fn check_counters(cl: &Cluster, ks: &[u64]) {
    assert!(cl.history.borrow().pending_ids().is_empty(), "unresolved commits");
    let mut writes: BTreeMap<u64, i64> = BTreeMap::new();
    for r in cl.history.borrow().records() {
        if r.outcome == Outcome::Committed {
            for op in &r.ops {
                if let OpKind::Write { .. } = op.kind {
                    *writes.entry(op.key).or_default() += 1;
                }
            }
        }
    }
    for &k in ks {
        let b = cl.replica_buckets(0, k);
        assert!(b.windows(2).all(|w| w[0] == w[1]), "replicas differ for {k:x}");
        let (_, p) = cl.peek_committed(0, k).expect("replicas agree");
        assert_eq!(payload_value(&p), writes.get(&k).copied().unwrap_or(0), "key {k:x}");
    }
}

#[test]
fn timed_crash_recovers() {
    let (cl, ks) = setup(ClusterConfig::default(), 300);
    cl.schedule_crash(1, SimTime::from_ms(5));
    let cfg = DriverConfig { txns: None, duration: Some(SimTime::from_ms(40)), ..Default::default() };
    let st = run_workload(&cl, source(ks.clone(), 3), &cfg);
    cl.settle(SimTime::from_ms(20));
    println!("{:?} {:?}", st.aborts, cl.stats.borrow().recoveries);
    assert_eq!(cl.stats.borrow().recoveries.len(), 1);
    assert!(cl.node(1).is_ready());
    check_counters(&cl, &ks);
    cl.shutdown();
}

#[test]
fn crash_at_every_commit_step() {
    for step in CrashStep::ALL {
        let (cl, ks) = setup(ClusterConfig::default(), 300);
        cl.set_crash_step(1, step, 20);
        let cfg = DriverConfig { txns: None, duration: Some(SimTime::from_ms(30)), ..Default::default() };
        run_workload(&cl, source(ks.clone(), 5), &cfg);
        cl.settle(SimTime::from_ms(20));
        let rec = cl.stats.borrow().recoveries.clone();
        println!("{step:?}: {rec:?}");
        assert_eq!(rec.len(), 1, "{step:?}");
        check_counters(&cl, &ks);
        cl.shutdown();
    }
}
