use disagg_bench::config::{BenchConfig, Mode, WorkloadKind};
use disagg_bench::runner::{run_and_keep, state_checksum};
use disagg_bench::workload::{checking_key, kvs_key, savings_key, CHECKING, KVS_TABLE, SAVINGS};

fn keys(cfg: &BenchConfig) -> Vec<(u16, u64)> {
    let n = cfg.default_keys();
    match cfg.workload {
        WorkloadKind::Kvs => (0..n).map(|i| (KVS_TABLE, kvs_key(i))).collect(),
        WorkloadKind::SmallBank => (0..n)
            .flat_map(|a| [(SAVINGS, savings_key(a)), (CHECKING, checking_key(a))])
            .collect(),
    }
}

/// One client runs every transaction to completion in the same order in
/// both modes, so the committed state must be identical.
#[test]
fn both_lock_placements_reach_the_same_state() {
    for workload in [WorkloadKind::Kvs, WorkloadKind::SmallBank] {
        let mut sums = Vec::new();
        for mode in [Mode::Lotus, Mode::MnLock] {
            let cfg = BenchConfig {
                workload,
                mode,
                keys: Some(500),
                txns: Some(3000),
                clients: Some(1),
                seed: 21,
                ..Default::default()
            };
            let (cl, m) = run_and_keep(&cfg).unwrap();
            assert_eq!(m.aborted, 0, "{workload:?} {mode:?}: {:?}", m.aborts);
            sums.push(state_checksum(&cl, &keys(&cfg)));
            cl.shutdown();
        }
        assert_eq!(sums[0], sums[1], "{workload:?}");
    }
}

#[test]
fn mn_lock_atomics_match_lock_operations() {
    let cfg = BenchConfig {
        workload: WorkloadKind::SmallBank,
        mode: Mode::MnLock,
        keys: Some(200),
        txns: Some(4000),
        ..Default::default()
    };
    let (cl, m) = run_and_keep(&cfg).unwrap();
    assert!(m.mn_lock_attempts > m.mn_lock_acquired, "contention should cause failed CAS");
    assert_eq!(m.mn_atomics, m.mn_lock_attempts + m.mn_lock_releases);
    // releases count CAS operations; a shared release retries when the reader count moved
    assert!(m.mn_lock_releases >= m.mn_lock_acquired);
    cl.shutdown();
}
