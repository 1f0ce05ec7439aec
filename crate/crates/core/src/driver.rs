//! Closed-loop clients that feed transactions to a running cluster.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{Cluster, Stats};
use crate::sim::{join_all, SimTime};
use crate::txn::history::Outcome;
use crate::txn::{AbortReason, TxnSpec};

/// Produces the next transaction a client should run.
pub trait TxnSource {
    fn next_txn(&mut self) -> TxnSpec;
}

impl<F: FnMut() -> TxnSpec> TxnSource for F {
    fn next_txn(&mut self) -> TxnSpec {
        self()
    }
}

impl TxnSource for Box<dyn TxnSource> {
    fn next_txn(&mut self) -> TxnSpec {
        (**self).next_txn()
    }
}

#[derive(Clone, Debug)]
pub struct DriverConfig {
    pub clients: usize,
    /// Attempt budget across all clients.
    pub txns: Option<u64>,
    pub duration: Option<SimTime>,
    pub backoff_base: SimTime,
    pub backoff_cap: SimTime,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            clients: 24,
            txns: Some(10_000),
            duration: None,
            backoff_base: SimTime::from_us(5),
            backoff_cap: SimTime::from_us(500),
        }
    }
}

/// Aborts that would repeat on every retry.
pub fn retryable(r: AbortReason) -> bool {
    !matches!(
        r,
        AbortReason::KeyNotFound
            | AbortReason::DuplicateKey
            | AbortReason::BucketFull
            | AbortReason::LogFull
            | AbortReason::OutOfMemory
    )
}

const FREE_RETRIES: u32 = 3;

/// Start the cluster and run clients until the budget or the duration runs
/// out. Returns a snapshot of the cluster statistics.
pub fn run_workload<S: TxnSource + 'static>(cluster: &Rc<Cluster>, source: S, cfg: &DriverConfig) -> Stats {
    assert!(
        cfg.txns.is_some() || cfg.duration.is_some(),
        "a workload needs a transaction budget or a duration"
    );
    cluster.start();
    let source = Rc::new(RefCell::new(source));
    let budget = Rc::new(Cell::new(cfg.txns.unwrap_or(u64::MAX)));
    let end = cfg.duration.map(|d| cluster.now() + d);
    let clients: Vec<_> = (0..cfg.clients)
        .map(|i| {
            let cl = cluster.clone();
            let source = source.clone();
            let budget = budget.clone();
            let cfg = cfg.clone();
            async move {
                let mut rng = ChaCha8Rng::seed_from_u64(cl.config.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                'txn: loop {
                    let spec = source.borrow_mut().next_txn();
                    let mut failures = 0u32;
                    loop {
                        if end.is_some_and(|e| cl.now() >= e) || budget.get() == 0 {
                            break 'txn;
                        }
                        budget.set(budget.get() - 1);
                        let res = cl.submit_routed(&spec, &mut rng).await;
                        match res.outcome {
                            Outcome::Committed => break,
                            Outcome::Aborted(r) if !retryable(r) => break,
                            Outcome::Aborted(_) => {
                                failures += 1;
                                if failures > FREE_RETRIES {
                                    let exp = (failures - FREE_RETRIES - 1).min(20);
                                    let d = (cfg.backoff_base.as_ps() << exp).min(cfg.backoff_cap.as_ps());
                                    cl.sim.sleep(SimTime::from_ps(d)).await;
                                } else if res.cn == u16::MAX || !cl.node(res.cn).is_ready() {
                                    // routed to a node that is down: give it a moment
                                    cl.sim.sleep(cfg.backoff_base).await;
                                }
                            }
                        }
                    }
                }
            }
        })
        .collect();
    cluster.sim.block_on(async move {
        join_all(clients).await;
    });
    let st = cluster.stats.borrow().clone();
    st
}
