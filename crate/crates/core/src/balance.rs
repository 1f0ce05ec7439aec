//! Load monitoring and shard hand-off between compute nodes.
//!
//! Each node publishes its average latency per interval. A node that stays
//! well above the cluster average gives its hottest shard to the least
//! loaded node: it stops granting locks there, waits for holders to drain
//! (aborting stragglers), then hands ownership over.

use std::collections::BTreeSet;
use std::rc::Rc;

use crate::cluster::{Cluster, TxnPhase, SVC_TRANSFER};
use crate::fabric::NodeId;
use crate::sharding::{
    decode_transfer, detect_overload, encode_transfer, hottest_shard, least_loaded, LoadRecord, LOAD_RECORD_LEN,
    OVERLOAD_INTERVALS,
};
use crate::sim::SimTime;
use crate::txn::AbortReason;

const MN: &str = "memory nodes do not fail";
const DRAIN_POLL: SimTime = SimTime::from_us(50);
/// Delay between publishing a load record and reading everyone's.
const COLLECT_DELAY: SimTime = SimTime::from_ms(1);
/// Committing holders are waited out for at most this many drain timeouts.
const COMMIT_GRACE: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReshardOutcome {
    Ok,
    TransferTimeout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReshardEvent {
    pub shard: u16,
    pub from: u16,
    pub to: u16,
    pub started: SimTime,
    pub finished: SimTime,
    /// Lock holders aborted because they outlived the drain timeout.
    pub aborted_holders: u64,
    pub outcome: ReshardOutcome,
    pub map_version: u64,
}

pub fn spawn_monitor(cluster: &Rc<Cluster>, cn: u16) {
    let cl = cluster.clone();
    cluster.sim.spawn(Some(cn), async move {
        let mn0 = NodeId::memory(0);
        let n = cl.config.cns as usize;
        let iv = cl.config.monitor_interval;
        loop {
            // align to global interval boundaries so nodes compare like with like
            let next = (cl.now().as_ps() / iv.as_ps() + 1) * iv.as_ps();
            cl.sim.sleep_until(SimTime::from_ps(next)).await;
            let interval = next / iv.as_ps();
            let node = cl.node(cn);
            let lat = node.take_latency();
            let rec = LoadRecord {
                interval,
                avg_latency_ns: lat.map(|l| l as u64).unwrap_or(0),
                committed: 0,
                hottest_shard: 0,
                reported: lat.is_some(),
            };
            cl.fabric
                .rdma_write(mn0, cl.metrics_base + (LOAD_RECORD_LEN * cn as usize) as u64, &rec.encode())
                .await
                .expect(MN);
            cl.sim.sleep(COLLECT_DELAY).await;
            let bytes = cl
                .fabric
                .rdma_read(mn0, cl.metrics_base, LOAD_RECORD_LEN * n)
                .await
                .expect(MN);
            let latest: Vec<Option<f64>> = bytes
                .chunks_exact(LOAD_RECORD_LEN)
                .map(LoadRecord::decode)
                .map(|r| (r.reported && r.interval == interval).then_some(r.avg_latency_ns as f64))
                .collect();
            let hot = {
                let mut h = node.overload_history.borrow_mut();
                h.push_back(latest.clone());
                while h.len() > OVERLOAD_INTERVALS {
                    h.pop_front();
                }
                let v: Vec<Vec<Option<f64>>> = h.iter().cloned().collect();
                detect_overload(&v)
            };
            if hot == Some(cn) && node.is_ready() && !cl.transfer_token.replace(true) {
                reshard(&cl, cn, &latest).await;
                cl.transfer_token.set(false);
                for nd in &cl.nodes {
                    nd.overload_history.borrow_mut().clear();
                }
            }
        }
    });
}

async fn reshard(cl: &Rc<Cluster>, cn: u16, latest: &[Option<f64>]) {
    let node = cl.node(cn);
    let started = cl.now();
    let hits = node.locks.take_shard_hits();
    let Some(shard) = hottest_shard(&hits, &node.locks.owned_shards()) else { return };
    let Some(to) = least_loaded(latest, cn, &cl.ready_cns()) else { return };

    node.locks.set_owned(shard, false);
    let deadline = started + cl.config.drain_timeout;
    let hard = deadline + SimTime::from_ps(cl.config.drain_timeout.as_ps() * COMMIT_GRACE);
    let mut aborted = BTreeSet::new();
    loop {
        let holders = node.locks.holders_in_shard(shard);
        if holders.is_empty() || cl.now() >= hard {
            break;
        }
        if cl.now() >= deadline {
            for h in &holders {
                let executing = cl
                    .active
                    .borrow()
                    .get(&h.txn_id)
                    .is_some_and(|a| a.phase == TxnPhase::Executing);
                if executing && cl.flag_txn(h.txn_id, AbortReason::Resharding) {
                    aborted.insert(h.txn_id);
                }
            }
        }
        cl.sim.sleep(DRAIN_POLL).await;
    }
    if !node.locks.holders_in_shard(shard).is_empty() {
        cl.stats.borrow_mut().transfer_violations += 1;
    }
    node.locks.drop_shard(shard);
    node.vt.clear_shard(shard);

    let version = cl.router.borrow().version() + 1;
    let reply = cl
        .fabric
        .rpc_call(
            NodeId::compute(cn),
            NodeId::compute(to),
            SVC_TRANSFER,
            &encode_transfer(shard, version),
        )
        .await;
    let outcome = match reply {
        Ok(b) if b == [1] => {
            cl.router.borrow_mut().transfer(shard, to);
            ReshardOutcome::Ok
        }
        _ => {
            node.locks.set_owned(shard, true);
            ReshardOutcome::TransferTimeout
        }
    };
    let map_version = cl.router.borrow().version();
    cl.stats.borrow_mut().reshards.push(ReshardEvent {
        shard,
        from: cn,
        to,
        started,
        finished: cl.now(),
        aborted_holders: aborted.len() as u64,
        outcome,
        map_version,
    });
}

/// Receiver side of a hand-off: drop anything cached for the shard and take
/// ownership.
pub fn handle_transfer(cl: &Cluster, cn: u16, payload: &[u8]) -> Vec<u8> {
    let node = cl.node(cn);
    match decode_transfer(payload) {
        Some((shard, _)) if node.is_ready() => {
            node.vt.clear_shard(shard);
            node.locks.set_owned(shard, true);
            vec![1]
        }
        _ => vec![0],
    }
}
