//! Lease-based failure detection and compute-node recovery.
//!
//! A restarted node reads its coordinators' commit logs from memory. A
//! complete log whose writes reached visibility anywhere is rolled forward
//! with the commit timestamp found there; otherwise the written cells are
//! invalidated. Other nodes then drop the failed node's locks, and the node
//! takes its shards back once no survivor depends on it.

use std::rc::Rc;

use crate::cluster::{Cluster, NodeState, TxnPhase, TxnResult, SVC_READY};
use crate::fabric::NodeId;
use crate::memstore::{decode_cvt, encode_cvt, INVISIBLE};
use crate::sim::{join_all, SimTime};
use crate::txn::history::Outcome;
use crate::txn::log::{CommitLogRecord, LogScan, LOG_SLOT_LEN, LOG_STATE_OFFSET, STATE_RETIRED};
use crate::txn::AbortReason;

const MN: &str = "memory nodes do not fail";
const BARRIER_POLL: SimTime = SimTime::from_us(50);

/// Lease expiries as last read from memory. A zero lease means the node has
/// not registered yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MembershipView {
    pub leases: Vec<SimTime>,
    pub suspected: Vec<bool>,
    pub epoch: u64,
}

impl MembershipView {
    pub fn new(cns: usize) -> Self {
        MembershipView {
            leases: vec![SimTime::ZERO; cns],
            suspected: vec![false; cns],
            epoch: 0,
        }
    }

    pub fn mark_alive(&mut self, cn: u16) {
        self.suspected[cn as usize] = false;
    }
}

/// Nodes whose lease ran out, each reported once per suspicion.
pub fn detect_failure(view: &mut MembershipView, now: SimTime) -> Vec<u16> {
    let mut out = Vec::new();
    for i in 0..view.leases.len() {
        let l = view.leases[i];
        if !view.suspected[i] && l != SimTime::ZERO && l < now {
            view.suspected[i] = true;
            view.epoch += 1;
            out.push(i as u16);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecoveryPhase {
    ScanLogs,
    ReleaseLocks,
    AwaitRestart,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoveryTask {
    pub failed: u16,
    pub survivors: Vec<u16>,
    pub phase: RecoveryPhase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoveryEvent {
    pub cn: u16,
    pub crashed_at: SimTime,
    pub detected_at: SimTime,
    pub logs_done_at: SimTime,
    pub ready_at: SimTime,
    /// Logged transactions rolled forward.
    pub continued: u64,
    pub aborted: u64,
    /// Locks the failed node held on other nodes.
    pub released_locks: u64,
}

/// Renew `cn`'s lease until the node's tasks are killed.
pub fn spawn_lease(cluster: &Rc<Cluster>, cn: u16) {
    let cl = cluster.clone();
    cluster.sim.spawn(Some(cn), async move {
        let mn0 = NodeId::memory(0);
        let addr = cl.lease_base + 8 * cn as u64;
        loop {
            let expiry = cl.now() + cl.config.lease_expiry;
            cl.fabric
                .rdma_write(mn0, addr, &expiry.as_ps().to_le_bytes())
                .await
                .expect(MN);
            cl.sim.sleep(cl.config.lease_renew).await;
        }
    });
}

/// Poll every lease and start recovery for nodes that stopped renewing.
pub fn spawn_detector(cluster: &Rc<Cluster>) {
    let cl = cluster.clone();
    cluster.sim.spawn(None, async move {
        let n = cl.config.cns as usize;
        loop {
            cl.sim.sleep(cl.config.detect_interval).await;
            let bytes = cl
                .fabric
                .rdma_read(NodeId::memory(0), cl.lease_base, 8 * n)
                .await
                .expect(MN);
            let failed = {
                let mut view = cl.membership.borrow_mut();
                for (i, c) in bytes.chunks_exact(8).enumerate() {
                    view.leases[i] = SimTime::from_ps(u64::from_le_bytes(c.try_into().unwrap()));
                }
                detect_failure(&mut view, cl.now())
            };
            for f in failed {
                let c = cl.clone();
                cl.sim.spawn(None, async move { recover_cn(c, f).await });
            }
        }
    });
}

/// Peers learn that a node is back; the shared map already says so.
pub fn handle_ready(_cluster: &Cluster, _cn: u16, _from: NodeId, _payload: &[u8]) -> Vec<u8> {
    vec![1]
}

pub async fn recover_cn(cl: Rc<Cluster>, f: u16) {
    let detected_at = cl.now();
    let node = cl.node(f);
    if node.state() != NodeState::Down {
        // lease lost while still running: fence it first
        cl.crash_cn(f);
    }
    let crashed_at = cl
        .stats
        .borrow()
        .crashes
        .iter()
        .rev()
        .find(|(c, _)| *c == f)
        .map(|(_, t)| *t)
        .unwrap_or(detected_at);
    let mut task = RecoveryTask {
        failed: f,
        survivors: cl.ready_cns().into_iter().filter(|c| *c != f).collect(),
        phase: RecoveryPhase::ScanLogs,
    };

    // survivors stop waiting on locks held at the failed node
    let waiting: Vec<u64> = cl
        .active
        .borrow()
        .iter()
        .filter(|(_, a)| a.cn != f && a.phase == TxnPhase::Executing && a.lock_cns.contains(&f))
        .map(|(id, _)| *id)
        .collect();
    for id in waiting {
        cl.flag_txn(id, AbortReason::NodeFailure);
    }

    node.wipe();
    node.set_state(NodeState::Restarting);
    cl.fabric.set_down(NodeId::compute(f), false);
    cl.spawn_node_tasks(f);

    let (continued, aborted) = recover_transactions(&cl, f).await;
    let logs_done_at = cl.now();

    task.phase = RecoveryPhase::ReleaseLocks;
    let mut released = 0u64;
    for n in cl.nodes.iter().filter(|n| n.id != f) {
        released += n.locks.release_all(f) as u64;
    }

    task.phase = RecoveryPhase::AwaitRestart;
    while !cl.dependents_of(f).is_empty() {
        cl.sim.sleep(BARRIER_POLL).await;
    }
    for s in cl.router.borrow().shards_of(f) {
        node.locks.set_owned(s, true);
    }
    node.set_state(NodeState::Ready);
    cl.membership.borrow_mut().mark_alive(f);
    let peers: Vec<u16> = cl.ready_cns().into_iter().filter(|c| *c != f).collect();
    let payload = f.to_le_bytes();
    let futs: Vec<_> = peers
        .iter()
        .map(|p| cl.fabric.rpc_call(NodeId::compute(f), NodeId::compute(*p), SVC_READY, &payload))
        .collect();
    join_all(futs).await;
    task.phase = RecoveryPhase::Done;
    debug_assert_eq!(task.phase, RecoveryPhase::Done);

    cl.stats.borrow_mut().recoveries.push(RecoveryEvent {
        cn: f,
        crashed_at,
        detected_at,
        logs_done_at,
        ready_at: cl.now(),
        continued,
        aborted,
        released_locks: released,
    });
}

/// Resolve every commit log of `f`'s coordinators. Returns (rolled forward,
/// rolled back).
async fn recover_transactions(cl: &Rc<Cluster>, f: u16) -> (u64, u64) {
    let per = cl.config.coordinators;
    let slots: Vec<usize> = (f as usize * per..(f as usize + 1) * per).collect();
    let futs: Vec<_> = slots.iter().map(|&g| recover_slot(cl, g)).collect();
    let mut continued = 0;
    let mut aborted = 0;
    for r in join_all(futs).await {
        match r {
            Some(true) => continued += 1,
            Some(false) => aborted += 1,
            None => {}
        }
    }
    let now = cl.now();
    let left = cl.history.borrow().pending_of_cn(f);
    for id in left {
        cl.history
            .borrow_mut()
            .finalize(id, Outcome::Aborted(AbortReason::Crashed), None, now);
    }
    resolve_orphans(cl);
    (continued, aborted)
}

fn resolve_orphans(cl: &Rc<Cluster>) {
    let orphans: Vec<u64> = cl.orphans.borrow().keys().copied().collect();
    for id in orphans {
        if cl.history.borrow().is_pending(id) {
            continue;
        }
        let rec = cl.history.borrow().records().iter().rev().find(|r| r.txn_id == id).cloned();
        let Some(rec) = rec else { continue };
        if let Some(req) = cl.orphans.borrow_mut().remove(&id) {
            req.resolve(
                &cl.sim,
                TxnResult {
                    txn_id: id,
                    cn: rec.cn,
                    outcome: rec.outcome,
                    lock_rpcs: 0,
                },
            );
        }
    }
}

async fn retire(cl: &Cluster, g: usize) {
    let addr = cl.log_addr(g) + LOG_STATE_OFFSET as u64;
    let futs: Vec<_> = cl
        .catalog
        .replicas(g as u64)
        .into_iter()
        .map(|r| cl.fabric.rdma_write(r, addr, &[STATE_RETIRED]))
        .collect();
    for r in join_all(futs).await {
        r.expect(MN);
    }
}

/// `Some(true)` rolled forward, `Some(false)` rolled back, `None` idle slot.
async fn recover_slot(cl: &Rc<Cluster>, g: usize) -> Option<bool> {
    let replicas = cl.catalog.replicas(g as u64);
    let bytes = cl
        .fabric
        .rdma_read(replicas[0], cl.log_addr(g), LOG_SLOT_LEN)
        .await
        .expect(MN);
    let rec = match CommitLogRecord::scan(&bytes) {
        LogScan::Empty | LogScan::Retired(_) => return None,
        LogScan::Incomplete(txn) => {
            retire(cl, g).await;
            let now = cl.now();
            cl.history
                .borrow_mut()
                .finalize(txn, Outcome::Aborted(AbortReason::Crashed), None, now);
            return Some(false);
        }
        LogScan::Complete(rec) => rec,
    };

    let mut images = Vec::with_capacity(rec.entries.len());
    let futs: Vec<_> = rec
        .entries
        .iter()
        .map(|e| {
            let meta = cl.catalog.table(e.table_id).expect("logged table");
            let bucket = meta.slot_of(e.cvt_addr).expect("logged CVT address").0;
            let primary = cl.catalog.replicas(bucket)[0];
            cl.fabric.rdma_read(primary, e.cvt_addr, meta.cvt_len())
        })
        .collect();
    for b in join_all(futs).await {
        images.push(decode_cvt(&b.expect(MN)).expect("well-formed CVT"));
    }
    let matches = |e: &crate::txn::log::LogEntry, cvt: &crate::memstore::Cvt| {
        let c = cvt.cells[e.cell_index as usize];
        c.valid
            && c.address == e.cell.address
            && c.head_cv == e.cell.head_cv
            && c.tail_cv == e.cell.tail_cv
            && c.tombstone == e.cell.tombstone
    };
    let tc = rec
        .entries
        .iter()
        .zip(&images)
        .filter(|(e, cvt)| matches(e, cvt))
        .map(|(e, cvt)| cvt.cells[e.cell_index as usize].version)
        .find(|v| *v != INVISIBLE);

    let now = cl.now();
    for (e, cvt) in rec.entries.iter().zip(images.iter_mut()) {
        let idx = e.cell_index as usize;
        let hit = matches(e, cvt);
        match tc {
            Some(tc) => {
                if hit && cvt.cells[idx].version == INVISIBLE {
                    cvt.cells[idx].version = tc;
                }
            }
            None => {
                if hit {
                    cvt.cells[idx].valid = false;
                    cvt.cells[idx].tombstone = false;
                }
                if !e.cell.tombstone {
                    cl.allocators
                        .borrow_mut()
                        .get_mut(&e.table_id)
                        .expect("allocator")
                        .free(e.cell.address, e.cell.head_cv);
                }
            }
        }
        // the primary image is authoritative for every replica
        let meta = cl.catalog.table(e.table_id).expect("logged table");
        let bucket = meta.slot_of(e.cvt_addr).expect("logged CVT address").0;
        let img = encode_cvt(cvt);
        for r in cl.catalog.replicas(bucket) {
            cl.fabric.issue_write(r, e.cvt_addr, &img).expect(MN);
        }
    }
    match tc {
        Some(tc) => {
            cl.history
                .borrow_mut()
                .finalize(rec.txn_id, Outcome::Committed, Some(tc), now);
        }
        None => {
            cl.history
                .borrow_mut()
                .finalize(rec.txn_id, Outcome::Aborted(AbortReason::Crashed), None, now);
        }
    }
    retire(cl, g).await;
    Some(tc.is_some())
}
