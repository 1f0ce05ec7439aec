//! The lock-first protocol: lock, read CVTs, read data; then write data and
//! log invisibly, take a commit timestamp, make the writes visible, unlock.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::cluster::{ActiveTxn, Cluster, ComputeNode, TxnPhase, TxnResult, SVC_LOCK};
use crate::fabric::NodeId;
use crate::locktable::{
    decode_lock_response, encode_lock_batch, LockCode, LockMode, LockOp, LockRequest, LockTarget,
};
use crate::memstore::{
    cv_check, decode_bucket, decode_cvt, decode_record, encode_cvt, encode_record, payload_value,
    select_cell_for_write, Cvt, CvtCell, LotusKey, TableMeta, CELL_VERSION_OFFSET, CVT_CELL_LEN, CVT_HEADER_LEN,
    HEADER_LOCK_OFFSET, INVISIBLE,
};
use crate::sim::{join_all, SimTime};

use super::context::LockAttempt;
use super::history::{HistOp, HistoryRecord, OpKind, Outcome};
use super::log::{CommitLogRecord, LogEntry, LOG_STATE_OFFSET, MAX_LOG_ENTRIES, STATE_RETIRED};
use super::{AbortReason, Access, LockPlacement, TxnContext, TxnSpec, TxnStatus, WriteIntent, Writes};

const MN: &str = "memory nodes do not fail";
/// CAS attempts a read lock makes on a word shared with other readers.
const MN_READ_TRIES: u32 = 4;
const MN_RELEASE_TRIES: u32 = 16;
const MN_LOCATE_ROUNDS: u32 = 3;

/// Points in the commit phase where a compute node can be made to crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CrashStep {
    BeforeLog,
    AfterLog,
    /// After the first data write reached one replica.
    PartialData,
    DataDone,
    AfterCommitTs,
    /// After the first version word reached one replica.
    PartialVisible,
    VisibleDone,
    AfterRetire,
    AfterLocalUnlock,
}

impl CrashStep {
    pub const ALL: [CrashStep; 9] = [
        CrashStep::BeforeLog,
        CrashStep::AfterLog,
        CrashStep::PartialData,
        CrashStep::DataDone,
        CrashStep::AfterCommitTs,
        CrashStep::PartialVisible,
        CrashStep::VisibleDone,
        CrashStep::AfterRetire,
        CrashStep::AfterLocalUnlock,
    ];
}

struct Want {
    entries: Vec<usize>,
    target: LockTarget,
    mode: LockMode,
    owner: u16,
}

struct Fetched {
    bucket: u64,
    addr: Option<u64>,
    cvt: Option<Cvt>,
    slot: Option<usize>,
}

struct PlannedWrite {
    key: LotusKey,
    table: u16,
    cvt_addr: u64,
    cell_index: usize,
    image: Cvt,
    record: Option<(u64, Vec<u8>)>,
    new_slot: bool,
    cells_only: bool,
    released: Vec<(u64, u8)>,
    replicas: Vec<NodeId>,
    tombstone: bool,
    value: i64,
    locally_locked: bool,
}

fn code_reason(c: LockCode) -> AbortReason {
    match c {
        LockCode::BucketFull => AbortReason::LockTableFull,
        LockCode::Overflow => AbortReason::LockOverflow,
        LockCode::ShardNotOwned => AbortReason::StaleShard,
        _ => AbortReason::LockConflict,
    }
}

/// One logical coordinator on a compute node. It runs one transaction at a
/// time.
pub struct Coordinator {
    cluster: Rc<Cluster>,
    cn: u16,
    coord: usize,
}

impl Coordinator {
    pub fn new(cluster: Rc<Cluster>, cn: u16, coord: usize) -> Self {
        assert!(coord < cluster.config.coordinators, "coordinator index out of range");
        Coordinator { cluster, cn, coord }
    }

    pub fn cn(&self) -> u16 {
        self.cn
    }

    fn node(&self) -> &ComputeNode {
        self.cluster.node(self.cn)
    }

    fn global(&self) -> usize {
        self.cn as usize * self.cluster.config.coordinators + self.coord
    }

    fn meta(&self, table: u16) -> &TableMeta {
        self.cluster.catalog.table(table).expect("transaction on unknown table")
    }

    fn mn_mode(&self) -> bool {
        self.cluster.config.placement == LockPlacement::MemoryNode
    }

    fn vt_enabled(&self) -> bool {
        self.cluster.config.use_vt_cache && !self.mn_mode()
    }

    fn check_flag(&self, ctx: &TxnContext) -> Result<(), AbortReason> {
        match self.cluster.active.borrow().get(&ctx.txn_id).and_then(|a| a.flag) {
            Some(r) => Err(r),
            None => Ok(()),
        }
    }

    async fn probe(&self, step: CrashStep) {
        if self.cluster.crash_due(self.cn, step) {
            self.cluster.crash_cn(self.cn);
            std::future::pending::<()>().await;
        }
    }

    // ---- API -------------------------------------------------------------------------

    /// Start a transaction with a fresh start timestamp.
    pub async fn begin(&self) -> TxnContext {
        let start_time = self.cluster.now();
        let start_ts = self.cluster.ts.next_timestamp().await;
        let id = self.cluster.next_txn_id();
        self.cluster.active.borrow_mut().insert(
            id,
            ActiveTxn {
                cn: self.cn,
                coord: self.coord,
                kind: 0,
                read_only: true,
                start_ts,
                start_time,
                lock_cns: Default::default(),
                phase: TxnPhase::Executing,
                flag: None,
            },
        );
        self.node().set_current_txn(self.coord, id);
        TxnContext::new(id, self.cn, self.coord, start_ts, start_time)
    }

    /// Lock, then read every entry not read yet. May be called again after
    /// adding more entries.
    pub async fn execute(&self, ctx: &mut TxnContext) -> bool {
        if ctx.status != TxnStatus::Running {
            return false;
        }
        if let Some(a) = self.cluster.active.borrow_mut().get_mut(&ctx.txn_id) {
            a.kind = ctx.kind;
            a.read_only = ctx.is_read_only();
        }
        match self.execute_steps(ctx).await {
            Ok(()) => true,
            Err(r) => {
                self.abort(ctx, r).await;
                false
            }
        }
    }

    async fn execute_steps(&self, ctx: &mut TxnContext) -> Result<(), AbortReason> {
        self.check_flag(ctx)?;
        if self.mn_mode() {
            self.mn_lock_step(ctx).await?;
        } else {
            self.lock_step(ctx).await?;
        }
        self.check_flag(ctx)?;
        self.fetch_cvts(ctx).await?;
        self.check_flag(ctx)?;
        self.read_data(ctx).await?;
        self.check_flag(ctx)
    }

    /// Read-only path: no locks, snapshot at the start timestamp, checked
    /// with cacheline versions.
    pub async fn run_read_only(&self, ctx: &mut TxnContext) -> bool {
        if ctx.status != TxnStatus::Running || !ctx.is_read_only() {
            return false;
        }
        if let Some(a) = self.cluster.active.borrow_mut().get_mut(&ctx.txn_id) {
            a.kind = ctx.kind;
        }
        let res = async {
            self.check_flag(ctx)?;
            self.fetch_cvts(ctx).await?;
            self.read_data(ctx).await
        }
        .await;
        match res {
            Ok(()) => {
                self.finish_read_only(ctx);
                true
            }
            Err(r) => {
                self.abort(ctx, r).await;
                false
            }
        }
    }

    pub async fn commit(&self, ctx: &mut TxnContext) -> bool {
        if ctx.status != TxnStatus::Running {
            return false;
        }
        if let Err(r) = self.check_flag(ctx) {
            self.abort(ctx, r).await;
            return false;
        }
        if ctx.is_read_only() {
            self.release_local(ctx);
            self.release_remote(ctx, false).await;
            self.mn_release(ctx).await;
            self.finish_read_only(ctx);
            return true;
        }
        match self.prepare_writes(ctx) {
            Ok(plan) => {
                self.write_phase(ctx, plan).await;
                true
            }
            Err(r) => {
                self.abort(ctx, r).await;
                false
            }
        }
    }

    /// Release everything and record the abort.
    pub async fn abort(&self, ctx: &mut TxnContext, reason: AbortReason) {
        if matches!(ctx.status, TxnStatus::Committed | TxnStatus::Aborted(_)) {
            return;
        }
        ctx.status = TxnStatus::Aborted(reason);
        self.release_local(ctx);
        self.release_remote(ctx, false).await;
        self.mn_release(ctx).await;
        let rec = HistoryRecord {
            seq: 0,
            txn_id: ctx.txn_id,
            kind: ctx.kind,
            read_only: ctx.is_read_only(),
            cn: self.cn,
            start_ts: ctx.start_ts,
            commit_ts: None,
            ops: Vec::new(),
            outcome: Outcome::Aborted(reason),
            app_delta: 0,
            start_time: ctx.start_time,
            visible_time: self.cluster.now(),
        };
        self.cluster.history.borrow_mut().push(rec);
        self.finish(ctx);
    }

    /// Run a whole workload transaction.
    pub async fn run_spec(&self, spec: &TxnSpec) -> TxnResult {
        let mut ctx = self.begin().await;
        ctx.kind = spec.kind;
        for &(t, k) in &spec.ro {
            ctx.add_ro(t, k).expect("fresh context");
        }
        for &(t, k, i) in &spec.rw {
            ctx.add_rw(t, k, i).expect("fresh context");
        }
        if spec.read_only() {
            self.run_read_only(&mut ctx).await;
        } else if self.execute(&mut ctx).await {
            let w = match &spec.logic {
                Some(f) => f(&ctx),
                None => default_writes(&ctx),
            };
            for (k, p) in w.values {
                let _ = ctx.set(k, p);
            }
            ctx.app_delta = w.app_delta;
            self.commit(&mut ctx).await;
        }
        if !spec.read_only() && spec.single_shard() {
            let mut st = self.cluster.stats.borrow_mut();
            st.single_shard_rw += 1;
            if ctx.lock_rpcs == 0 {
                st.single_shard_rw_local += 1;
            }
        }
        TxnResult {
            txn_id: ctx.txn_id,
            cn: self.cn,
            outcome: match ctx.status {
                TxnStatus::Committed => Outcome::Committed,
                TxnStatus::Aborted(r) => Outcome::Aborted(r),
                _ => Outcome::Aborted(AbortReason::Crashed),
            },
            lock_rpcs: ctx.lock_rpcs,
        }
    }

    fn finish(&self, ctx: &TxnContext) {
        self.cluster.active.borrow_mut().remove(&ctx.txn_id);
        self.cluster.stats.borrow_mut().lock_rpcs += u64::from(ctx.lock_rpcs);
    }

    fn read_ops(ctx: &TxnContext) -> Vec<HistOp> {
        ctx.entries
            .iter()
            .filter_map(|e| {
                e.read_version.map(|v| HistOp {
                    table: e.table,
                    key: e.key,
                    kind: OpKind::Read { version: v },
                    value: e.value.as_deref().map(payload_value).unwrap_or(0),
                })
            })
            .collect()
    }

    fn finish_read_only(&self, ctx: &mut TxnContext) {
        ctx.status = TxnStatus::Committed;
        let rec = HistoryRecord {
            seq: 0,
            txn_id: ctx.txn_id,
            kind: ctx.kind,
            read_only: true,
            cn: self.cn,
            start_ts: ctx.start_ts,
            commit_ts: None,
            ops: Self::read_ops(ctx),
            outcome: Outcome::Committed,
            app_delta: 0,
            start_time: ctx.start_time,
            visible_time: self.cluster.now(),
        };
        self.cluster.history.borrow_mut().push(rec);
        self.finish(ctx);
    }

    // ---- step 1: locks on compute nodes -------------------------------------------------

    async fn lock_step(&self, ctx: &mut TxnContext) -> Result<(), AbortReason> {
        let cl = &self.cluster;
        let deadline = cl.now() + cl.config.shard_budget;
        loop {
            let mut wanted: BTreeMap<(u16, u64, bool), Want> = BTreeMap::new();
            {
                let router = cl.router.borrow();
                let mut want = |entry: usize, target: LockTarget, mode: LockMode| {
                    let owner = router.owner(target.shard());
                    wanted
                        .entry((owner, target.key, target.index_bucket))
                        .or_insert(Want {
                            entries: Vec::new(),
                            target,
                            mode,
                            owner,
                        })
                        .entries
                        .push(entry);
                };
                for (i, e) in ctx.entries.iter().enumerate() {
                    if e.lock.is_none() {
                        if let Some(mode) = e.wanted_lock(cl.config.isolation) {
                            want(i, LockTarget::record(e.key), mode);
                        }
                    }
                    if e.access == Access::ReadWrite(WriteIntent::Insert) && e.bucket_lock.is_none() {
                        let meta = self.meta(e.table);
                        want(i, LockTarget::bucket(meta.bucket_addr(meta.bucket_index(e.key))), LockMode::Write);
                    }
                }
            }
            if wanted.is_empty() {
                return Ok(());
            }
            let mut not_owned = false;
            let mut remote: BTreeMap<u16, Vec<&Want>> = BTreeMap::new();
            for w in wanted.values() {
                if w.owner != self.cn {
                    remote.entry(w.owner).or_default().push(w);
                    continue;
                }
                match self.node().locks.acquire(w.target, w.mode, self.cn, ctx.txn_id) {
                    Ok(LockCode::Ok) => {
                        cl.audit_acquire(self.cn, w.target.shard());
                        grant(ctx, w, self.cn);
                    }
                    Ok(code) => return Err(code_reason(code)),
                    Err(_) => not_owned = true,
                }
            }
            if remote.keys().any(|o| !cl.node(*o).is_ready()) {
                return Err(AbortReason::NodeFailure);
            }
            if !remote.is_empty() {
                if let Some(a) = cl.active.borrow_mut().get_mut(&ctx.txn_id) {
                    a.lock_cns.extend(remote.keys().copied());
                }
                let futs: Vec<_> = remote
                    .iter()
                    .map(|(owner, ws)| {
                        let batch: Vec<LockRequest> = ws
                            .iter()
                            .map(|w| LockRequest {
                                op: LockOp::Acquire,
                                target: w.target,
                                mode: w.mode,
                                txn_id: ctx.txn_id,
                                cn_id: self.cn,
                            })
                            .collect();
                        let payload = encode_lock_batch(&batch);
                        let fabric = cl.fabric.clone();
                        let (from, to) = (NodeId::compute(self.cn), NodeId::compute(*owner));
                        async move { fabric.rpc_call(from, to, SVC_LOCK, &payload).await }
                    })
                    .collect();
                ctx.lock_rpcs += futs.len() as u32;
                let replies = join_all(futs).await;
                let mut failure = None;
                for ((owner, ws), reply) in remote.iter().zip(replies) {
                    let codes = reply
                        .ok()
                        .and_then(|b| decode_lock_response(&b).ok())
                        .filter(|c| c.len() == ws.len());
                    let Some(codes) = codes else {
                        // outcome unknown: remember the requests so abort releases them
                        for w in ws {
                            ctx.locks.push(LockAttempt {
                                target: w.target,
                                mode: w.mode,
                                owner: *owner,
                            });
                        }
                        failure.get_or_insert(AbortReason::NodeFailure);
                        continue;
                    };
                    for (w, c) in ws.iter().zip(codes) {
                        match c {
                            LockCode::Ok => grant(ctx, w, *owner),
                            LockCode::ShardNotOwned => not_owned = true,
                            c => {
                                failure.get_or_insert(code_reason(c));
                            }
                        }
                    }
                }
                if let Some(r) = failure {
                    return Err(r);
                }
            }
            if !not_owned {
                return Ok(());
            }
            if cl.now() >= deadline {
                return Err(AbortReason::StaleShard);
            }
            cl.sim.sleep(cl.config.shard_retry).await;
            self.check_flag(ctx)?;
        }
    }

    fn release_local(&self, ctx: &mut TxnContext) {
        for l in ctx.locks.iter().filter(|l| l.owner == self.cn) {
            let _ = self.node().locks.release(l.target, l.mode, self.cn, ctx.txn_id);
        }
        ctx.locks.retain(|l| l.owner != self.cn);
        for e in &mut ctx.entries {
            if e.lock.is_some_and(|(_, o)| o == self.cn) {
                e.lock = None;
            }
            if e.bucket_lock.is_some_and(|(_, o)| o == self.cn) {
                e.bucket_lock = None;
            }
        }
    }

    /// Send release batches to other nodes; awaited unless `detach`.
    async fn release_remote(&self, ctx: &mut TxnContext, detach: bool) {
        let cl = &self.cluster;
        let mut groups: BTreeMap<u16, Vec<LockRequest>> = BTreeMap::new();
        for l in ctx.locks.drain(..) {
            groups.entry(l.owner).or_default().push(LockRequest {
                op: LockOp::Release,
                target: l.target,
                mode: l.mode,
                txn_id: ctx.txn_id,
                cn_id: self.cn,
            });
        }
        for e in &mut ctx.entries {
            e.lock = None;
            e.bucket_lock = None;
        }
        // a node that is down or restarting has no locks left to release
        groups.retain(|o, _| cl.node(*o).is_ready());
        if groups.is_empty() {
            return;
        }
        ctx.lock_rpcs += groups.len() as u32;
        let from = NodeId::compute(self.cn);
        let futs: Vec<_> = groups
            .into_iter()
            .map(|(owner, batch)| {
                let fabric = cl.fabric.clone();
                let payload = encode_lock_batch(&batch);
                async move {
                    let _ = fabric.rpc_call(from, NodeId::compute(owner), SVC_LOCK, &payload).await;
                }
            })
            .collect();
        if detach {
            cl.sim.spawn(None, async move {
                join_all(futs).await;
            });
        } else {
            join_all(futs).await;
        }
    }

    // ---- step 1 with lock words on memory nodes --------------------------------------------

    async fn mn_lock_step(&self, ctx: &mut TxnContext) -> Result<(), AbortReason> {
        let cl = &self.cluster;
        for _round in 0..MN_LOCATE_ROUNDS {
            let need: Vec<(usize, LockMode)> = ctx
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.mn_lock.is_none())
                .filter_map(|(i, e)| e.wanted_lock(cl.config.isolation).map(|m| (i, m)))
                .collect();
            if need.is_empty() {
                return Ok(());
            }
            // locate CVTs (or free slots) with no cached address
            let mut targets: Vec<(usize, LockMode, u64)> = Vec::new();
            let mut locate: Vec<(usize, LockMode)> = Vec::new();
            for &(i, m) in &need {
                let e = &ctx.entries[i];
                let insert = e.access == Access::ReadWrite(WriteIntent::Insert);
                match (insert, self.node().addrs.lookup(e.key)) {
                    (false, Some(a)) => targets.push((i, m, a)),
                    _ => locate.push((i, m)),
                }
            }
            let futs: Vec<_> = locate
                .iter()
                .map(|&(i, _)| {
                    let e = &ctx.entries[i];
                    self.fetch_one(e.table, e.key, e.access == Access::ReadWrite(WriteIntent::Insert))
                })
                .collect();
            let found = join_all(futs).await;
            for (&(i, m), f) in locate.iter().zip(found) {
                let f = f?;
                let meta = self.meta(ctx.entries[i].table);
                let addr = match (f.addr, f.slot) {
                    (Some(a), _) => a,
                    (None, Some(s)) => meta.cvt_addr(f.bucket, s),
                    (None, None) if ctx.entries[i].access == Access::ReadWrite(WriteIntent::Insert) => {
                        return Err(AbortReason::BucketFull)
                    }
                    (None, None) => return Err(AbortReason::KeyNotFound),
                };
                targets.push((i, m, addr));
            }
            // lock word CAS and CVT read in the same round trip
            let futs: Vec<_> = targets
                .iter()
                .map(|&(i, m, addr)| {
                    let e = &ctx.entries[i];
                    let meta = self.meta(e.table);
                    let primary = cl.catalog.replicas(meta.bucket_index(e.key))[0];
                    self.mn_lock_one(primary, addr, m, meta.cvt_len())
                })
                .collect();
            let got = join_all(futs).await;
            let mut failure = None;
            let mut stale = false;
            for (&(i, m, addr), (ok, bytes)) in targets.iter().zip(got) {
                let e = &mut ctx.entries[i];
                let meta = cl.catalog.table(e.table).expect("known table");
                let primary = cl.catalog.replicas(meta.bucket_index(e.key))[0];
                let cvt = decode_cvt(&bytes).expect("well-formed CVT");
                let insert = e.access == Access::ReadWrite(WriteIntent::Insert);
                let mine = cvt.header.occupied && cvt.header.key == e.key && cvt.header.table_id == e.table;
                let fits = mine || (insert && !cvt.header.occupied);
                if !fits {
                    // the address was stale or the slot got taken: undo and locate again
                    if ok {
                        self.mn_release_word(primary, addr, m).await;
                    }
                    self.node().addrs.remove(e.key);
                    stale = true;
                    continue;
                }
                if !ok {
                    failure.get_or_insert(AbortReason::LockConflict);
                    continue;
                }
                e.mn_lock = Some(m);
                e.bucket = meta.bucket_index(e.key);
                e.cvt_addr = Some(addr);
                if mine {
                    self.node().addrs.insert(e.key, addr);
                    e.cvt = Some(cvt);
                    e.insert_slot = None;
                } else {
                    e.cvt = None;
                    e.insert_slot = meta.slot_of(addr).map(|(_, s)| s);
                }
                e.fetched = true;
            }
            if let Some(r) = failure {
                return Err(r);
            }
            if !stale {
                return Ok(());
            }
        }
        Err(AbortReason::LockConflict)
    }

    /// CAS the lock word at `cvt_addr` and read the CVT right behind it.
    async fn mn_lock_one(&self, primary: NodeId, cvt_addr: u64, mode: LockMode, cvt_len: usize) -> (bool, Vec<u8>) {
        let cl = &self.cluster;
        let word = cvt_addr + HEADER_LOCK_OFFSET as u64;
        let swap = if mode == LockMode::Write { 1 } else { 2 };
        let (mut prior, d1) = cl.fabric.issue_cas(primary, word, 0, swap).expect(MN);
        let (bytes, d2) = cl.fabric.issue_read(primary, cvt_addr, cvt_len).expect(MN);
        cl.stats.borrow_mut().mn_lock_attempts += 1;
        cl.sim.sleep_until(d1.max(d2)).await;
        let mut ok = prior == 0;
        let mut tries = 1;
        while mode == LockMode::Read && !ok && prior & 1 == 0 && tries < MN_READ_TRIES {
            let p = cl.fabric.rdma_cas(primary, word, prior, prior + 2).await.expect(MN);
            cl.stats.borrow_mut().mn_lock_attempts += 1;
            tries += 1;
            if p == prior {
                ok = true;
            } else {
                prior = p;
            }
        }
        if ok {
            cl.stats.borrow_mut().mn_lock_acquired += 1;
        }
        (ok, bytes)
    }

    async fn mn_release_word(&self, primary: NodeId, cvt_addr: u64, mode: LockMode) {
        let cl = &self.cluster;
        let word = cvt_addr + HEADER_LOCK_OFFSET as u64;
        let mut expect = if mode == LockMode::Write { 1 } else { 2 };
        for _ in 0..MN_RELEASE_TRIES {
            let next = if mode == LockMode::Write { 0 } else { expect - 2 };
            let p = cl.fabric.rdma_cas(primary, word, expect, next).await.expect(MN);
            cl.stats.borrow_mut().mn_lock_releases += 1;
            if p == expect || mode == LockMode::Write || p < 2 || p & 1 == 1 {
                return;
            }
            expect = p;
        }
    }

    async fn mn_release(&self, ctx: &mut TxnContext) {
        let held: Vec<(NodeId, u64, LockMode)> = ctx
            .entries
            .iter_mut()
            .filter_map(|e| {
                let m = e.mn_lock.take()?;
                let meta = self.cluster.catalog.table(e.table).expect("known table");
                let primary = self.cluster.catalog.replicas(meta.bucket_index(e.key))[0];
                Some((primary, e.cvt_addr.expect("locked entries are located"), m))
            })
            .collect();
        let futs: Vec<_> = held.iter().map(|&(p, a, m)| self.mn_release_word(p, a, m)).collect();
        join_all(futs).await;
    }

    // ---- step 2: CVTs -------------------------------------------------------------------------

    /// Cached CVT for a key this node holds locked; every hit is compared
    /// with memory.
    fn vt_hit(&self, table: u16, key: LotusKey) -> Option<(u64, Cvt)> {
        let node = self.node();
        let cvt = node.vt.lookup(key)?;
        let addr = node.addrs.lookup(key)?;
        let meta = self.meta(table);
        let primary = self.cluster.catalog.replicas(meta.bucket_index(key))[0];
        let mem = self.cluster.fabric.peek(primary, addr, meta.cvt_len()).expect(MN);
        let mut st = self.cluster.stats.borrow_mut();
        if mem != encode_cvt(&cvt) {
            st.vt_stale_hits += 1;
            node.vt.invalidate(key);
            return None;
        }
        st.vt_hits += 1;
        Some((addr, cvt))
    }

    async fn fetch_cvts(&self, ctx: &mut TxnContext) -> Result<(), AbortReason> {
        let use_vt = self.vt_enabled();
        let mut todo = Vec::new();
        for i in 0..ctx.entries.len() {
            let e = &ctx.entries[i];
            if e.fetched {
                continue;
            }
            let insert = e.access == Access::ReadWrite(WriteIntent::Insert);
            let local_lock = e.lock.is_some_and(|(_, o)| o == self.cn);
            if use_vt && !insert && local_lock {
                if let Some((addr, cvt)) = self.vt_hit(e.table, e.key) {
                    let meta = self.meta(e.table);
                    let e = &mut ctx.entries[i];
                    e.bucket = meta.bucket_index(e.key);
                    e.cvt_addr = Some(addr);
                    e.cvt = Some(cvt);
                    e.fetched = true;
                    continue;
                }
            }
            todo.push(i);
        }
        let futs: Vec<_> = todo
            .iter()
            .map(|&i| {
                let e = &ctx.entries[i];
                self.fetch_one(e.table, e.key, e.access == Access::ReadWrite(WriteIntent::Insert))
            })
            .collect();
        let results = join_all(futs).await;
        for (&i, r) in todo.iter().zip(results) {
            let f = r?;
            let meta = self.meta(ctx.entries[i].table);
            let e = &mut ctx.entries[i];
            e.bucket = f.bucket;
            e.cvt_addr = f.addr.or_else(|| f.slot.map(|s| meta.cvt_addr(f.bucket, s)));
            e.insert_slot = f.slot;
            e.cvt = f.cvt;
            e.fetched = true;
            let insert = e.access == Access::ReadWrite(WriteIntent::Insert);
            if use_vt && !insert && e.lock.is_some_and(|(_, o)| o == self.cn) {
                if let Some(c) = &e.cvt {
                    self.node().vt.update_local(e.key, c.clone());
                }
            }
        }
        Ok(())
    }

    /// Address-cache read with header validation, falling back to a bucket
    /// read. With `want_slot`, a missing key yields a free slot instead.
    async fn fetch_one(&self, table: u16, key: LotusKey, want_slot: bool) -> Result<Fetched, AbortReason> {
        let cl = &self.cluster;
        let meta = self.meta(table);
        let bucket = meta.bucket_index(key);
        let primary = cl.catalog.replicas(bucket)[0];
        let node = self.node();
        if !want_slot {
            if let Some(addr) = node.addrs.lookup(key) {
                let bytes = cl.fabric.rdma_read(primary, addr, meta.cvt_len()).await.expect(MN);
                if let Ok(cvt) = decode_cvt(&bytes) {
                    if node.addrs.validate(&cvt.header, key) && cvt.header.table_id == table {
                        return Ok(Fetched {
                            bucket,
                            addr: Some(addr),
                            cvt: Some(cvt),
                            slot: None,
                        });
                    }
                }
                node.addrs.remove(key);
            }
        }
        let bytes = cl
            .fabric
            .rdma_read(primary, meta.bucket_addr(bucket), meta.bucket_len())
            .await
            .expect(MN);
        let cvts = decode_bucket(&bytes, meta.cvt_len()).expect("well-formed bucket");
        if let Some(s) = cvts
            .iter()
            .position(|c| c.header.occupied && c.header.key == key && c.header.table_id == table)
        {
            let addr = meta.cvt_addr(bucket, s);
            node.addrs.insert(key, addr);
            return Ok(Fetched {
                bucket,
                addr: Some(addr),
                cvt: Some(cvts[s].clone()),
                slot: None,
            });
        }
        let mut slot = None;
        if want_slot {
            if self.mn_mode() && cvts.iter().any(|c| !c.header.occupied && c.header.lock_word != 0) {
                // another insert has claimed a slot here
                return Err(AbortReason::LockConflict);
            }
            slot = cvts.iter().position(|c| !c.header.occupied);
        }
        Ok(Fetched {
            bucket,
            addr: None,
            cvt: None,
            slot,
        })
    }

    // ---- step 3: data -------------------------------------------------------------------------

    async fn read_data(&self, ctx: &mut TxnContext) -> Result<(), AbortReason> {
        let cl = &self.cluster;
        let mut reads: Vec<(usize, NodeId, u64, usize)> = Vec::new();
        for (i, e) in ctx.entries.iter_mut().enumerate() {
            if e.read_done || !e.fetched {
                continue;
            }
            let insert = e.access == Access::ReadWrite(WriteIntent::Insert);
            let Some(cvt) = &e.cvt else {
                if insert && e.insert_slot.is_some() {
                    e.read_done = true;
                    continue;
                }
                return Err(if insert {
                    AbortReason::BucketFull
                } else {
                    AbortReason::KeyNotFound
                });
            };
            // a locked entry must not have changed since the start timestamp
            let strict = e.access.is_write() || e.lock.is_some() || e.mn_lock.is_some();
            if strict && cvt.has_version_after(ctx.start_ts) {
                return Err(AbortReason::FutureVersion);
            }
            if insert {
                if let Some(n) = cvt.newest() {
                    if !cvt.cells[n].tombstone {
                        return Err(AbortReason::DuplicateKey);
                    }
                    e.cell = Some(n);
                    e.read_version = Some(cvt.cells[n].version);
                }
                e.read_done = true;
                continue;
            }
            let Some(ci) = cvt.visible_before(ctx.start_ts) else {
                return Err(if cvt.newest().is_some() {
                    AbortReason::VersionGarbageCollected
                } else {
                    AbortReason::KeyNotFound
                });
            };
            let c = cvt.cells[ci];
            if c.tombstone {
                return Err(AbortReason::KeyNotFound);
            }
            e.cell = Some(ci);
            e.read_version = Some(c.version);
            let meta = cl.catalog.table(e.table).expect("known table");
            let primary = cl.catalog.replicas(e.bucket)[0];
            reads.push((i, primary, c.address, meta.record_stride() as usize));
        }
        let futs: Vec<_> = reads
            .iter()
            .map(|&(_, n, a, len)| cl.fabric.rdma_read(n, a, len))
            .collect();
        let got = join_all(futs).await;
        for (&(i, ..), bytes) in reads.iter().zip(got) {
            let bytes = bytes.expect(MN);
            let e = &mut ctx.entries[i];
            let cell = e.cvt.as_ref().expect("fetched").cells[e.cell.expect("chosen")];
            if !cv_check(&bytes, &cell) {
                return Err(AbortReason::InconsistentRead);
            }
            let len = self.meta(e.table).schema.record_len as usize;
            e.value = Some(decode_record(&bytes, len));
            e.read_done = true;
        }
        Ok(())
    }

    // ---- commit phase ---------------------------------------------------------------------------

    fn prepare_writes(&self, ctx: &TxnContext) -> Result<Vec<PlannedWrite>, AbortReason> {
        let cl = &self.cluster;
        if ctx.write_set().count() > MAX_LOG_ENTRIES {
            return Err(AbortReason::LogFull);
        }
        let now_ns = cl.now().as_ns();
        let gc_ns = cl.config.gc_threshold.as_ns();
        let mut plan = Vec::new();
        let mut allocs: Vec<(u16, u64, u8)> = Vec::new();
        for e in ctx.write_set() {
            let Access::ReadWrite(intent) = e.access else { unreachable!() };
            let meta = self.meta(e.table);
            let len = meta.schema.record_len;
            let new_slot = e.cvt.is_none();
            let cvt_addr = e.cvt_addr.expect("write entries are located");
            let mut image = e
                .cvt
                .clone()
                .unwrap_or_else(|| Cvt::empty(e.key, e.table, len, meta.versions()));
            if self.mn_mode() && new_slot {
                image.header.lock_word = 1;
            }
            // tombstones carry the deleting transaction's id, not a record
            let tombs: Vec<u64> = image.cells.iter().filter(|c| c.tombstone).map(|c| c.address).collect();
            let choice = select_cell_for_write(&mut image, now_ns, gc_ns);
            let (cell, record, value) = if intent == WriteIntent::Delete {
                let cell = CvtCell {
                    head_cv: 1,
                    valid: true,
                    tombstone: true,
                    address: ctx.txn_id,
                    version: INVISIBLE,
                    tail_cv: 1,
                };
                (cell, None, 0)
            } else {
                let mut payload = e.new_value.clone().or_else(|| e.value.clone()).unwrap_or_default();
                payload.resize(len as usize, 0);
                let got = cl.allocators.borrow_mut().get_mut(&e.table).expect("allocator").alloc();
                let Ok((addr, cv)) = got else {
                    let mut al = cl.allocators.borrow_mut();
                    for (t, a, cv) in allocs {
                        al.get_mut(&t).expect("allocator").free(a, cv);
                    }
                    return Err(AbortReason::OutOfMemory);
                };
                allocs.push((e.table, addr, cv));
                let cell = CvtCell {
                    head_cv: cv,
                    valid: true,
                    tombstone: false,
                    address: addr,
                    version: INVISIBLE,
                    tail_cv: cv,
                };
                let value = payload_value(&payload);
                (cell, Some((addr, encode_record(&payload, cv))), value)
            };
            image.cells[choice.index] = cell;
            plan.push(PlannedWrite {
                key: e.key,
                table: e.table,
                cvt_addr,
                cell_index: choice.index,
                image,
                record,
                new_slot,
                cells_only: self.mn_mode() && !new_slot,
                released: choice
                    .released
                    .into_iter()
                    .filter(|(a, _)| *a != 0 && !tombs.contains(a))
                    .collect(),
                replicas: cl.catalog.replicas(meta.bucket_index(e.key)),
                tombstone: intent == WriteIntent::Delete,
                value,
                locally_locked: e.lock.is_some_and(|(m, o)| o == self.cn && m == LockMode::Write),
            });
        }
        Ok(plan)
    }

    async fn write_phase(&self, ctx: &mut TxnContext, mut plan: Vec<PlannedWrite>) {
        let cl = self.cluster.clone();
        let txn = ctx.txn_id;
        ctx.status = TxnStatus::Committing;
        if let Some(a) = cl.active.borrow_mut().get_mut(&txn) {
            a.phase = TxnPhase::Committing;
        }
        let mut ops = Self::read_ops(ctx);
        ops.extend(plan.iter().map(|w| HistOp {
            table: w.table,
            key: w.key,
            kind: OpKind::Write {
                version: INVISIBLE,
                tombstone: w.tombstone,
            },
            value: w.value,
        }));
        cl.history.borrow_mut().register_pending(HistoryRecord {
            seq: 0,
            txn_id: txn,
            kind: ctx.kind,
            read_only: false,
            cn: self.cn,
            start_ts: ctx.start_ts,
            commit_ts: None,
            ops,
            outcome: Outcome::Committed,
            app_delta: ctx.app_delta,
            start_time: ctx.start_time,
            visible_time: SimTime::ZERO,
        });
        self.probe(CrashStep::BeforeLog).await;

        // 1. log, records and CVTs with the version left INVISIBLE
        let log = CommitLogRecord {
            txn_id: txn,
            entries: plan
                .iter()
                .map(|w| LogEntry {
                    table_id: w.table,
                    key: w.key,
                    cvt_addr: w.cvt_addr,
                    cell_index: w.cell_index as u8,
                    insert: w.new_slot,
                    cell: w.image.cells[w.cell_index],
                })
                .collect(),
        }
        .encode()
        .expect("write set size checked");
        let log_addr = cl.log_addr(self.global());
        let log_replicas = cl.catalog.replicas(self.global() as u64);
        let mut done = cl.now();
        for r in &log_replicas {
            done = done.max(cl.fabric.issue_write(*r, log_addr, &log).expect(MN));
        }
        self.probe(CrashStep::AfterLog).await;
        for (k, w) in plan.iter().enumerate() {
            let img = encode_cvt(&w.image);
            for (j, r) in w.replicas.iter().enumerate() {
                if let Some((addr, rec)) = &w.record {
                    done = done.max(cl.fabric.issue_write(*r, *addr, rec).expect(MN));
                }
                let t = if w.cells_only {
                    cl.fabric
                        .issue_write(*r, w.cvt_addr + CVT_HEADER_LEN as u64, &img[CVT_HEADER_LEN..])
                } else {
                    cl.fabric.issue_write(*r, w.cvt_addr, &img)
                };
                done = done.max(t.expect(MN));
                if k == 0 && j == 0 {
                    self.probe(CrashStep::PartialData).await;
                }
            }
        }
        cl.sim.sleep_until(done).await;
        self.probe(CrashStep::DataDone).await;

        // 2. commit timestamp
        let tc = cl.ts.next_timestamp().await;
        ctx.commit_ts = Some(tc);
        self.probe(CrashStep::AfterCommitTs).await;

        // 3. make visible
        let visible_at = cl.now();
        let mut done = visible_at;
        for (k, w) in plan.iter().enumerate() {
            let off = w.cvt_addr + (CVT_HEADER_LEN + w.cell_index * CVT_CELL_LEN + CELL_VERSION_OFFSET) as u64;
            for (j, r) in w.replicas.iter().enumerate() {
                done = done.max(cl.fabric.issue_write(*r, off, &tc.to_le_bytes()).expect(MN));
                if k == 0 && j == 0 {
                    self.probe(CrashStep::PartialVisible).await;
                }
            }
        }
        cl.sim.sleep_until(done).await;
        cl.history
            .borrow_mut()
            .finalize(txn, Outcome::Committed, Some(tc), visible_at);
        if let Some(a) = cl.active.borrow_mut().get_mut(&txn) {
            a.phase = TxnPhase::Finalized(Outcome::Committed);
        }
        ctx.status = TxnStatus::Committed;
        self.probe(CrashStep::VisibleDone).await;
        for r in &log_replicas {
            cl.fabric
                .issue_write(*r, log_addr + LOG_STATE_OFFSET as u64, &[STATE_RETIRED])
                .expect(MN);
        }
        self.probe(CrashStep::AfterRetire).await;

        // caches and memory
        let use_vt = self.vt_enabled();
        let node = self.node();
        for w in &mut plan {
            w.image.cells[w.cell_index].version = tc;
            if w.new_slot {
                node.addrs.insert(w.key, w.cvt_addr);
            }
            if use_vt && w.locally_locked {
                node.vt.update_local(w.key, w.image.clone());
            }
        }
        {
            let mut al = cl.allocators.borrow_mut();
            for w in &plan {
                for &(a, cv) in &w.released {
                    al.get_mut(&w.table).expect("allocator").free(a, cv);
                }
            }
        }

        // 4. unlock: local now, remote without waiting
        self.release_local(ctx);
        self.probe(CrashStep::AfterLocalUnlock).await;
        self.release_remote(ctx, true).await;
        self.mn_release(ctx).await;
        self.finish(ctx);
    }
}

fn grant(ctx: &mut TxnContext, w: &Want, owner: u16) {
    ctx.locks.push(LockAttempt {
        target: w.target,
        mode: w.mode,
        owner,
    });
    for &i in &w.entries {
        let e = &mut ctx.entries[i];
        if w.target.index_bucket {
            e.bucket_lock = Some((w.target.key, owner));
        } else {
            e.lock = Some((w.mode, owner));
        }
    }
}

/// Updates add one to the leading integer; inserts write zeroes.
pub fn default_writes(ctx: &TxnContext) -> Writes {
    let mut w = Writes::default();
    for e in ctx.write_set() {
        if e.access == Access::ReadWrite(WriteIntent::Update) {
            let mut p = e.value.clone().unwrap_or_default();
            let v = payload_value(&p).wrapping_add(1).to_le_bytes();
            let n = p.len().min(8);
            p[..n].copy_from_slice(&v[..n]);
            w.values.push((e.key, p));
        }
    }
    w
}
