//! A simulated deployment: memory nodes behind the fabric, compute nodes
//! with their lock tables and caches, and the shared services (routing
//! map, timestamp service, membership, history).

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::{Rc, Weak};

use rand::Rng;
use thiserror::Error;

use crate::balance::{self, ReshardEvent};
use crate::fabric::{Fabric, FabricConfig, FabricError, NodeId, ServiceId};
use crate::locktable::{decode_lock_batch, encode_lock_response, LockCode, LockOp, LockTable};
use crate::memstore::{
    decode_bucket, decode_cvt, decode_record, encode_cvt, encode_record, Catalog, Cvt, CvtCell, LotusKey,
    MemstoreError, RecordAllocator, TableSchema,
};
use crate::recovery::{self, MembershipView, RecoveryEvent};
use crate::sharding::{route_txn, ShardMap, TxnRoute, LOAD_RECORD_LEN};
use crate::sim::{Sim, SimTime, WaitQueue};
use crate::txn::history::{History, HistoryRecord, Outcome};
use crate::txn::log::LOG_SLOT_LEN;
use crate::txn::{AbortReason, Coordinator, CrashStep, Isolation, LockPlacement, TimestampService, TxnSpec};
use crate::vtcache::{AddrCache, VtCache};

pub const SVC_LOCK: ServiceId = 1;
pub const SVC_TRANSFER: ServiceId = 2;
pub const SVC_READY: ServiceId = 3;

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub cns: u16,
    pub mns: u16,
    /// Copies of every bucket and record, primary included.
    pub replication: usize,
    /// Concurrent coordinators per compute node.
    pub coordinators: usize,
    pub placement: LockPlacement,
    pub isolation: Isolation,
    /// Version-table cache entries per compute node.
    pub cache_entries: usize,
    pub use_vt_cache: bool,
    /// Lock-table buckets per compute node.
    pub lock_buckets: usize,
    pub fabric: FabricConfig,
    /// Round trip to the timestamp service.
    pub ts_latency: SimTime,
    /// Age after which an old version may be reclaimed.
    pub gc_threshold: SimTime,
    pub lease_expiry: SimTime,
    pub lease_renew: SimTime,
    pub detect_interval: SimTime,
    pub reshard: bool,
    pub monitor_interval: SimTime,
    pub drain_timeout: SimTime,
    /// Wait between lock retries after `ShardNotOwned`.
    pub shard_retry: SimTime,
    /// Give up on `ShardNotOwned` after this long.
    pub shard_budget: SimTime,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            cns: 3,
            mns: 3,
            replication: 3,
            coordinators: 8,
            placement: LockPlacement::Disaggregated,
            isolation: Isolation::Serializable,
            cache_entries: 64 * 1024,
            use_vt_cache: true,
            lock_buckets: 1 << 14,
            fabric: FabricConfig::default(),
            ts_latency: SimTime::from_us(2),
            gc_threshold: SimTime::from_ms(10),
            lease_expiry: SimTime::from_ms(10),
            lease_renew: SimTime::from_ms(3),
            detect_interval: SimTime::from_ms(1),
            reshard: false,
            monitor_interval: SimTime::from_ms(100),
            drain_timeout: SimTime::from_ms(10),
            shard_retry: SimTime::from_us(50),
            shard_budget: SimTime::from_ms(2),
            seed: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Memstore(#[from] MemstoreError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("no free CVT slot for key {0:#x}")]
    BucketFull(LotusKey),
    #[error("key {0:#x} loaded twice")]
    DuplicateKey(LotusKey),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeState {
    Ready,
    Down,
    /// Back up with an empty lock table, waiting for the barrier.
    Restarting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TxnResult {
    /// 0 when the request never reached a coordinator.
    pub txn_id: u64,
    pub cn: u16,
    pub outcome: Outcome,
    pub lock_rpcs: u32,
}

impl TxnResult {
    pub fn failed(cn: u16, reason: AbortReason) -> Self {
        TxnResult {
            txn_id: 0,
            cn,
            outcome: Outcome::Aborted(reason),
            lock_rpcs: 0,
        }
    }

    pub fn committed(&self) -> bool {
        self.outcome == Outcome::Committed
    }
}

/// A transaction handed to a compute node, completed by one of its
/// coordinators.
pub struct Request {
    pub spec: TxnSpec,
    pub enqueued: SimTime,
    result: Cell<Option<TxnResult>>,
    done: WaitQueue,
}

impl Request {
    fn new(spec: TxnSpec, enqueued: SimTime) -> Self {
        Request {
            spec,
            enqueued,
            result: Cell::new(None),
            done: WaitQueue::new(),
        }
    }

    pub fn resolve(&self, sim: &Sim, r: TxnResult) {
        if self.result.get().is_none() {
            self.result.set(Some(r));
            self.done.notify_all(sim);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnPhase {
    Executing,
    /// First log byte written; the outcome is decided by the coordinator
    /// or, after a crash, by recovery.
    Committing,
    Finalized(Outcome),
}

/// Registry entry for a running transaction.
#[derive(Clone, Debug)]
pub struct ActiveTxn {
    pub cn: u16,
    pub coord: usize,
    pub kind: u8,
    pub read_only: bool,
    pub start_ts: u64,
    pub start_time: SimTime,
    /// Nodes holding (or maybe holding) a lock for this transaction.
    pub lock_cns: BTreeSet<u16>,
    pub phase: TxnPhase,
    /// Set by recovery or resharding; the coordinator aborts at its next
    /// step boundary.
    pub flag: Option<AbortReason>,
}

#[derive(Clone, Debug, Default)]
pub struct Stats {
    pub attempted: u64,
    pub committed: u64,
    pub committed_rw: u64,
    pub committed_ro: u64,
    pub aborts: BTreeMap<AbortReason, u64>,
    /// End-to-end latency of committed transactions, in ns.
    pub latencies_ns: Vec<u64>,
    /// Commits per simulated millisecond.
    pub timeline: Vec<u64>,
    /// Lock request and release messages sent between compute nodes.
    pub lock_rpcs: u64,
    pub single_shard_rw: u64,
    pub single_shard_rw_local: u64,
    pub vt_hits: u64,
    pub vt_stale_hits: u64,
    pub mn_lock_attempts: u64,
    pub mn_lock_acquired: u64,
    pub mn_lock_releases: u64,
    pub ownership_violations: u64,
    pub transfer_violations: u64,
    pub reshards: Vec<ReshardEvent>,
    pub recoveries: Vec<RecoveryEvent>,
    pub crashes: Vec<(u16, SimTime)>,
}

impl Stats {
    pub fn aborted(&self) -> u64 {
        self.aborts.values().sum()
    }

    /// Remote atomics the MN-side lock baseline issued.
    pub fn mn_lock_cas(&self) -> u64 {
        self.mn_lock_attempts + self.mn_lock_releases
    }
}

pub struct ComputeNode {
    pub id: u16,
    pub locks: LockTable,
    pub vt: VtCache,
    pub addrs: AddrCache,
    state: Cell<NodeState>,
    queue: RefCell<VecDeque<Rc<Request>>>,
    wake: WaitQueue,
    current: RefCell<Vec<Option<(Rc<Request>, u64)>>>,
    lat_sum_ns: Cell<u64>,
    lat_count: Cell<u64>,
    pub(crate) overload_history: RefCell<VecDeque<Vec<Option<f64>>>>,
}

impl ComputeNode {
    fn new(id: u16, cfg: &ClusterConfig) -> Self {
        ComputeNode {
            id,
            locks: LockTable::new(id, cfg.lock_buckets),
            vt: VtCache::new(cfg.cache_entries, cfg.coordinators),
            addrs: AddrCache::new(),
            state: Cell::new(NodeState::Ready),
            queue: RefCell::new(VecDeque::new()),
            wake: WaitQueue::new(),
            current: RefCell::new(vec![None; cfg.coordinators]),
            lat_sum_ns: Cell::new(0),
            lat_count: Cell::new(0),
            overload_history: RefCell::new(VecDeque::new()),
        }
    }

    pub fn state(&self) -> NodeState {
        self.state.get()
    }

    pub(crate) fn set_state(&self, s: NodeState) {
        self.state.set(s);
    }

    pub fn is_ready(&self) -> bool {
        self.state.get() == NodeState::Ready
    }

    pub fn queued(&self) -> usize {
        self.queue.borrow().len()
    }

    pub(crate) fn set_current_txn(&self, coord: usize, txn_id: u64) {
        if let Some((_, id)) = self.current.borrow_mut()[coord].as_mut() {
            *id = txn_id;
        }
    }

    /// Average request latency since the last call, in ns.
    pub(crate) fn take_latency(&self) -> Option<f64> {
        let (s, n) = (self.lat_sum_ns.replace(0), self.lat_count.replace(0));
        (n > 0).then(|| s as f64 / n as f64)
    }

    /// Forget everything held in memory, as after a restart.
    pub(crate) fn wipe(&self) {
        self.locks.clear();
        for s in self.locks.owned_shards() {
            self.locks.set_owned(s, false);
        }
        self.vt.clear();
        self.addrs.clear();
        self.overload_history.borrow_mut().clear();
        self.lat_sum_ns.set(0);
        self.lat_count.set(0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct CrashPlan {
    cn: u16,
    step: CrashStep,
    remaining: u32,
}

pub struct Cluster {
    pub sim: Sim,
    pub fabric: Rc<Fabric>,
    pub config: ClusterConfig,
    pub catalog: Catalog,
    pub nodes: Vec<ComputeNode>,
    pub router: RefCell<ShardMap>,
    pub ts: TimestampService,
    pub history: RefCell<History>,
    pub active: RefCell<BTreeMap<u64, ActiveTxn>>,
    pub stats: RefCell<Stats>,
    pub membership: RefCell<MembershipView>,
    pub log_base: u64,
    pub lease_base: u64,
    pub metrics_base: u64,
    pub(crate) allocators: RefCell<BTreeMap<u16, RecordAllocator>>,
    pub(crate) orphans: RefCell<BTreeMap<u64, Rc<Request>>>,
    pub(crate) transfer_token: Cell<bool>,
    crash_plan: Cell<Option<CrashPlan>>,
    next_txn: Cell<u64>,
    started: Cell<bool>,
    weak: Weak<Cluster>,
}

impl Cluster {
    pub fn new(config: ClusterConfig, tables: Vec<TableSchema>) -> Result<Rc<Cluster>, ClusterError> {
        if config.cns == 0 || config.mns == 0 || config.coordinators == 0 {
            return Err(ClusterError::Config("cns, mns and coordinators must be positive".into()));
        }
        if config.replication == 0 || config.replication > config.mns as usize {
            return Err(ClusterError::Config(format!(
                "replication {} needs 1..={} memory nodes",
                config.replication, config.mns
            )));
        }
        if config.lock_buckets == 0 || config.cache_entries == 0 {
            return Err(ClusterError::Config("lock buckets and cache entries must be positive".into()));
        }
        let sim = Sim::new();
        let fabric = Fabric::new(sim.clone(), config.fabric.clone());
        let mut catalog = Catalog::new(config.mns, config.replication);
        for t in tables {
            catalog.add_table(t)?;
        }
        let slots = config.cns as u64 * config.coordinators as u64;
        let log_base = catalog.reserve(slots * LOG_SLOT_LEN as u64);
        let lease_base = catalog.reserve(config.cns as u64 * 8);
        let metrics_base = catalog.reserve(config.cns as u64 * LOAD_RECORD_LEN as u64);
        catalog.register_all(&fabric)?;
        let allocators = catalog.tables().map(|t| (t.table_id(), RecordAllocator::new(t))).collect();
        let router = ShardMap::even(config.cns);
        let nodes: Vec<ComputeNode> = (0..config.cns)
            .map(|i| {
                let n = ComputeNode::new(i, &config);
                for s in router.shards_of(i) {
                    n.locks.set_owned(s, true);
                }
                n
            })
            .collect();
        let ts = TimestampService::new(sim.clone(), config.ts_latency);
        let load_ts = ts.next_now();
        let membership = MembershipView::new(config.cns as usize);
        let cluster = Rc::new_cyclic(|weak| Cluster {
            sim,
            fabric,
            catalog,
            nodes,
            router: RefCell::new(router),
            ts,
            history: RefCell::new(History::new(load_ts)),
            active: RefCell::new(BTreeMap::new()),
            stats: RefCell::new(Stats::default()),
            membership: RefCell::new(membership),
            log_base,
            lease_base,
            metrics_base,
            allocators: RefCell::new(allocators),
            orphans: RefCell::new(BTreeMap::new()),
            transfer_token: Cell::new(false),
            crash_plan: Cell::new(None),
            next_txn: Cell::new(1),
            started: Cell::new(false),
            weak: weak.clone(),
            config,
        });
        for n in 0..cluster.config.cns {
            let w = Rc::downgrade(&cluster);
            cluster.fabric.register_handler(
                NodeId::compute(n),
                Rc::new(move |from, svc, payload| match w.upgrade() {
                    Some(c) => c.handle_rpc(n, from, svc, payload),
                    None => Vec::new(),
                }),
            );
        }
        Ok(cluster)
    }

    pub fn rc(&self) -> Rc<Cluster> {
        self.weak.upgrade().expect("cluster dropped")
    }

    pub fn load_ts(&self) -> u64 {
        self.history.borrow().load_ts
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn coordinators_total(&self) -> usize {
        self.config.cns as usize * self.config.coordinators
    }

    pub fn log_addr(&self, global_coord: usize) -> u64 {
        self.log_base + (global_coord * LOG_SLOT_LEN) as u64
    }

    pub fn coordinator(&self, cn: u16, coord: usize) -> Coordinator {
        Coordinator::new(self.rc(), cn, coord)
    }

    pub(crate) fn next_txn_id(&self) -> u64 {
        let id = self.next_txn.get();
        self.next_txn.set(id + 1);
        id
    }

    pub fn node(&self, cn: u16) -> &ComputeNode {
        &self.nodes[cn as usize]
    }

    pub fn ready_cns(&self) -> Vec<u16> {
        self.nodes.iter().filter(|n| n.is_ready()).map(|n| n.id).collect()
    }

    // ---- loading -------------------------------------------------------------

    /// Store the initial version of a record on every replica, cost-free.
    pub fn load(&self, table: u16, key: LotusKey, payload: &[u8]) -> Result<(), ClusterError> {
        let meta = self.catalog.table(table)?;
        let bucket = meta.bucket_index(key);
        let replicas = self.catalog.replicas(bucket);
        let img = self.fabric.peek(replicas[0], meta.bucket_addr(bucket), meta.bucket_len())?;
        let cvts = decode_bucket(&img, meta.cvt_len())?;
        if cvts.iter().any(|c| c.header.occupied && c.header.key == key && c.header.table_id == table) {
            return Err(ClusterError::DuplicateKey(key));
        }
        let slot = cvts
            .iter()
            .position(|c| !c.header.occupied)
            .ok_or(ClusterError::BucketFull(key))?;
        let len = meta.schema.record_len;
        let (addr, cv) = self
            .allocators
            .borrow_mut()
            .get_mut(&table)
            .expect("allocator per table")
            .alloc()?;
        let mut p = payload.to_vec();
        p.resize(len as usize, 0);
        let record = encode_record(&p, cv);
        let mut cvt = Cvt::empty(key, table, len, meta.versions());
        cvt.cells[0] = CvtCell {
            head_cv: cv,
            valid: true,
            tombstone: false,
            address: addr,
            version: self.load_ts(),
            tail_cv: cv,
        };
        let img = encode_cvt(&cvt);
        let cvt_addr = meta.cvt_addr(bucket, slot);
        for r in replicas {
            self.fabric.poke(r, addr, &record)?;
            self.fabric.poke(r, cvt_addr, &img)?;
        }
        Ok(())
    }

    // ---- inspection (cost-free) ---------------------------------------------------

    /// Address and primary copy of the CVT for `key`.
    pub fn peek_cvt(&self, table: u16, key: LotusKey) -> Option<(u64, Cvt)> {
        let meta = self.catalog.table(table).ok()?;
        let bucket = meta.bucket_index(key);
        let primary = self.catalog.replicas(bucket)[0];
        let img = self.fabric.peek(primary, meta.bucket_addr(bucket), meta.bucket_len()).ok()?;
        let cvts = decode_bucket(&img, meta.cvt_len()).ok()?;
        let slot = cvts
            .iter()
            .position(|c| c.header.occupied && c.header.key == key && c.header.table_id == table)?;
        Some((meta.cvt_addr(bucket, slot), cvts[slot].clone()))
    }

    /// Raw bucket bytes of `key` on each replica.
    pub fn replica_buckets(&self, table: u16, key: LotusKey) -> Vec<Vec<u8>> {
        let meta = self.catalog.table(table).expect("known table");
        let bucket = meta.bucket_index(key);
        self.catalog
            .replicas(bucket)
            .into_iter()
            .map(|r| self.fabric.peek(r, meta.bucket_addr(bucket), meta.bucket_len()).unwrap())
            .collect()
    }

    /// Newest committed version and payload of `key`, read from every
    /// replica; `None` if absent, deleted, or the replicas disagree.
    pub fn peek_committed(&self, table: u16, key: LotusKey) -> Option<(u64, Vec<u8>)> {
        let meta = self.catalog.table(table).ok()?;
        let bucket = meta.bucket_index(key);
        let (addr, _) = self.peek_cvt(table, key)?;
        let mut seen = None;
        for r in self.catalog.replicas(bucket) {
            let cvt = decode_cvt(&self.fabric.peek(r, addr, meta.cvt_len()).ok()?).ok()?;
            let c = cvt.cells[cvt.newest()?];
            if c.tombstone {
                return None;
            }
            let rec = self.fabric.peek(r, c.address, meta.record_stride() as usize).ok()?;
            let got = (c.version, decode_record(&rec, meta.schema.record_len as usize));
            match &seen {
                None => seen = Some(got),
                Some(s) if *s == got => {}
                Some(_) => return None,
            }
        }
        seen
    }

    // ---- running -------------------------------------------------------------------

    /// Spawn coordinators, lease renewal, failure detection and, when
    /// enabled, load monitors.
    pub fn start(&self) {
        if self.started.replace(true) {
            return;
        }
        for n in 0..self.config.cns {
            self.spawn_node_tasks(n);
        }
        recovery::spawn_detector(&self.rc());
    }

    pub(crate) fn spawn_node_tasks(&self, cn: u16) {
        let me = self.rc();
        for c in 0..self.config.coordinators {
            let cl = me.clone();
            self.sim.spawn(Some(cn), async move { cl.coordinator_loop(cn, c).await });
        }
        recovery::spawn_lease(&me, cn);
        if self.config.reshard {
            balance::spawn_monitor(&me, cn);
        }
    }

    async fn coordinator_loop(self: Rc<Self>, cn: u16, c: usize) {
        let coord = Coordinator::new(self.clone(), cn, c);
        let node = &self.nodes[cn as usize];
        loop {
            let req = loop {
                let next = node.queue.borrow_mut().pop_front();
                match next {
                    Some(r) => break r,
                    None => node.wake.wait(&self.sim).await,
                }
            };
            node.current.borrow_mut()[c] = Some((req.clone(), 0));
            let res = coord.run_spec(&req.spec).await;
            node.current.borrow_mut()[c] = None;
            let lat = self.now().saturating_sub(req.enqueued).as_ns();
            node.lat_sum_ns.set(node.lat_sum_ns.get() + lat);
            node.lat_count.set(node.lat_count.get() + 1);
            req.resolve(&self.sim, res);
        }
    }

    /// Hand a transaction to `cn` and wait for its outcome.
    pub async fn submit(&self, cn: u16, spec: TxnSpec) -> TxnResult {
        let node = &self.nodes[cn as usize];
        if !node.is_ready() {
            return TxnResult::failed(cn, AbortReason::NodeFailure);
        }
        let req = Rc::new(Request::new(spec, self.now()));
        node.queue.borrow_mut().push_back(req.clone());
        node.wake.notify_one(&self.sim);
        loop {
            if let Some(r) = req.result.get() {
                return r;
            }
            req.done.wait(&self.sim).await;
        }
    }

    /// Hybrid routing over the current map and the nodes that are up.
    pub fn route<R: Rng>(&self, spec: &TxnSpec, rng: &mut R) -> u16 {
        let live = self.ready_cns();
        let route = TxnRoute {
            read_only: spec.read_only(),
            first_key: spec.first_key(),
        };
        route_txn(&self.router.borrow(), &live, route, rng)
    }

    /// Route, submit, and account for one attempt.
    pub async fn submit_routed<R: Rng>(&self, spec: &TxnSpec, rng: &mut R) -> TxnResult {
        let started = self.now();
        let cn = self.route(spec, rng);
        let res = self.submit(cn, spec.clone()).await;
        let mut st = self.stats.borrow_mut();
        st.attempted += 1;
        match res.outcome {
            Outcome::Committed => {
                st.committed += 1;
                if spec.read_only() {
                    st.committed_ro += 1;
                } else {
                    st.committed_rw += 1;
                }
                st.latencies_ns.push(self.now().saturating_sub(started).as_ns());
                let ms = (self.now().as_ns() / 1_000_000) as usize;
                if st.timeline.len() <= ms {
                    st.timeline.resize(ms + 1, 0);
                }
                st.timeline[ms] += 1;
            }
            Outcome::Aborted(r) => *st.aborts.entry(r).or_default() += 1,
        }
        res
    }

    // ---- RPC services ------------------------------------------------------------

    fn handle_rpc(&self, cn: u16, from: NodeId, svc: ServiceId, payload: &[u8]) -> Vec<u8> {
        let node = &self.nodes[cn as usize];
        match svc {
            SVC_LOCK => {
                let Ok(batch) = decode_lock_batch(payload) else {
                    return Vec::new();
                };
                if !node.is_ready() {
                    return encode_lock_response(&vec![LockCode::ShardNotOwned; batch.len()]);
                }
                let codes = node.locks.handle_lock_rpc(&batch, &mut |t| {
                    if !t.index_bucket {
                        node.vt.invalidate(t.key);
                    }
                });
                for (r, c) in batch.iter().zip(&codes) {
                    if r.op == LockOp::Acquire && c.is_ok() {
                        self.audit_acquire(cn, r.target.shard());
                    }
                }
                encode_lock_response(&codes)
            }
            SVC_TRANSFER => balance::handle_transfer(self, cn, payload),
            SVC_READY => recovery::handle_ready(self, cn, from, payload),
            _ => Vec::new(),
        }
    }

    /// Every granted lock is checked against the other nodes' ownership.
    pub(crate) fn audit_acquire(&self, cn: u16, shard: u16) {
        if self.nodes.iter().any(|n| n.id != cn && n.locks.owns(shard)) {
            self.stats.borrow_mut().ownership_violations += 1;
        }
    }

    // ---- registry ----------------------------------------------------------------------

    pub(crate) fn flag_txn(&self, txn_id: u64, reason: AbortReason) -> bool {
        match self.active.borrow_mut().get_mut(&txn_id) {
            Some(a) if a.phase == TxnPhase::Executing => {
                a.flag.get_or_insert(reason);
                true
            }
            _ => false,
        }
    }

    /// Transactions that may hold a lock on `cn`, other than its own.
    pub fn dependents_of(&self, cn: u16) -> Vec<u64> {
        self.active
            .borrow()
            .iter()
            .filter(|(_, a)| a.cn != cn && a.lock_cns.contains(&cn))
            .map(|(id, _)| *id)
            .collect()
    }

    // ---- failures ------------------------------------------------------------------------

    /// Crash `cn` when its coordinators reach `step` for the `nth` time.
    pub fn set_crash_step(&self, cn: u16, step: CrashStep, nth: u32) {
        self.crash_plan.set(Some(CrashPlan {
            cn,
            step,
            remaining: nth.max(1),
        }));
    }

    pub(crate) fn crash_due(&self, cn: u16, step: CrashStep) -> bool {
        match self.crash_plan.get() {
            Some(mut p) if p.cn == cn && p.step == step => {
                p.remaining -= 1;
                if p.remaining == 0 {
                    self.crash_plan.set(None);
                    true
                } else {
                    self.crash_plan.set(Some(p));
                    false
                }
            }
            _ => false,
        }
    }

    pub fn schedule_crash(&self, cn: u16, at: SimTime) {
        let me = self.rc();
        self.sim.spawn(None, async move {
            me.sim.sleep_until(at).await;
            me.crash_cn(cn);
        });
    }

    /// Fail-stop: the node's tasks vanish and it stops answering.
    pub fn crash_cn(&self, cn: u16) {
        let node = &self.nodes[cn as usize];
        if node.state() == NodeState::Down {
            return;
        }
        node.set_state(NodeState::Down);
        self.fabric.set_down(NodeId::compute(cn), true);
        self.sim.kill_group(cn);
        self.stats.borrow_mut().crashes.push((cn, self.now()));
        let queued: Vec<Rc<Request>> = node.queue.borrow_mut().drain(..).collect();
        for r in queued {
            r.resolve(&self.sim, TxnResult::failed(cn, AbortReason::Crashed));
        }
        let current: Vec<(Rc<Request>, u64)> = node.current.borrow_mut().iter_mut().filter_map(Option::take).collect();
        for (req, txn_id) in current {
            let entry = self.active.borrow().get(&txn_id).cloned();
            match entry.as_ref().map(|a| a.phase) {
                Some(TxnPhase::Committing) => {
                    self.orphans.borrow_mut().insert(txn_id, req);
                }
                Some(TxnPhase::Finalized(o)) => req.resolve(
                    &self.sim,
                    TxnResult {
                        txn_id,
                        cn,
                        outcome: o,
                        lock_rpcs: 0,
                    },
                ),
                _ => {
                    if let Some(a) = entry {
                        self.history.borrow_mut().push(HistoryRecord {
                            seq: 0,
                            txn_id,
                            kind: a.kind,
                            read_only: a.read_only,
                            cn,
                            start_ts: a.start_ts,
                            commit_ts: None,
                            ops: Vec::new(),
                            outcome: Outcome::Aborted(AbortReason::Crashed),
                            app_delta: 0,
                            start_time: a.start_time,
                            visible_time: self.now(),
                        });
                    }
                    req.resolve(
                        &self.sim,
                        TxnResult {
                            txn_id,
                            cn,
                            outcome: Outcome::Aborted(AbortReason::Crashed),
                            lock_rpcs: 0,
                        },
                    );
                }
            }
        }
        self.active.borrow_mut().retain(|_, a| a.cn != cn);
    }

    /// Drop every task so the cluster can be freed.
    pub fn shutdown(&self) {
        self.sim.kill_all();
    }

    /// Run the simulation for `d` more simulated time.
    pub fn settle(&self, d: SimTime) {
        self.sim.run_until(self.now() + d);
        self.sim.advance_to(self.now() + d);
    }
}
