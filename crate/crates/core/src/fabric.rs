//! Simulated disaggregated network.
//!
//! Memory nodes expose registered regions that compute nodes access with
//! one-sided READ/WRITE/CAS; compute nodes talk to each other with two-sided
//! RPC. Every operation is charged to the NIC(s) it crosses. A NIC serves
//! requests in arrival order, so an op issued while the NIC is busy queues
//! behind earlier work; this is what makes CAS-heavy traffic saturate a
//! memory node long before READ/WRITE traffic would.
//!
//! One-sided ops take effect at issue time. Since every request to a NIC
//! pays the same one-way latency, issue order equals service order and the
//! history stays linearizable.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sim::{Sim, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Compute,
    Memory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: u16,
}

impl NodeId {
    pub const fn compute(index: u16) -> Self {
        NodeId {
            kind: NodeKind::Compute,
            index,
        }
    }
    pub const fn memory(index: u16) -> Self {
        NodeId {
            kind: NodeKind::Memory,
            index,
        }
    }
    pub fn is_memory(&self) -> bool {
        self.kind == NodeKind::Memory
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Compute => write!(f, "cn{}", self.index),
            NodeKind::Memory => write!(f, "mn{}", self.index),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("range {addr:#x}+{len} on {node} is not inside one registered region")]
    OutOfRegion { node: NodeId, addr: u64, len: u64 },
    #[error("CAS address {0:#x} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("{0} is not a memory node")]
    NotMemoryNode(NodeId),
    #[error("rpc to {0} timed out")]
    Timeout(NodeId),
    #[error("region overlaps an existing region on {0}")]
    Overlap(NodeId),
}

/// Cost units per operation class and NIC service capacity.
///
/// One unit is the service cost of one 8-byte WRITE. Larger payloads pay one
/// extra unit per `surcharge_bytes`.
#[derive(Clone, Debug, PartialEq)]
pub struct NicCostModel {
    pub write_cost: u64,
    pub atomic_cost: u64,
    pub rpc_cost: u64,
    /// Cost units a NIC can serve per simulated millisecond.
    pub per_nic_capacity: u64,
    pub surcharge_bytes: u64,
}

impl Default for NicCostModel {
    fn default() -> Self {
        // 35 Mops WRITE vs 2.5 Mops CAS per NIC
        NicCostModel {
            write_cost: 1,
            atomic_cost: 14,
            rpc_cost: 1,
            per_nic_capacity: 35_000,
            surcharge_bytes: 256,
        }
    }
}

impl NicCostModel {
    pub fn unit_time(&self) -> SimTime {
        SimTime::from_ps(1_000_000_000 / self.per_nic_capacity.max(1))
    }

    fn surcharge(&self, len: usize) -> u64 {
        if self.surcharge_bytes == 0 {
            0
        } else {
            len as u64 / self.surcharge_bytes
        }
    }

    pub fn read_cost(&self, len: usize) -> u64 {
        self.write_cost + self.surcharge(len)
    }
    pub fn write_cost(&self, len: usize) -> u64 {
        self.write_cost + self.surcharge(len)
    }
    pub fn cas_cost(&self) -> u64 {
        self.atomic_cost
    }
    pub fn rpc_cost(&self, len: usize) -> u64 {
        self.rpc_cost + self.surcharge(len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FabricConfig {
    pub cost: NicCostModel,
    pub one_way_latency: SimTime,
    pub rpc_timeout: SimTime,
    pub rpc_retries: u32,
    /// Probability that any single RPC request or response is lost.
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            cost: NicCostModel::default(),
            one_way_latency: SimTime::from_ns(1_000),
            rpc_timeout: SimTime::from_us(20),
            rpc_retries: 3,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

/// Per-NIC operation counters. Counters are attributed to the target NIC.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NicAccount {
    pub reads: u64,
    pub writes: u64,
    pub atomics: u64,
    pub rpcs: u64,
    pub cost_units: u64,
    pub busy_until: SimTime,
}

impl NicAccount {
    pub fn total_ops(&self) -> u64 {
        self.reads + self.writes + self.atomics + self.rpcs
    }
}

pub struct MemoryRegion {
    pub owner: NodeId,
    pub base: u64,
    data: Vec<u8>,
}

impl MemoryRegion {
    pub fn len(&self) -> u64 {
        self.data.len() as u64
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.base + self.len())
    }
}

/// RPC service identifiers multiplexed over one handler per node.
pub type ServiceId = u8;

pub type RpcHandler = Rc<dyn Fn(NodeId, ServiceId, &[u8]) -> Vec<u8>>;

/// Completed RPCs remembered per target for at-most-once delivery.
const DEDUP_WINDOW: usize = 4096;

#[derive(Default)]
struct DedupTable {
    seen: HashMap<(NodeId, u64), Vec<u8>>,
    order: VecDeque<(NodeId, u64)>,
}

impl DedupTable {
    fn get(&self, key: &(NodeId, u64)) -> Option<&Vec<u8>> {
        self.seen.get(key)
    }
    fn insert(&mut self, key: (NodeId, u64), resp: Vec<u8>) {
        if self.seen.insert(key, resp).is_none() {
            self.order.push_back(key);
            while self.order.len() > DEDUP_WINDOW {
                if let Some(old) = self.order.pop_front() {
                    self.seen.remove(&old);
                }
            }
        }
    }
}

/// The shared simulated network.
pub struct Fabric {
    sim: Sim,
    config: FabricConfig,
    regions: RefCell<HashMap<NodeId, Vec<MemoryRegion>>>,
    nics: RefCell<HashMap<NodeId, NicAccount>>,
    handlers: RefCell<HashMap<NodeId, RpcHandler>>,
    dedup: RefCell<HashMap<NodeId, DedupTable>>,
    down: RefCell<HashSet<NodeId>>,
    rng: RefCell<ChaCha8Rng>,
    issued: Cell<u64>,
    next_rpc_id: Cell<u64>,
    rpc_timeouts: Cell<u64>,
    duplicate_deliveries: Cell<u64>,
}

impl Fabric {
    pub fn new(sim: Sim, config: FabricConfig) -> Rc<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xfab1_c000);
        Rc::new(Fabric {
            sim,
            config,
            regions: RefCell::new(HashMap::new()),
            nics: RefCell::new(HashMap::new()),
            handlers: RefCell::new(HashMap::new()),
            dedup: RefCell::new(HashMap::new()),
            down: RefCell::new(HashSet::new()),
            rng: RefCell::new(rng),
            issued: Cell::new(0),
            next_rpc_id: Cell::new(1),
            rpc_timeouts: Cell::new(0),
            duplicate_deliveries: Cell::new(0),
        })
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    /// Register `len` zeroed bytes at `base` on a memory node.
    pub fn register_region(&self, owner: NodeId, base: u64, len: u64) -> Result<(), FabricError> {
        if !owner.is_memory() {
            return Err(FabricError::NotMemoryNode(owner));
        }
        let mut regions = self.regions.borrow_mut();
        let list = regions.entry(owner).or_default();
        let end = base + len;
        if list
            .iter()
            .any(|r| base < r.base + r.len() && r.base < end)
        {
            return Err(FabricError::Overlap(owner));
        }
        list.push(MemoryRegion {
            owner,
            base,
            data: vec![0u8; len as usize],
        });
        list.sort_by_key(|r| r.base);
        self.nics.borrow_mut().entry(owner).or_default();
        Ok(())
    }

    fn with_region<T>(
        &self,
        node: NodeId,
        addr: u64,
        len: u64,
        f: impl FnOnce(&mut [u8]) -> T,
    ) -> Result<T, FabricError> {
        if !node.is_memory() {
            return Err(FabricError::NotMemoryNode(node));
        }
        let mut regions = self.regions.borrow_mut();
        let oor = FabricError::OutOfRegion { node, addr, len };
        let list = regions.get_mut(&node).ok_or(oor.clone())?;
        let idx = list.partition_point(|r| r.base <= addr);
        if idx == 0 {
            return Err(oor);
        }
        let region = &mut list[idx - 1];
        if !region.contains(addr, len) {
            return Err(oor);
        }
        let off = (addr - region.base) as usize;
        Ok(f(&mut region.data[off..off + len as usize]))
    }

    /// Charge `cost` units on `node`'s NIC for a request arriving at `arrival`.
    /// Returns when the NIC finishes serving it.
    fn charge(&self, node: NodeId, arrival: SimTime, cost: u64) -> SimTime {
        let service = SimTime::from_ps(cost * self.config.cost.unit_time().as_ps());
        let mut nics = self.nics.borrow_mut();
        let nic = nics.entry(node).or_default();
        let start = arrival.max(nic.busy_until);
        nic.busy_until = start + service;
        nic.cost_units += cost;
        nic.busy_until
    }

    fn count(&self, node: NodeId, f: impl FnOnce(&mut NicAccount)) {
        self.issued.set(self.issued.get() + 1);
        f(self.nics.borrow_mut().entry(node).or_default());
    }

    // ---- one-sided verbs, issue half ------------------------------------

    /// Issue a READ; returns the bytes and the completion time.
    pub fn issue_read(
        &self,
        target: NodeId,
        addr: u64,
        len: usize,
    ) -> Result<(Vec<u8>, SimTime), FabricError> {
        let bytes = self.with_region(target, addr, len as u64, |m| m.to_vec())?;
        self.count(target, |n| n.reads += 1);
        let lat = self.config.one_way_latency;
        let done = self.charge(target, self.now() + lat, self.config.cost.read_cost(len)) + lat;
        Ok((bytes, done))
    }

    pub fn issue_write(&self, target: NodeId, addr: u64, payload: &[u8]) -> Result<SimTime, FabricError> {
        self.with_region(target, addr, payload.len() as u64, |m| {
            m.copy_from_slice(payload)
        })?;
        self.count(target, |n| n.writes += 1);
        let lat = self.config.one_way_latency;
        let done = self.charge(target, self.now() + lat, self.config.cost.write_cost(payload.len())) + lat;
        Ok(done)
    }

    /// Issue a CAS on an aligned 8-byte little-endian word; returns the prior value.
    pub fn issue_cas(
        &self,
        target: NodeId,
        addr: u64,
        compare: u64,
        swap: u64,
    ) -> Result<(u64, SimTime), FabricError> {
        if addr % 8 != 0 {
            return Err(FabricError::Misaligned(addr));
        }
        let prior = self.with_region(target, addr, 8, |m| {
            let cur = u64::from_le_bytes(m[..8].try_into().unwrap());
            if cur == compare {
                m.copy_from_slice(&swap.to_le_bytes());
            }
            cur
        })?;
        self.count(target, |n| n.atomics += 1);
        let lat = self.config.one_way_latency;
        let done = self.charge(target, self.now() + lat, self.config.cost.cas_cost()) + lat;
        Ok((prior, done))
    }

    // ---- one-sided verbs, awaiting ---------------------------------------

    pub async fn rdma_read(&self, target: NodeId, addr: u64, len: usize) -> Result<Vec<u8>, FabricError> {
        let (bytes, done) = self.issue_read(target, addr, len)?;
        self.sim.sleep_until(done).await;
        Ok(bytes)
    }

    pub async fn rdma_write(&self, target: NodeId, addr: u64, payload: &[u8]) -> Result<(), FabricError> {
        let done = self.issue_write(target, addr, payload)?;
        self.sim.sleep_until(done).await;
        Ok(())
    }

    pub async fn rdma_cas(&self, target: NodeId, addr: u64, compare: u64, swap: u64) -> Result<u64, FabricError> {
        let (prior, done) = self.issue_cas(target, addr, compare, swap)?;
        self.sim.sleep_until(done).await;
        Ok(prior)
    }

    // ---- cost-free access for loading and instrumentation -----------------

    pub fn peek(&self, target: NodeId, addr: u64, len: usize) -> Result<Vec<u8>, FabricError> {
        self.with_region(target, addr, len as u64, |m| m.to_vec())
    }

    pub fn poke(&self, target: NodeId, addr: u64, payload: &[u8]) -> Result<(), FabricError> {
        self.with_region(target, addr, payload.len() as u64, |m| {
            m.copy_from_slice(payload)
        })
    }

    // ---- two-sided RPC ------------------------------------------------------

    pub fn register_handler(&self, node: NodeId, handler: RpcHandler) {
        self.handlers.borrow_mut().insert(node, handler);
        self.nics.borrow_mut().entry(node).or_default();
    }

    /// Mark a node crashed: it stops answering RPCs and forgets its
    /// at-most-once table.
    pub fn set_down(&self, node: NodeId, down: bool) {
        if down {
            self.down.borrow_mut().insert(node);
            self.dedup.borrow_mut().remove(&node);
        } else {
            self.down.borrow_mut().remove(&node);
        }
    }

    pub fn is_down(&self, node: NodeId) -> bool {
        self.down.borrow().contains(&node)
    }

    pub fn next_rpc_id(&self) -> u64 {
        let id = self.next_rpc_id.get();
        self.next_rpc_id.set(id + 1);
        id
    }

    fn dropped(&self) -> bool {
        let p = self.config.drop_probability;
        p > 0.0 && self.rng.borrow_mut().random_bool(p.min(1.0))
    }

    /// Two-sided call with timeout and bounded retries. The handler runs on
    /// the target when the request arrives; a retried request whose earlier
    /// copy already ran returns the remembered response instead of running
    /// the handler again.
    pub async fn rpc_call(
        &self,
        from: NodeId,
        target: NodeId,
        service: ServiceId,
        payload: &[u8],
    ) -> Result<Vec<u8>, FabricError> {
        let rpc_id = self.next_rpc_id();
        let lat = self.config.one_way_latency;
        let cost = self.config.cost.rpc_cost(payload.len());
        let mut timeout = self.config.rpc_timeout;
        for _attempt in 0..=self.config.rpc_retries {
            let sent = self.now();
            let deadline = sent + timeout;
            timeout = SimTime::from_ps(timeout.as_ps() * 2);
            self.count(target, |n| n.rpcs += 1);
            let departed = self.charge(from, sent, cost);
            let arrival = self.charge(target, departed + lat, cost);
            if self.dropped() {
                self.sim.sleep_until(deadline).await;
                continue;
            }
            self.sim.sleep_until(arrival).await;
            if self.is_down(target) {
                self.sim.sleep_until(deadline).await;
                continue;
            }
            let cached = self
                .dedup
                .borrow()
                .get(&target)
                .and_then(|t| t.get(&(from, rpc_id)).cloned());
            let response = match cached {
                Some(r) => {
                    self.duplicate_deliveries
                        .set(self.duplicate_deliveries.get() + 1);
                    r
                }
                None => {
                    let handler = self.handlers.borrow().get(&target).cloned();
                    let Some(handler) = handler else {
                        self.sim.sleep_until(deadline).await;
                        continue;
                    };
                    let r = handler(from, service, payload);
                    self.dedup
                        .borrow_mut()
                        .entry(target)
                        .or_default()
                        .insert((from, rpc_id), r.clone());
                    r
                }
            };
            if self.dropped() {
                self.sim.sleep_until(deadline).await;
                continue;
            }
            let back = self.now() + lat + SimTime::from_ps(cost * self.config.cost.unit_time().as_ps());
            self.sim.sleep_until(back).await;
            return Ok(response);
        }
        self.rpc_timeouts.set(self.rpc_timeouts.get() + 1);
        Err(FabricError::Timeout(target))
    }

    // ---- accounting -----------------------------------------------------

    pub fn nic(&self, node: NodeId) -> NicAccount {
        self.nics.borrow().get(&node).cloned().unwrap_or_default()
    }

    pub fn nics(&self) -> Vec<(NodeId, NicAccount)> {
        let mut v: Vec<_> = self
            .nics
            .borrow()
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Number of fabric ops issued (each RPC attempt counts once).
    pub fn issued_ops(&self) -> u64 {
        self.issued.get()
    }

    pub fn rpc_timeouts(&self) -> u64 {
        self.rpc_timeouts.get()
    }

    pub fn duplicate_deliveries(&self) -> u64 {
        self.duplicate_deliveries.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: FabricConfig) -> (Sim, Rc<Fabric>) {
        let sim = Sim::new();
        let f = Fabric::new(sim.clone(), cfg);
        f.register_region(NodeId::memory(0), 0x1000, 4096).unwrap();
        f.register_region(NodeId::memory(0), 0x2000, 4096).unwrap();
        (sim, f)
    }

    #[test]
    fn read_your_write() {
        let (sim, f) = setup(FabricConfig::default());
        let f2 = f.clone();
        let got = sim.block_on(async move {
            f2.rdma_write(NodeId::memory(0), 0x1008, &7u64.to_le_bytes()).await.unwrap();
            f2.rdma_read(NodeId::memory(0), 0x1008, 8).await.unwrap()
        });
        assert_eq!(got, 7u64.to_le_bytes());
    }

    #[test]
    fn read_spanning_regions_is_rejected() {
        let (_sim, f) = setup(FabricConfig::default());
        let err = f.issue_read(NodeId::memory(0), 0x1ff8, 16).unwrap_err();
        assert!(matches!(err, FabricError::OutOfRegion { .. }));
        assert!(f.issue_read(NodeId::memory(0), 0x0, 8).is_err());
        assert!(f.issue_read(NodeId::memory(1), 0x1000, 8).is_err());
    }

    #[test]
    fn zero_length_write_is_acknowledged() {
        let (_sim, f) = setup(FabricConfig::default());
        let before = f.peek(NodeId::memory(0), 0x1000, 4096).unwrap();
        f.issue_write(NodeId::memory(0), 0x1010, &[]).unwrap();
        assert_eq!(f.peek(NodeId::memory(0), 0x1000, 4096).unwrap(), before);
    }

    #[test]
    fn disjoint_writes_both_visible() {
        let (_sim, f) = setup(FabricConfig::default());
        f.issue_write(NodeId::memory(0), 0x1000, &[1; 8]).unwrap();
        f.issue_write(NodeId::memory(0), 0x1008, &[2; 8]).unwrap();
        let b = f.peek(NodeId::memory(0), 0x1000, 16).unwrap();
        assert_eq!(&b[..8], &[1; 8]);
        assert_eq!(&b[8..], &[2; 8]);
    }

    #[test]
    fn cas_semantics() {
        let (_sim, f) = setup(FabricConfig::default());
        let mn = NodeId::memory(0);
        assert_eq!(f.issue_cas(mn, 0x1000, 0, 5).unwrap().0, 0);
        assert_eq!(f.peek(mn, 0x1000, 8).unwrap(), 5u64.to_le_bytes());
        f.poke(mn, 0x1008, &3u64.to_le_bytes()).unwrap();
        assert_eq!(f.issue_cas(mn, 0x1008, 0, 5).unwrap().0, 3);
        assert_eq!(f.peek(mn, 0x1008, 8).unwrap(), 3u64.to_le_bytes());
        assert_eq!(f.issue_cas(mn, 0x1004, 0, 1), Err(FabricError::Misaligned(0x1004)));
        assert_eq!(f.nic(mn).atomics, 2);
    }

    #[test]
    fn serial_service_on_idle_nic() {
        let cfg = FabricConfig {
            one_way_latency: SimTime::ZERO,
            ..FabricConfig::default()
        };
        let (_sim, f) = setup(cfg);
        let unit = f.config().cost.unit_time();
        let t1 = f.issue_write(NodeId::memory(0), 0x1000, &[0; 8]).unwrap();
        let t2 = f.issue_write(NodeId::memory(0), 0x1000, &[0; 8]).unwrap();
        assert_eq!(t1, unit);
        assert_eq!(t2, SimTime::from_ps(2 * unit.as_ps()));
    }

    #[test]
    fn cas_batch_is_fourteen_times_slower() {
        let cfg = FabricConfig {
            one_way_latency: SimTime::ZERO,
            ..FabricConfig::default()
        };
        let (_sim, f) = setup(cfg.clone());
        let mut last_w = SimTime::ZERO;
        for _ in 0..100 {
            last_w = f.issue_write(NodeId::memory(0), 0x1000, &[0; 8]).unwrap();
        }
        let (_sim2, g) = setup(cfg);
        let mut last_c = SimTime::ZERO;
        for _ in 0..100 {
            last_c = g.issue_cas(NodeId::memory(0), 0x1000, 0, 0).unwrap().1;
        }
        // 100 * 14 units against 100 * 1 unit on an idle NIC
        assert!(last_c.as_ps() >= 14 * last_w.as_ps());
    }

    #[test]
    fn ops_are_conserved_across_nics() {
        let (sim, f) = setup(FabricConfig::default());
        let cn0 = NodeId::compute(0);
        let cn1 = NodeId::compute(1);
        f.register_handler(cn1, Rc::new(|_, _, p: &[u8]| p.to_vec()));
        let f2 = f.clone();
        sim.block_on(async move {
            f2.rdma_write(NodeId::memory(0), 0x1000, &[1; 8]).await.unwrap();
            f2.rdma_read(NodeId::memory(0), 0x2000, 64).await.unwrap();
            f2.rdma_cas(NodeId::memory(0), 0x2000, 0, 1).await.unwrap();
            f2.rpc_call(cn0, cn1, 0, b"x").await.unwrap();
        });
        let sum: u64 = f.nics().iter().map(|(_, n)| n.total_ops()).sum();
        assert_eq!(sum, f.issued_ops());
        assert_eq!(sum, 4);
    }

    #[test]
    fn echo_rpc() {
        let (sim, f) = setup(FabricConfig::default());
        f.register_handler(NodeId::compute(1), Rc::new(|_, _, p: &[u8]| p.to_vec()));
        let f2 = f.clone();
        let r = sim.block_on(async move { f2.rpc_call(NodeId::compute(0), NodeId::compute(1), 0, b"x").await });
        assert_eq!(r.unwrap(), b"x");
    }

    #[test]
    fn certain_drop_times_out() {
        let cfg = FabricConfig {
            drop_probability: 1.0,
            ..FabricConfig::default()
        };
        let (sim, f) = setup(cfg.clone());
        f.register_handler(NodeId::compute(1), Rc::new(|_, _, p: &[u8]| p.to_vec()));
        let f2 = f.clone();
        let r = sim.block_on(async move { f2.rpc_call(NodeId::compute(0), NodeId::compute(1), 0, b"x").await });
        assert_eq!(r, Err(FabricError::Timeout(NodeId::compute(1))));
        // 20 + 40 + 80 + 160 us of waiting
        assert_eq!(sim.now(), SimTime::from_us(300));
        assert_eq!(f.nic(NodeId::compute(1)).rpcs, u64::from(cfg.rpc_retries) + 1);
    }

    #[test]
    fn lost_response_does_not_rerun_handler() {
        let cfg = FabricConfig {
            drop_probability: 0.5,
            seed: 7,
            ..FabricConfig::default()
        };
        let (sim, f) = setup(cfg);
        let runs = Rc::new(Cell::new(0u32));
        let r2 = runs.clone();
        f.register_handler(
            NodeId::compute(1),
            Rc::new(move |_, _, _: &[u8]| {
                r2.set(r2.get() + 1);
                vec![1]
            }),
        );
        let f2 = f.clone();
        let outcomes = sim.block_on(async move {
            let mut oks = 0;
            for _ in 0..200 {
                if f2.rpc_call(NodeId::compute(0), NodeId::compute(1), 0, b"q").await.is_ok() {
                    oks += 1;
                }
            }
            oks
        });
        assert!(outcomes > 0);
        // each logical call runs the handler at most once
        assert!(runs.get() <= 200);
        assert!(f.duplicate_deliveries() > 0);
    }

    #[test]
    fn down_node_times_out() {
        let (sim, f) = setup(FabricConfig::default());
        f.register_handler(NodeId::compute(1), Rc::new(|_, _, p: &[u8]| p.to_vec()));
        f.set_down(NodeId::compute(1), true);
        let f2 = f.clone();
        let r = sim.block_on(async move { f2.rpc_call(NodeId::compute(0), NodeId::compute(1), 0, b"x").await });
        assert!(r.is_err());
    }
    /// All orderings of `n` distinct items.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn exactly_one_of_three_racing_cas_wins() {
        // Every issue order of cas(0 -> k), k = 1..=3, issued by distinct tasks.
        for order in permutations(3) {
            let (sim, f) = setup(FabricConfig::default());
            let wins = Rc::new(Cell::new(0u32));
            for (slot, k) in order.iter().enumerate() {
                let (f, w, s) = (f.clone(), wins.clone(), sim.clone());
                let k = *k as u64 + 1;
                sim.spawn(None, async move {
                    s.sleep(SimTime::from_ps(slot as u64)).await;
                    if f.rdma_cas(NodeId::memory(0), 0x1000, 0, k).await.unwrap() == 0 {
                        w.set(w.get() + 1);
                    }
                });
            }
            sim.run();
            assert_eq!(wins.get(), 1, "order {order:?}");
            let word = u64::from_le_bytes(f.peek(NodeId::memory(0), 0x1000, 8).unwrap().try_into().unwrap());
            assert_eq!(word, order[0] as u64 + 1);
        }
    }

    #[test]
    fn read_racing_cas_sees_whole_word() {
        let old = 0x0101_0101_0101_0101u64;
        let new = 0xfefe_fefe_fefe_fefeu64;
        for order in permutations(2) {
            let (sim, f) = setup(FabricConfig::default());
            f.poke(NodeId::memory(0), 0x1000, &old.to_le_bytes()).unwrap();
            let seen = Rc::new(Cell::new(0u64));
            for (slot, who) in order.iter().enumerate() {
                let (f, seen, s) = (f.clone(), seen.clone(), sim.clone());
                let who = *who;
                sim.spawn(None, async move {
                    s.sleep(SimTime::from_ps(slot as u64)).await;
                    if who == 0 {
                        f.rdma_cas(NodeId::memory(0), 0x1000, old, new).await.unwrap();
                    } else {
                        let b = f.rdma_read(NodeId::memory(0), 0x1000, 8).await.unwrap();
                        seen.set(u64::from_le_bytes(b.try_into().unwrap()));
                    }
                });
            }
            sim.run();
            assert!(seen.get() == old || seen.get() == new, "torn {:#x}", seen.get());
        }
    }

    #[derive(Clone, Copy, Debug)]
    enum WordOp {
        Read,
        Write(u64),
        Cas(u64, u64),
    }

    #[derive(Clone, Copy, Debug)]
    struct Event {
        op: WordOp,
        invoke: SimTime,
        respond: SimTime,
        result: u64,
    }

    /// Search for a total order consistent with real time under which every
    /// op returns what it returned.
    fn linearizable(events: &[Event], init: u64) -> bool {
        fn go(events: &[Event], used: &mut Vec<bool>, word: u64, left: usize) -> bool {
            if left == 0 {
                return true;
            }
            for i in 0..events.len() {
                if used[i] {
                    continue;
                }
                // i may go next only if no unused op finished before i started
                let blocked = (0..events.len())
                    .any(|j| j != i && !used[j] && events[j].respond < events[i].invoke);
                if blocked {
                    continue;
                }
                let e = events[i];
                let (ok, next) = match e.op {
                    WordOp::Read => (e.result == word, word),
                    WordOp::Write(v) => (true, v),
                    WordOp::Cas(c, s) => (e.result == word, if word == c { s } else { word }),
                };
                if ok {
                    used[i] = true;
                    if go(events, used, next, left - 1) {
                        return true;
                    }
                    used[i] = false;
                }
            }
            false
        }
        go(events, &mut vec![false; events.len()], init, events.len())
    }

    #[test]
    fn linearizability_checker_rejects_impossible_history() {
        let t = SimTime::from_ns;
        // a read finishing before a write starts cannot see that write
        let bad = [
            Event { op: WordOp::Read, invoke: t(0), respond: t(1), result: 9 },
            Event { op: WordOp::Write(9), invoke: t(2), respond: t(3), result: 0 },
        ];
        assert!(!linearizable(&bad, 0));
        let good = [
            Event { op: WordOp::Write(9), invoke: t(0), respond: t(3), result: 0 },
            Event { op: WordOp::Read, invoke: t(1), respond: t(2), result: 9 },
        ];
        assert!(linearizable(&good, 0));
    }

    #[test]
    fn random_word_histories_are_linearizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _round in 0..300 {
            let (sim, f) = setup(FabricConfig::default());
            let log = Rc::new(RefCell::new(Vec::new()));
            for _task in 0..3 {
                let ops: Vec<(u64, WordOp)> = (0..2)
                    .map(|_| {
                        let gap = rng.random_range(0..3000u64);
                        let op = match rng.random_range(0..3) {
                            0 => WordOp::Read,
                            1 => WordOp::Write(rng.random_range(0..3)),
                            _ => WordOp::Cas(rng.random_range(0..3), rng.random_range(0..3)),
                        };
                        (gap, op)
                    })
                    .collect();
                let (f, s, log) = (f.clone(), sim.clone(), log.clone());
                sim.spawn(None, async move {
                    let mn = NodeId::memory(0);
                    for (gap, op) in ops {
                        s.sleep(SimTime::from_ps(gap)).await;
                        let invoke = s.now();
                        let result = match op {
                            WordOp::Read => {
                                u64::from_le_bytes(f.rdma_read(mn, 0x1000, 8).await.unwrap().try_into().unwrap())
                            }
                            WordOp::Write(v) => {
                                f.rdma_write(mn, 0x1000, &v.to_le_bytes()).await.unwrap();
                                0
                            }
                            WordOp::Cas(c, w) => f.rdma_cas(mn, 0x1000, c, w).await.unwrap(),
                        };
                        log.borrow_mut().push(Event { op, invoke, respond: s.now(), result });
                    }
                });
            }
            sim.run();
            let events = log.borrow().clone();
            assert_eq!(events.len(), 6);
            assert!(linearizable(&events, 0), "{events:?}");
        }
    }
}
