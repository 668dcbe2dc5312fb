//! Checkpoint selection, offload/prefetch schedules, and the LRU tensor cache.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{TensorId, TensorTable};
use crate::netgraph::{ExecutionPlan, LayerId, LayerKind, NetworkDef};
use crate::poolalloc::{AllocId, MemoryPool, PoolError};

pub type CheckpointSet = BTreeSet<LayerId>;

pub fn mark_checkpoints(net: &NetworkDef, kinds: &[LayerKind]) -> CheckpointSet {
    net.layers().iter().filter(|l| kinds.contains(&l.kind)).map(|l| l.id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// device to host
    Off,
    /// host to device
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferKind {
    Scheduled,
    DemandMiss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub tensor: TensorId,
    pub layer: LayerId,
    pub direction: Direction,
    pub issue_step: usize,
    pub deadline_step: usize,
    pub bytes: u64,
    pub kind: TransferKind,
}

/// Checkpoints that own a device tensor, in forward order.
fn ordered(plan: &ExecutionPlan, cps: &CheckpointSet, table: &TensorTable) -> Vec<(LayerId, TensorId)> {
    let mut v: Vec<(LayerId, TensorId)> =
        cps.iter().filter_map(|&l| table.activation[l].map(|t| (l, t))).collect();
    v.sort_by_key(|&(l, _)| plan.step_of_forward[l]);
    v
}

/// One offload per checkpoint output, issued at its forward step and due by
/// the next checkpoint's forward step (end of the forward pass for the last).
pub fn schedule_offload(plan: &ExecutionPlan, cps: &CheckpointSet, table: &TensorTable) -> Vec<TransferEvent> {
    let cp = ordered(plan, cps, table);
    cp.iter()
        .enumerate()
        .map(|(j, &(l, t))| TransferEvent {
            tensor: t,
            layer: l,
            direction: Direction::Off,
            issue_step: plan.step_of_forward[l],
            deadline_step: cp.get(j + 1).map_or(plan.n(), |&(next, _)| plan.step_of_forward[next]),
            bytes: table.bytes(t),
            kind: TransferKind::Scheduled,
        })
        .collect()
}

/// At each checkpoint's backward step, fetch the previous checkpoint's output.
pub fn schedule_prefetch(plan: &ExecutionPlan, cps: &CheckpointSet, table: &TensorTable) -> Vec<TransferEvent> {
    let cp = ordered(plan, cps, table);
    cp.windows(2)
        .rev()
        .map(|w| {
            let (prev, t) = w[0];
            let (cur, _) = w[1];
            TransferEvent {
                tensor: t,
                layer: prev,
                direction: Direction::Pre,
                issue_step: plan.step_of_backward[cur],
                deadline_step: plan.step_of_backward[prev],
                bytes: table.bytes(t),
                kind: TransferKind::Scheduled,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidenceState {
    /// Not yet produced in this iteration.
    Absent,
    OnDevice,
    OnHost,
    Freed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Residence {
    pub state: ResidenceState,
    pub lock: bool,
    pub device: Option<AllocId>,
    /// A valid copy exists in host memory.
    pub host_copy: bool,
}

impl Default for Residence {
    fn default() -> Self {
        Residence { state: ResidenceState::Absent, lock: false, device: None, host_copy: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("tensor {0} is already cached")]
    Duplicate(TensorId),
    #[error("cannot free {need} bytes: all remaining cached tensors are locked")]
    AllLocked { need: u64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    bytes: u64,
    locked: bool,
    prev: Option<TensorId>,
    next: Option<TensorId>,
}

/// Recency list of device tensors, front = most recently used.
#[derive(Debug, Clone, Default)]
pub struct LruCache {
    entries: HashMap<TensorId, Entry>,
    head: Option<TensorId>,
    tail: Option<TensorId>,
    bytes: u64,
}

impl LruCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn contains(&self, t: TensorId) -> bool {
        self.entries.contains_key(&t)
    }

    pub fn is_locked(&self, t: TensorId) -> bool {
        self.entries.get(&t).is_some_and(|e| e.locked)
    }

    /// Ids from front to tail.
    pub fn order(&self) -> Vec<TensorId> {
        let mut v = Vec::with_capacity(self.entries.len());
        let mut cur = self.head;
        while let Some(t) = cur {
            v.push(t);
            cur = self.entries[&t].next;
        }
        v
    }

    fn unlink(&mut self, t: TensorId) -> Entry {
        let e = self.entries[&t];
        match e.prev {
            Some(p) => self.entries.get_mut(&p).unwrap().next = e.next,
            None => self.head = e.next,
        }
        match e.next {
            Some(n) => self.entries.get_mut(&n).unwrap().prev = e.prev,
            None => self.tail = e.prev,
        }
        e
    }

    fn link_front(&mut self, t: TensorId) {
        let old = self.head;
        {
            let e = self.entries.get_mut(&t).unwrap();
            e.prev = None;
            e.next = old;
        }
        if let Some(h) = old {
            self.entries.get_mut(&h).unwrap().prev = Some(t);
        } else {
            self.tail = Some(t);
        }
        self.head = Some(t);
    }

    /// Inserts at the front, unlocked.
    pub fn lru_in(&mut self, t: TensorId, bytes: u64) -> Result<(), CacheError> {
        if self.entries.contains_key(&t) {
            return Err(CacheError::Duplicate(t));
        }
        self.entries.insert(t, Entry { bytes, locked: false, prev: None, next: None });
        self.bytes += bytes;
        self.link_front(t);
        Ok(())
    }

    /// Moves a listed tensor to the front. Returns false if absent.
    pub fn touch(&mut self, t: TensorId) -> bool {
        if !self.entries.contains_key(&t) {
            return false;
        }
        self.unlink(t);
        self.link_front(t);
        true
    }

    pub fn remove(&mut self, t: TensorId) -> bool {
        if !self.entries.contains_key(&t) {
            return false;
        }
        let e = self.unlink(t);
        self.entries.remove(&t);
        self.bytes -= e.bytes;
        true
    }

    pub fn set_lock(&mut self, t: TensorId, locked: bool) {
        if let Some(e) = self.entries.get_mut(&t) {
            e.locked = locked;
        }
    }

    /// Removes unlocked tensors from the tail side until at least `need`
    /// bytes are released. Nothing is removed when that is impossible.
    pub fn lru_out(&mut self, need: u64) -> Result<Vec<TensorId>, CacheError> {
        let mut picked = Vec::new();
        let mut freed = 0;
        let mut cur = self.tail;
        while freed < need {
            let Some(t) = cur else {
                return Err(CacheError::AllLocked { need });
            };
            let e = self.entries[&t];
            if !e.locked {
                picked.push(t);
                freed += e.bytes;
            }
            cur = e.prev;
        }
        for &t in &picked {
            self.remove(t);
        }
        Ok(picked)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub alloc: AllocId,
    pub hit: bool,
    /// Tensors pushed out to make room, in eviction order.
    pub evicted: Vec<TensorId>,
}

/// Device residency of every tensor, backed by the pool and ordered by the
/// LRU list. Callers decide what each eviction or miss costs in transfers.
#[derive(Debug, Clone)]
pub struct TensorCache {
    pub lru: LruCache,
    pub pool: MemoryPool,
    pub residence: Vec<Residence>,
    bytes: Vec<u64>,
    pub hits: u64,
    pub misses: u64,
}

impl TensorCache {
    pub fn new(pool: MemoryPool, bytes: Vec<u64>) -> Self {
        TensorCache {
            lru: LruCache::new(),
            pool,
            residence: vec![Residence::default(); bytes.len()],
            bytes,
            hits: 0,
            misses: 0,
        }
    }

    pub fn bytes_of(&self, t: TensorId) -> u64 {
        self.bytes[t]
    }

    fn evict(&mut self, t: TensorId) -> Result<(), CacheError> {
        let r = &mut self.residence[t];
        if let Some(a) = r.device.take() {
            self.pool.free(a)?;
        }
        r.state = ResidenceState::OnHost;
        Ok(())
    }

    /// Allocates device memory for `t`, evicting as needed, and lists it at the front.
    pub fn place(&mut self, t: TensorId) -> Result<(AllocId, Vec<TensorId>), CacheError> {
        let bytes = self.bytes[t];
        let mut evicted = Vec::new();
        let alloc = loop {
            match self.pool.alloc(bytes) {
                Ok(a) => break a,
                Err(PoolError::OutOfMemory { .. }) => {
                    // Fragmentation can leave the freed bytes unusable; evict more and retry.
                    let short = bytes.saturating_sub(self.pool.free_blocks() * self.pool.block_bytes()).max(1);
                    let out = self.lru.lru_out(short)?;
                    for &e in &out {
                        self.evict(e)?;
                    }
                    evicted.extend(out);
                }
                Err(e) => return Err(e.into()),
            }
        };
        let r = &mut self.residence[t];
        r.state = ResidenceState::OnDevice;
        r.device = Some(alloc);
        self.lru.lru_in(t, bytes)?;
        Ok((alloc, evicted))
    }

    /// Hit: refresh recency. Miss: bring the tensor back onto the device.
    pub fn lru_check(&mut self, t: TensorId) -> Result<CheckOutcome, CacheError> {
        if self.residence[t].state == ResidenceState::OnDevice {
            self.hits += 1;
            self.lru.touch(t);
            return Ok(CheckOutcome { alloc: self.residence[t].device.unwrap(), hit: true, evicted: vec![] });
        }
        self.misses += 1;
        let (alloc, evicted) = self.place(t)?;
        Ok(CheckOutcome { alloc, hit: false, evicted })
    }

    pub fn lock(&mut self, t: TensorId) {
        self.residence[t].lock = true;
        self.lru.set_lock(t, true);
    }

    pub fn unlock(&mut self, t: TensorId) {
        self.residence[t].lock = false;
        self.lru.set_lock(t, false);
    }

    /// Ends the tensor's life in this iteration.
    pub fn release(&mut self, t: TensorId) -> Result<(), CacheError> {
        self.lru.remove(t);
        let r = &mut self.residence[t];
        if let Some(a) = r.device.take() {
            self.pool.free(a)?;
        }
        r.state = ResidenceState::Freed;
        r.lock = false;
        Ok(())
    }

    /// Drops the device copy of a tensor that has a host copy.
    pub fn drop_device_copy(&mut self, t: TensorId) -> Result<(), CacheError> {
        self.lru.remove(t);
        self.evict(t)
    }

    pub fn device_bytes(&self) -> u64 {
        self.lru.bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_order() {
        let mut c = LruCache::new();
        c.lru_in(2, 1).unwrap();
        assert_eq!(c.order(), vec![2]);
        c.lru_in(1, 1).unwrap();
        assert_eq!(c.order(), vec![1, 2]);
        assert_eq!(c.lru_in(1, 1), Err(CacheError::Duplicate(1)));
    }

    #[test]
    fn evicts_from_tail() {
        let mut c = LruCache::new();
        // front-to-tail order a, b, c
        c.lru_in(3, 5).unwrap();
        c.lru_in(2, 3).unwrap();
        c.lru_in(1, 4).unwrap();
        assert_eq!(c.lru_out(6).unwrap(), vec![3, 2]);
        assert_eq!(c.order(), vec![1]);
    }

    #[test]
    fn skips_locked_and_reports_all_locked() {
        let mut c = LruCache::new();
        c.lru_in(1, 4).unwrap();
        c.lru_in(2, 4).unwrap();
        c.set_lock(1, true);
        assert_eq!(c.lru_out(3).unwrap(), vec![2]);
        assert_eq!(c.lru_out(1), Err(CacheError::AllLocked { need: 1 }));
        assert_eq!(c.order(), vec![1]);
    }

    #[test]
    fn check_hits_and_misses() {
        let pool = MemoryPool::new(8 * 1024).unwrap();
        let mut tc = TensorCache::new(pool, vec![4096, 4096, 4096]);
        tc.place(0).unwrap();
        tc.place(1).unwrap();
        let hit = tc.lru_check(0).unwrap();
        assert!(hit.hit);
        assert_eq!(tc.lru.order(), vec![0, 1]);
        // pool full: placing tensor 2 evicts the tail (tensor 1)
        let (_, ev) = tc.place(2).unwrap();
        assert_eq!(ev, vec![1]);
        assert_eq!(tc.residence[1].state, ResidenceState::OnHost);
        tc.lock(2);
        tc.lock(0);
        assert!(matches!(tc.lru_check(1), Err(CacheError::AllLocked { .. })));
        tc.unlock(0);
        let miss = tc.lru_check(1).unwrap();
        assert!(!miss.hit);
        assert_eq!(miss.evicted, vec![0]);
        assert_eq!(tc.misses, 2);
    }
}
