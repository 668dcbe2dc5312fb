//! Preallocated arena split into fixed-size blocks, first-fit by offset,
//! coalescing on free.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOCK_BYTES: u64 = 1024;

pub type AllocId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Empty,
    Allocated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolNode {
    pub id: AllocId,
    pub offset: u64,
    pub blocks: u64,
    pub state: NodeState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("pool of {0} bytes is smaller than one block")]
    TooSmall(u64),
    #[error("zero-byte allocation")]
    ZeroSize,
    #[error("out of pool memory: need {need_blocks} blocks, largest free run is {largest_free} blocks")]
    OutOfMemory { need_blocks: u64, largest_free: u64 },
    #[error("unknown allocation id {0}")]
    UnknownId(AllocId),
    #[error("allocation {0} was already freed")]
    DoubleFree(AllocId),
}

#[derive(Debug, Clone)]
pub struct MemoryPool {
    block_bytes: u64,
    capacity_blocks: u64,
    /// offset -> blocks
    empty: BTreeMap<u64, u64>,
    allocated: HashMap<AllocId, PoolNode>,
    next_id: AllocId,
    used_blocks: u64,
    high_water: u64,
}

impl MemoryPool {
    pub fn new(bytes: u64) -> Result<Self, PoolError> {
        Self::with_block_size(bytes, BLOCK_BYTES)
    }

    pub fn with_block_size(bytes: u64, block_bytes: u64) -> Result<Self, PoolError> {
        assert!(block_bytes > 0);
        if bytes < block_bytes {
            return Err(PoolError::TooSmall(bytes));
        }
        let capacity_blocks = bytes / block_bytes;
        let mut empty = BTreeMap::new();
        empty.insert(0, capacity_blocks);
        Ok(MemoryPool {
            block_bytes,
            capacity_blocks,
            empty,
            allocated: HashMap::new(),
            next_id: 0,
            used_blocks: 0,
            high_water: 0,
        })
    }

    pub fn blocks_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.block_bytes)
    }

    pub fn alloc(&mut self, bytes: u64) -> Result<AllocId, PoolError> {
        if bytes == 0 {
            return Err(PoolError::ZeroSize);
        }
        let need = self.blocks_for(bytes);
        let found = self.empty.iter().find(|(_, &b)| b >= need).map(|(&o, &b)| (o, b));
        let Some((offset, blocks)) = found else {
            return Err(PoolError::OutOfMemory { need_blocks: need, largest_free: self.largest_free_blocks() });
        };
        self.empty.remove(&offset);
        if blocks > need {
            self.empty.insert(offset + need, blocks - need);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.allocated.insert(id, PoolNode { id, offset, blocks: need, state: NodeState::Allocated });
        self.used_blocks += need;
        self.high_water = self.high_water.max(self.used_blocks);
        Ok(id)
    }

    pub fn free(&mut self, id: AllocId) -> Result<(), PoolError> {
        let node = match self.allocated.remove(&id) {
            Some(n) => n,
            None if id < self.next_id => return Err(PoolError::DoubleFree(id)),
            None => return Err(PoolError::UnknownId(id)),
        };
        self.used_blocks -= node.blocks;
        let mut offset = node.offset;
        let mut blocks = node.blocks;
        if let Some((&po, &pb)) = self.empty.range(..offset).next_back() {
            if po + pb == offset {
                self.empty.remove(&po);
                offset = po;
                blocks += pb;
            }
        }
        if let Some(&nb) = self.empty.get(&(node.offset + node.blocks)) {
            self.empty.remove(&(node.offset + node.blocks));
            blocks += nb;
        }
        self.empty.insert(offset, blocks);
        Ok(())
    }

    pub fn node(&self, id: AllocId) -> Option<&PoolNode> {
        self.allocated.get(&id)
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_blocks * self.block_bytes
    }

    pub fn used_blocks(&self) -> u64 {
        self.used_blocks
    }

    pub fn free_blocks(&self) -> u64 {
        self.capacity_blocks - self.used_blocks
    }

    pub fn largest_free_blocks(&self) -> u64 {
        self.empty.values().copied().max().unwrap_or(0)
    }

    pub fn high_water_blocks(&self) -> u64 {
        self.high_water
    }

    pub fn high_water_bytes(&self) -> u64 {
        self.high_water * self.block_bytes
    }

    pub fn reset_high_water(&mut self) {
        self.high_water = self.used_blocks;
    }

    /// Empty nodes in offset order. Empty nodes carry no allocation id.
    pub fn empty_nodes(&self) -> Vec<PoolNode> {
        self.empty
            .iter()
            .map(|(&offset, &blocks)| PoolNode { id: AllocId::MAX, offset, blocks, state: NodeState::Empty })
            .collect()
    }

    /// Allocated nodes in offset order.
    pub fn allocated_nodes(&self) -> Vec<PoolNode> {
        let mut v: Vec<PoolNode> = self.allocated.values().copied().collect();
        v.sort_by_key(|n| n.offset);
        v
    }

    /// `offset,blocks,state` rows for both lists, in offset order.
    pub fn dump_csv(&self) -> String {
        let mut nodes = self.empty_nodes();
        nodes.extend(self.allocated_nodes());
        nodes.sort_by_key(|n| n.offset);
        let mut out = String::from("offset,blocks,state\n");
        for n in nodes {
            let state = match n.state {
                NodeState::Empty => "empty",
                NodeState::Allocated => "allocated",
            };
            out.push_str(&format!("{},{},{}\n", n.offset, n.blocks, state));
        }
        out
    }

    /// Checks conservation, coalescing and non-overlap. Intended for tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let empty_total: u64 = self.empty.values().sum();
        let alloc_total: u64 = self.allocated.values().map(|n| n.blocks).sum();
        if empty_total + alloc_total != self.capacity_blocks {
            return Err(format!("conservation: {empty_total} + {alloc_total} != {}", self.capacity_blocks));
        }
        if alloc_total != self.used_blocks {
            return Err("used block counter drifted".into());
        }
        let mut spans: Vec<(u64, u64, bool)> = self.empty.iter().map(|(&o, &b)| (o, b, true)).collect();
        spans.extend(self.allocated.values().map(|n| (n.offset, n.blocks, false)));
        spans.sort_unstable();
        let mut cursor = 0;
        let mut prev_empty = false;
        for (o, b, is_empty) in spans {
            if b == 0 {
                return Err(format!("zero-length node at {o}"));
            }
            if o != cursor {
                return Err(format!("gap or overlap at offset {o}, expected {cursor}"));
            }
            if is_empty && prev_empty {
                return Err(format!("adjacent empty nodes at {o}"));
            }
            prev_empty = is_empty;
            cursor = o + b;
        }
        if cursor != self.capacity_blocks {
            return Err("nodes do not cover the pool".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_sizes() {
        let p = MemoryPool::new(1 << 20).unwrap();
        assert_eq!(p.capacity_blocks(), 1024);
        assert_eq!(p.empty_nodes().len(), 1);
        assert_eq!(p.high_water_blocks(), 0);
        assert_eq!(MemoryPool::new(12 << 30).unwrap().capacity_blocks(), 12_582_912);
        assert_eq!(MemoryPool::new(1536).unwrap().capacity_blocks(), 1);
        assert_eq!(MemoryPool::new(1000).unwrap_err(), PoolError::TooSmall(1000));
    }

    #[test]
    fn alloc_rounds_up() {
        let mut p = MemoryPool::new(10 * 1024).unwrap();
        let a = p.alloc(2500).unwrap();
        let n = p.node(a).unwrap();
        assert_eq!((n.offset, n.blocks), (0, 3));
        assert_eq!(p.alloc(0), Err(PoolError::ZeroSize));
        assert!(matches!(p.alloc(8 * 1024), Err(PoolError::OutOfMemory { need_blocks: 8, largest_free: 7 })));
    }

    #[test]
    fn first_fit_by_offset() {
        let mut p = MemoryPool::new(10 * 1024).unwrap();
        let a = p.alloc(2 * 1024).unwrap();
        let b = p.alloc(3 * 1024).unwrap();
        let c = p.alloc(5 * 1024).unwrap();
        p.free(a).unwrap();
        p.free(c).unwrap();
        // empty runs: [0..2) and [5..10)
        let d = p.alloc(4 * 1024).unwrap();
        assert_eq!(p.node(d).unwrap().offset, 5);
        let e = p.alloc(1024).unwrap();
        assert_eq!(p.node(e).unwrap().offset, 0);
        let _ = b;
        p.check_invariants().unwrap();
    }

    #[test]
    fn frees_coalesce() {
        let mut p = MemoryPool::new(6 * 1024).unwrap();
        let a = p.alloc(3 * 1024).unwrap();
        let b = p.alloc(3 * 1024).unwrap();
        p.free(a).unwrap();
        p.free(b).unwrap();
        assert_eq!(p.empty_nodes().len(), 1);
        assert_eq!(p.empty_nodes()[0].blocks, 6);
        assert_eq!(p.free(99), Err(PoolError::UnknownId(99)));
        assert_eq!(p.free(a), Err(PoolError::DoubleFree(a)));
        assert_eq!(p.high_water_blocks(), 6);
    }

    #[test]
    fn csv_dump_lists_both() {
        let mut p = MemoryPool::new(4 * 1024).unwrap();
        p.alloc(1024).unwrap();
        assert_eq!(p.dump_csv(), "offset,blocks,state\n0,1,allocated\n1,3,empty\n");
    }
}
