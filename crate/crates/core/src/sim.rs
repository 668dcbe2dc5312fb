//! One training iteration on a simulated device: a block pool, a compute
//! stream and a single FIFO copy engine between device and host.
//!
//! Times are in microseconds, sizes in bytes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convselect::{feasible, profile_free_bytes, ConvSelection};
use crate::costmodel::{ConvAlgo, CostConfig, CostError, TensorId};
use crate::model::Model;
use crate::netgraph::{LayerKind, NetworkDef};
use crate::poolalloc::{AllocId, MemoryPool, PoolError, BLOCK_BYTES};
use crate::recompute::{self, PlanKind};
use crate::schedule::{Phase, Policy, Schedule};
use crate::utp::{CacheError, Direction, ResidenceState, TensorCache, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Features {
    pub liveness: bool,
    pub offload: bool,
    pub cache: bool,
    pub recompute: Option<PlanKind>,
    pub convselect: bool,
}

impl Features {
    pub fn all() -> Self {
        Features { liveness: true, offload: true, cache: true, recompute: Some(PlanKind::CostAware), convselect: true }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.liveness {
            for (on, name) in [(self.offload, "offload"), (self.cache, "cache"), (self.recompute.is_some(), "recompute")] {
                if on {
                    return Err(SimError::Config(format!("feature `{name}` requires `liveness`")));
                }
            }
        }
        Ok(())
    }
}

/// Comma-separated list: `liveness`, `offload`, `cache`, `recompute` (cost-aware),
/// `recompute=speed|memory|cost-aware`, `convselect`, `all`, `none`.
impl FromStr for Features {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut f = Features::default();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "all" => f = Features::all(),
                "none" => f = Features::default(),
                "liveness" => f.liveness = true,
                "offload" => f.offload = true,
                "cache" => f.cache = true,
                "convselect" | "conv-select" => f.convselect = true,
                "recompute" => f.recompute = Some(PlanKind::CostAware),
                other => match other.strip_prefix("recompute=") {
                    Some(kind) => f.recompute = Some(kind.parse()?),
                    None => return Err(format!("unknown feature `{other}`")),
                },
            }
        }
        Ok(f)
    }
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        for (on, name) in [(self.liveness, "liveness"), (self.offload, "offload"), (self.cache, "cache")] {
            if on {
                parts.push(name.into());
            }
        }
        if let Some(k) = self.recompute {
            parts.push(format!("recompute={k}"));
        }
        if self.convselect {
            parts.push("convselect".into());
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocator {
    /// Preallocated block pool, no per-call cost.
    #[default]
    Pool,
    /// Device allocator called for every allocation and free.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub pool_bytes: u64,
    pub block_bytes: u64,
    /// Copy engine bandwidth in bytes per microsecond.
    pub bandwidth: f64,
    pub allocator: Allocator,
    /// Cost of one native allocator call in microseconds.
    pub native_call_cost: f64,
    pub features: Features,
    pub cost: CostConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            pool_bytes: 12 << 30,
            block_bytes: BLOCK_BYTES,
            bandwidth: 8000.0,
            allocator: Allocator::Pool,
            native_call_cost: 100.0,
            features: Features::default(),
            cost: CostConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.features.validate()?;
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(SimError::Config("bandwidth must be positive".into()));
        }
        if !(self.native_call_cost.is_finite() && self.native_call_cost >= 0.0) {
            return Err(SimError::Config("native_call_cost must be non-negative".into()));
        }
        if self.block_bytes == 0 {
            return Err(SimError::Config("block_bytes must be positive".into()));
        }
        if self.pool_bytes < self.block_bytes {
            return Err(SimError::Config(format!("pool of {} bytes holds no block", self.pool_bytes)));
        }
        if self.features.cache && self.allocator == Allocator::Native {
            return Err(SimError::Config("the tensor cache needs the pool allocator".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("pool of {pool} bytes is below the least working set of {l_peak} bytes (layer {layer})")]
    PoolTooSmall { pool: u64, l_peak: u64, layer: String },
    #[error("scheduling failed at step {label} ({layer}): {reason}")]
    Scheduling { step: usize, label: f64, layer: String, reason: String },
}

impl SimError {
    /// 2 for rejected input, 3 for a run that could not be scheduled.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Scheduling { .. } => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub slot: usize,
    pub step: usize,
    pub label: f64,
    pub phase: Phase,
    pub layer: String,
    /// Bytes of tensors on the device while the slot runs (workspace excluded).
    pub resident_bytes: u64,
    pub live_tensors: usize,
    pub pool_used_bytes: u64,
    pub workspace_bytes: u64,
    pub start: f64,
    pub end: f64,
    pub compute: f64,
    /// Time the slot waited on transfers before it could start.
    pub stall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    /// Label of the slot that issued the transfer.
    pub step: f64,
    pub tensor: TensorId,
    pub layer: String,
    pub direction: Direction,
    pub bytes: u64,
    pub issue: f64,
    pub complete: f64,
    pub kind: TransferKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_peak: u64,
    pub liveness_formula: u64,
    pub offload_formula: u64,
    pub l_peak: u64,
    pub l_peak_layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub batch: u64,
    pub pool_bytes: u64,
    pub features: Features,
    pub steps: Vec<StepRecord>,
    pub peak_bytes: u64,
    pub peak_step: usize,
    pub peak_label: f64,
    pub peak_layer: String,
    pub pool_high_water_bytes: u64,
    pub scheduled_bytes: u64,
    pub demand_bytes: u64,
    /// Bytes moved because of memory pressure. Without the cache every
    /// planned transfer counts; with it, refetches, demand offloads and the
    /// host copies of refetched tensors.
    pub communication_bytes: u64,
    pub transfers: Vec<TransferRecord>,
    pub extra_recompute: usize,
    pub conv_selections: Vec<ConvSelection>,
    pub iteration_time: f64,
    pub compute_time: f64,
    pub transfer_time: f64,
    pub stall_time: f64,
    /// Wait after the last slot for outstanding transfers to finish.
    pub drain_time: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Batch,
    Pool,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(SweepAxis::Batch),
            "pool" | "pool_bytes" | "pool-bytes" => Ok(SweepAxis::Pool),
            other => Err(format!("unknown sweep axis `{other}` (expected batch or pool)")),
        }
    }
}

/// Runs one iteration per value; a failing value does not stop the sweep.
pub fn sweep(net: &NetworkDef, cfg: &SimConfig, axis: SweepAxis, values: &[u64]) -> Vec<Result<SimReport, SimError>> {
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match axis {
                SweepAxis::Batch => c.cost.batch = v,
                SweepAxis::Pool => c.pool_bytes = v,
            }
            run_iteration(net, &c)
        })
        .collect()
}

pub fn run_iteration(net: &NetworkDef, cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let m = Model::build(net, &cfg.cost)?;
    let (l_peak, l_layer) = m.l_peak();
    if cfg.pool_bytes < l_peak {
        return Err(SimError::PoolTooSmall { pool: cfg.pool_bytes, l_peak, layer: m.net.layer(l_layer).name.clone() });
    }
    let f = cfg.features;
    let rplan = f.recompute.map(|k| recompute::plan(&m, k, f.offload));
    let policy = Policy { liveness: f.liveness, offload: f.offload, recompute: rplan.as_ref().map(|p| p.choices.as_slice()) };
    let sched = Schedule::build(&m, &policy);
    debug_assert_eq!(sched.validate(&m.table), Ok(()));
    let mut engine = Engine::new(&m, &sched, cfg)?;
    engine.run()?;

    let pool_high_water_bytes = engine.high_water();
    let steps = engine.records;
    let mut peak = 0;
    for (i, r) in steps.iter().enumerate() {
        if r.resident_bytes > steps[peak].resident_bytes {
            peak = i;
        }
    }
    let transfers = engine.transfers;
    let scheduled_bytes = transfers.iter().filter(|t| t.kind == TransferKind::Scheduled).map(|t| t.bytes).sum();
    let demand_bytes = transfers.iter().filter(|t| t.kind == TransferKind::DemandMiss).map(|t| t.bytes).sum();
    let communication_bytes = if f.cache {
        let refetched_copies: u64 = (0..m.table.len()).filter(|&t| engine.refetched[t]).map(|t| engine.lazy_bytes[t]).sum();
        engine.pressure_bytes + refetched_copies
    } else {
        transfers.iter().map(|t| t.bytes).sum()
    };
    // The iteration ends once the copy engine is idle too.
    let last_end = steps.last().map_or(0.0, |r| r.end);
    let drain_time = transfers.iter().map(|t| t.complete).fold(last_end, f64::max) - last_end;
    let (cache_hits, cache_misses) = engine.cache.as_ref().map_or((0, 0), |c| (c.hits, c.misses));
    Ok(SimReport {
        batch: cfg.cost.batch,
        pool_bytes: cfg.pool_bytes,
        features: f,
        peak_bytes: steps[peak].resident_bytes,
        peak_step: steps[peak].step,
        peak_label: steps[peak].label,
        peak_layer: steps[peak].layer.clone(),
        pool_high_water_bytes,
        scheduled_bytes,
        demand_bytes,
        communication_bytes,
        transfer_time: transfers.iter().map(|t| t.complete - t.issue).sum(),
        transfers,
        extra_recompute: sched.extra,
        conv_selections: engine.selections,
        iteration_time: last_end + drain_time,
        drain_time,
        compute_time: steps.iter().map(|r| r.compute).sum(),
        stall_time: steps.iter().map(|r| r.stall).sum(),
        cache_hits,
        cache_misses,
        comparison: Comparison {
            baseline_peak: m.baseline_peak(),
            liveness_formula: m.liveness_formula(),
            offload_formula: m.offload_formula(),
            l_peak,
            l_peak_layer: m.net.layer(l_layer).name.clone(),
        },
        steps,
    })
}

struct Engine<'a> {
    m: &'a Model,
    sched: &'a Schedule,
    cfg: &'a SimConfig,
    /// Device pool outside cache mode (absent for the native allocator).
    pool: Option<MemoryPool>,
    cache: Option<TensorCache>,
    allocs: Vec<Option<AllocId>>,
    /// Tensors allocated / released at each slot.
    starts: Vec<Vec<TensorId>>,
    ends: Vec<Vec<TensorId>>,
    /// Planned transfers by issue slot (indices into `sched.transfers`).
    issues: Vec<Vec<usize>>,
    /// Earliest start of each slot imposed by offloads whose memory it reuses.
    slot_wait: Vec<f64>,
    /// Time each tensor's device copy becomes valid.
    ready_at: Vec<f64>,
    /// Completion time of each tensor's host copy, if one exists.
    host_copy: Vec<Option<f64>>,
    lazy_bytes: Vec<u64>,
    refetched: Vec<bool>,
    pressure_bytes: u64,
    dma_free: f64,
    transfers: Vec<TransferRecord>,
    selections: Vec<ConvSelection>,
    records: Vec<StepRecord>,
}

impl<'a> Engine<'a> {
    fn new(m: &'a Model, sched: &'a Schedule, cfg: &'a SimConfig) -> Result<Self, SimError> {
        let nslots = sched.slots.len();
        let nt = m.table.len();
        let pool = match cfg.allocator {
            Allocator::Pool => Some(
                MemoryPool::with_block_size(cfg.pool_bytes, cfg.block_bytes).map_err(|e| SimError::Config(e.to_string()))?,
            ),
            Allocator::Native => None,
        };
        let mut starts = vec![Vec::new(); nslots];
        let mut ends = vec![Vec::new(); nslots];
        let mut issues = vec![Vec::new(); nslots];
        let cache = if cfg.features.cache {
            // Offloaded tensors stay on the device until evicted: one
            // lifetime from production to last use.
            let offloaded: BTreeSet<TensorId> =
                sched.transfers.iter().filter(|t| t.direction == Direction::Off).map(|t| t.tensor).collect();
            let mut merged: Vec<Option<(usize, usize)>> = vec![None; nt];
            for iv in &sched.intervals {
                if offloaded.contains(&iv.tensor) {
                    let e = merged[iv.tensor].get_or_insert((iv.start, iv.end));
                    e.0 = e.0.min(iv.start);
                    e.1 = e.1.max(iv.end);
                } else {
                    starts[iv.start].push(iv.tensor);
                    ends[iv.end].push(iv.tensor);
                }
            }
            for (t, span) in merged.iter().enumerate() {
                if let Some((a, b)) = *span {
                    starts[a].push(t);
                    ends[b].push(t);
                }
            }
            let bytes = m.table.tensors.iter().map(|t| t.bytes).collect();
            Some(TensorCache::new(pool.clone().expect("cache runs on the pool allocator"), bytes))
        } else {
            for iv in &sched.intervals {
                starts[iv.start].push(iv.tensor);
                ends[iv.end].push(iv.tensor);
            }
            None
        };
        for (k, tr) in sched.transfers.iter().enumerate() {
            issues[tr.issue_slot].push(k);
        }
        for v in starts.iter_mut().chain(ends.iter_mut()) {
            v.sort_unstable();
        }
        Ok(Engine {
            m,
            sched,
            cfg,
            pool: if cache.is_some() { None } else { pool },
            cache,
            allocs: vec![None; nt],
            starts,
            ends,
            issues,
            slot_wait: vec![0.0; nslots + 1],
            ready_at: vec![0.0; nt],
            host_copy: vec![None; nt],
            lazy_bytes: vec![0; nt],
            refetched: vec![false; nt],
            pressure_bytes: 0,
            dma_free: 0.0,
            transfers: Vec::new(),
            selections: Vec::new(),
            records: Vec::with_capacity(nslots),
        })
    }

    fn high_water(&self) -> u64 {
        match (&self.pool, &self.cache) {
            (Some(p), _) => p.high_water_bytes(),
            (None, Some(c)) => c.pool.high_water_bytes(),
            (None, None) => self.records.iter().map(|r| r.resident_bytes + r.workspace_bytes).max().unwrap_or(0),
        }
    }

    fn fail(&self, slot: usize, reason: String) -> SimError {
        let s = &self.sched.slots[slot];
        SimError::Scheduling { step: s.step, label: s.label, layer: self.m.net.layer(s.layer).name.clone(), reason }
    }

    /// Queues a copy on the engine no earlier than `at`; returns its completion.
    fn copy(&mut self, slot: usize, t: TensorId, dir: Direction, kind: TransferKind, at: f64) -> f64 {
        let bytes = self.m.table.bytes(t);
        let issue = at.max(self.dma_free);
        let complete = issue + bytes as f64 / self.cfg.bandwidth;
        self.dma_free = complete;
        self.transfers.push(TransferRecord {
            step: self.sched.slots[slot].label,
            tensor: t,
            layer: self.m.net.layer(self.m.table.tensors[t].owner).name.clone(),
            direction: dir,
            bytes,
            issue,
            complete,
            kind,
        });
        complete
    }

    fn run(&mut self) -> Result<(), SimError> {
        let (m, sched) = (self.m, self.sched);
        let res = sched.residency(&m.table);
        let mut clock = 0.0f64;
        for i in 0..self.sched.slots.len() {
            let ready = clock;
            let mut wait = self.slot_wait[i];
            let mut calls = 0u64;
            if i > 0 {
                for k in 0..self.ends[i - 1].len() {
                    let t = self.ends[i - 1][k];
                    calls += 1;
                    self.release(t).map_err(|e| self.fail(i, e))?;
                }
            }
            let resident = if self.cache.is_some() {
                wait = wait.max(self.cache_admit(i, ready)?);
                self.cache.as_ref().unwrap().device_bytes()
            } else {
                for k in 0..self.starts[i].len() {
                    let t = self.starts[i][k];
                    calls += 1;
                    if let Some(pool) = self.pool.as_mut() {
                        let a = pool.alloc(self.m.table.bytes(t)).map_err(|e| self.fail(i, format!("allocating tensor {t}: {e}")))?;
                        self.allocs[t] = Some(a);
                    }
                }
                if self.pool.is_none() && res.bytes[i] > self.cfg.pool_bytes {
                    return Err(self.fail(i, format!("{} resident bytes exceed device memory of {}", res.bytes[i], self.cfg.pool_bytes)));
                }
                for k in 0..self.issues[i].len() {
                    let tr = self.sched.transfers[self.issues[i][k]];
                    if tr.direction == Direction::Pre {
                        self.ready_at[tr.tensor] = self.copy(i, tr.tensor, Direction::Pre, tr.kind, ready);
                    }
                }
                res.bytes[i]
            };
            for &u in sched.slots[i].uses(&m.table) {
                wait = wait.max(self.ready_at[u]);
            }

            let slot = &sched.slots[i];
            let cost = &m.costs[slot.layer];
            let backward = slot.phase == Phase::Backward;
            let (mut compute, workspace, ws_alloc) = if cost.kind == LayerKind::Conv {
                let (algo, ws) = self.pick_conv(i, resident, res.bytes[i]);
                let factor = if backward { self.m.cfg.bwd_time_factor } else { 1.0 };
                if ws.is_some() {
                    calls += 2;
                }
                (algo.time * factor, algo.workspace_bytes, ws)
            } else {
                (if backward { cost.bwd_time } else { cost.fwd_time }, 0, None)
            };
            if self.cfg.allocator == Allocator::Native {
                compute += calls as f64 * self.cfg.native_call_cost;
            }
            let pool_used_bytes = match (&self.pool, &self.cache) {
                (Some(p), _) => p.used_blocks() * p.block_bytes(),
                (None, Some(c)) => c.pool.used_blocks() * c.pool.block_bytes(),
                (None, None) => resident + workspace,
            };
            if let Some(a) = ws_alloc {
                let pool = self.pool.as_mut().or(self.cache.as_mut().map(|c| &mut c.pool)).unwrap();
                pool.free(a).map_err(|e| self.fail(i, e.to_string()))?;
            }
            let start = ready.max(wait);
            let end = start + compute;
            for k in 0..self.issues[i].len() {
                let tr = self.sched.transfers[self.issues[i][k]];
                if tr.direction == Direction::Off {
                    let done = self.copy(i, tr.tensor, Direction::Off, tr.kind, end);
                    if self.cache.is_some() {
                        self.host_copy[tr.tensor] = Some(done);
                        self.lazy_bytes[tr.tensor] = self.m.table.bytes(tr.tensor);
                    } else {
                        self.slot_wait[tr.need_slot] = self.slot_wait[tr.need_slot].max(done);
                    }
                }
            }
            if let Some(c) = self.cache.as_mut() {
                for &u in slot.uses(&m.table) {
                    c.unlock(u);
                }
            }
            let s = &self.sched.slots[i];
            self.records.push(StepRecord {
                slot: i,
                step: s.step,
                label: s.label,
                phase: s.phase,
                layer: self.m.net.layer(s.layer).name.clone(),
                resident_bytes: resident,
                live_tensors: res.live[i],
                pool_used_bytes,
                workspace_bytes: workspace,
                start,
                end,
                compute,
                stall: start - ready,
            });
            clock = end;
        }
        Ok(())
    }

    fn release(&mut self, t: TensorId) -> Result<(), String> {
        if let Some(c) = self.cache.as_mut() {
            c.release(t).map_err(|e| e.to_string())?;
            self.host_copy[t] = None;
            self.ready_at[t] = 0.0;
        } else if let Some(pool) = self.pool.as_mut() {
            let a = self.allocs[t].take().ok_or_else(|| format!("tensor {t} released twice"))?;
            pool.free(a).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Cache mode: brings every tensor the slot needs onto the device and
    /// returns the time the slot must wait for evictions and fetches.
    fn cache_admit(&mut self, i: usize, ready: f64) -> Result<f64, SimError> {
        let mut wait = 0.0f64;
        let sched = self.sched;
        let uses = sched.slots[i].uses(&self.m.table);
        {
            let c = self.cache.as_mut().unwrap();
            for &u in uses {
                if c.residence[u].state == ResidenceState::OnDevice {
                    c.lock(u);
                }
            }
        }
        for k in 0..self.starts[i].len() {
            let t = self.starts[i][k];
            let placed = self.cache.as_mut().unwrap().place(t);
            let (_, evicted) = placed.map_err(|e| self.fail(i, cache_reason(t, e)))?;
            wait = wait.max(self.settle_evictions(i, &evicted, ready));
            self.ready_at[t] = 0.0;
        }
        for k in 0..self.issues[i].len() {
            let tr = self.sched.transfers[self.issues[i][k]];
            if tr.direction != Direction::Pre {
                continue;
            }
            let t = tr.tensor;
            wait = wait.max(self.fetch(i, t, tr.kind, ready)?);
        }
        for k in 0..uses.len() {
            let u = uses[k];
            wait = wait.max(self.fetch(i, u, TransferKind::DemandMiss, ready)?);
            self.cache.as_mut().unwrap().lock(u);
        }
        Ok(wait)
    }

    /// Looks `t` up in the cache and copies it back on a miss.
    fn fetch(&mut self, i: usize, t: TensorId, kind: TransferKind, ready: f64) -> Result<f64, SimError> {
        let out = self.cache.as_mut().unwrap().lru_check(t).map_err(|e| self.fail(i, cache_reason(t, e)))?;
        if out.hit {
            return Ok(0.0);
        }
        let wait = self.settle_evictions(i, &out.evicted, ready);
        let host = self.host_copy[t].ok_or_else(|| self.fail(i, format!("tensor {t} has no valid copy")))?;
        let done = self.copy(i, t, Direction::Pre, kind, ready.max(wait).max(host));
        self.ready_at[t] = done;
        self.refetched[t] = true;
        self.pressure_bytes += self.m.table.bytes(t);
        Ok(wait)
    }

    /// Evicted tensors with a host copy are dropped once the copy is done;
    /// the others are copied out first.
    fn settle_evictions(&mut self, i: usize, evicted: &[TensorId], ready: f64) -> f64 {
        let mut wait = 0.0f64;
        for &e in evicted {
            let done = match self.host_copy[e] {
                Some(done) => done,
                None => {
                    let done = self.copy(i, e, Direction::Off, TransferKind::DemandMiss, ready);
                    self.host_copy[e] = Some(done);
                    self.pressure_bytes += self.m.table.bytes(e);
                    done
                }
            };
            wait = wait.max(done);
        }
        wait
    }

    /// Chooses a convolution algorithm for slot `i` and reserves its workspace.
    fn pick_conv(&mut self, i: usize, device_bytes: u64, logical_bytes: u64) -> (ConvAlgo, Option<AllocId>) {
        let (m, sched) = (self.m, self.sched);
        let slot = &sched.slots[i];
        let catalog = &m.costs[slot.layer].conv_algos;
        let free = profile_free_bytes(self.cfg.pool_bytes, logical_bytes);
        let candidates: Vec<&ConvAlgo> = if self.cfg.features.convselect {
            feasible(catalog, free)
        } else {
            feasible(catalog, 0)
        };
        let mut chosen = None;
        for a in candidates {
            if a.workspace_bytes == 0 {
                chosen = Some((a.clone(), None));
                break;
            }
            match self.pool.as_mut().or(self.cache.as_mut().map(|c| &mut c.pool)) {
                Some(pool) => match pool.alloc(a.workspace_bytes) {
                    Ok(id) => {
                        chosen = Some((a.clone(), Some(id)));
                        break;
                    }
                    Err(PoolError::OutOfMemory { .. }) => continue,
                    Err(e) => unreachable!("workspace allocation: {e}"),
                },
                None if device_bytes + a.workspace_bytes <= self.cfg.pool_bytes => {
                    chosen = Some((a.clone(), None));
                    break;
                }
                None => continue,
            }
        }
        let (algo, ws) = chosen.expect("catalog always holds an algorithm without workspace");
        self.selections.push(ConvSelection {
            step: slot.step,
            label: slot.label,
            phase: slot.phase,
            layer: slot.layer,
            layer_name: self.m.net.layer(slot.layer).name.clone(),
            algo: algo.name.clone(),
            workspace_bytes: algo.workspace_bytes,
            time: algo.time,
            free_bytes: free,
        });
        (algo, ws)
    }
}

fn cache_reason(t: TensorId, e: CacheError) -> String {
    format!("placing tensor {t}: {e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    const MIB: f64 = (1u64 << 20) as f64;

    fn alexnet_cfg(features: &str) -> SimConfig {
        let mut cfg = SimConfig { features: features.parse().unwrap(), ..SimConfig::default() };
        cfg.cost.batch = 200;
        cfg.cost.input_on_device = false;
        cfg
    }

    #[test]
    fn features_parse() {
        let f: Features = "liveness, offload,recompute=memory".parse().unwrap();
        assert!(f.liveness && f.offload && !f.cache);
        assert_eq!(f.recompute, Some(PlanKind::MemoryCentric));
        assert_eq!("all".parse::<Features>().unwrap(), Features::all());
        assert_eq!("none".parse::<Features>().unwrap(), Features::default());
        assert!("warp".parse::<Features>().is_err());
        let round: Features = f.to_string().parse().unwrap();
        assert_eq!(round, f);
    }

    #[test]
    fn rejects_features_without_liveness() {
        let cfg = alexnet_cfg("offload");
        let err = run_iteration(&fixtures::alexnet(), &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn rejects_pool_below_least_working_set() {
        let mut cfg = alexnet_cfg("liveness");
        cfg.pool_bytes = 64 << 20;
        let err = run_iteration(&fixtures::alexnet(), &cfg).unwrap_err();
        assert!(matches!(err, SimError::PoolTooSmall { .. }));
    }

    #[test]
    fn alexnet_liveness_peak() {
        let r = run_iteration(&fixtures::alexnet(), &alexnet_cfg("liveness")).unwrap();
        assert!((r.peak_bytes as f64 / MIB - 1489.355).abs() < 0.01, "{}", r.peak_bytes as f64 / MIB);
        assert_eq!(r.peak_step, 32);
        assert_eq!(r.steps.len(), 48);
        assert!(r.transfers.is_empty());
    }

    #[test]
    fn scheduling_failure_is_exit_three() {
        let mut cfg = alexnet_cfg("none");
        cfg.pool_bytes = 1200 << 20;
        let err = run_iteration(&fixtures::alexnet(), &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn offload_stalls_are_accounted() {
        let r = run_iteration(&fixtures::alexnet(), &alexnet_cfg("liveness,offload")).unwrap();
        assert!(!r.transfers.is_empty());
        for rec in &r.steps {
            assert!(rec.start + 1e-9 >= rec.end - rec.compute - 1e-9);
            assert!(rec.stall >= 0.0);
        }
        let sum: f64 = r.steps.iter().map(|s| s.compute + s.stall).sum::<f64>() + r.drain_time;
        assert!((sum - r.iteration_time).abs() < 1e-6 * r.iteration_time.max(1.0));
    }

    #[test]
    fn native_allocator_is_slower() {
        let pool = run_iteration(&fixtures::alexnet(), &alexnet_cfg("liveness")).unwrap();
        let mut cfg = alexnet_cfg("liveness");
        cfg.allocator = Allocator::Native;
        let native = run_iteration(&fixtures::alexnet(), &cfg).unwrap();
        assert_eq!(pool.peak_bytes, native.peak_bytes);
        assert!(native.iteration_time > pool.iteration_time);
    }

    #[test]
    fn cache_without_pressure_moves_nothing_back() {
        let r = run_iteration(&fixtures::alexnet(), &alexnet_cfg("liveness,offload,cache")).unwrap();
        assert_eq!(r.communication_bytes, 0);
        assert!(r.cache_hits > 0);
        assert_eq!(r.cache_misses, 0);
    }
}
