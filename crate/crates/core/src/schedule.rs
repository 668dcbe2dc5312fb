//! Step-level execution schedule: the slots executed in one iteration
//! (forward, replay, backward) and the slot interval during which each
//! tensor occupies device memory.
//!
//! Residency is a function of slot order only. Transfer timing can stall
//! compute but never moves an allocation or a free to another slot.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::costmodel::{TensorId, TensorTable};
use crate::model::Model;
use crate::netgraph::LayerId;
use crate::recompute::Strategy;
use crate::utp::{Direction, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Replay,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// Plan step this slot belongs to; replays belong to the backward step they serve.
    pub step: usize,
    pub layer: LayerId,
    pub phase: Phase,
    /// Step index for forward/backward slots; fractional between step-1
    /// and step for replays.
    pub label: f64,
    /// Plan step whose tensor accesses this slot performs (the forward step
    /// of the replayed layer for replays).
    pub src: usize,
}

impl Slot {
    pub fn uses<'t>(&self, table: &'t TensorTable) -> &'t [TensorId] {
        &table.steps[self.src].uses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Produced,
    Prefetched,
    Replayed,
}

/// Inclusive slot range `[start, end]` during which a tensor is on the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub tensor: TensorId,
    pub start: usize,
    pub end: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedTransfer {
    pub tensor: TensorId,
    pub direction: Direction,
    pub kind: TransferKind,
    /// Offloads start when this slot finishes; prefetches when it begins.
    pub issue_slot: usize,
    /// Slot that may not begin before the transfer completes.
    pub need_slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy<'a> {
    pub liveness: bool,
    pub offload: bool,
    /// Per-segment replay strategy; `None` keeps every activation.
    pub recompute: Option<&'a [Strategy]>,
}

impl Policy<'_> {
    pub const BASELINE: Policy<'static> = Policy { liveness: false, offload: false, recompute: None };
    pub const LIVENESS: Policy<'static> = Policy { liveness: true, offload: false, recompute: None };
    pub const OFFLOAD: Policy<'static> = Policy { liveness: true, offload: true, recompute: None };
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub slots: Vec<Slot>,
    pub intervals: Vec<Interval>,
    pub transfers: Vec<PlannedTransfer>,
    /// First slot of each plan step.
    pub group_start: Vec<usize>,
    pub extra: usize,
    pub segment_extra: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residency {
    pub bytes: Vec<u64>,
    pub live: Vec<usize>,
}

impl Residency {
    /// Highest resident bytes and the first slot reaching it.
    pub fn peak(&self) -> (u64, usize) {
        let mut best = (0, 0);
        for (i, &b) in self.bytes.iter().enumerate() {
            if b > best.0 {
                best = (b, i);
            }
        }
        best
    }
}

impl Schedule {
    pub fn build(m: &Model, policy: &Policy) -> Schedule {
        let table = &m.table;
        let plan = &m.plan;
        let n = plan.n();
        let steps = table.steps.len();
        let nseg = m.segments.len();
        let (dropped, choice): (Cow<[Option<usize>]>, &[Strategy]) = match policy.recompute {
            Some(c) if c.contains(&Strategy::Keep) => {
                (m.dropped.iter().map(|d| d.filter(|&seg| c[seg] != Strategy::Keep)).collect(), c)
            }
            Some(c) => (Cow::Borrowed(&m.dropped), c),
            None => (vec![None; table.len()].into(), &[]),
        };
        let uses_at = |s: usize, t: TensorId| s < steps && table.steps[s].uses.binary_search(&t).is_ok();

        let mut slots = Vec::with_capacity(steps + steps / 2);
        let mut group_start = vec![0; steps];
        let mut intervals = Vec::with_capacity(table.len() + steps);
        for s in 0..n.min(steps) {
            group_start[s] = s;
            slots.push(Slot { step: s, layer: plan.forward[s], phase: Phase::Forward, label: s as f64, src: s });
        }

        let mut extra = 0;
        let mut segment_extra = vec![0; nseg];
        let mut speed_done = vec![false; nseg];
        let mut speed_pending: Vec<(TensorId, usize)> = Vec::new();
        let mut retained: BTreeMap<TensorId, usize> = BTreeMap::new();
        let mut replay: BTreeSet<(usize, TensorId)> = BTreeSet::new();
        let mut stack = Vec::new();
        for s in n..steps {
            replay.clear();
            for &t in &table.steps[s].uses {
                let Some(seg) = dropped[t] else { continue };
                match choice[seg] {
                    Strategy::Speed => {
                        if !speed_done[seg] {
                            speed_done[seg] = true;
                            for &mem in &m.segments[seg].members {
                                if let Some(a) = table.activation[mem].filter(|&a| dropped[a].is_some()) {
                                    replay.insert((plan.step_of_forward[mem], a));
                                }
                            }
                        }
                    }
                    Strategy::Memory => {
                        stack.push(t);
                        while let Some(x) = stack.pop() {
                            if retained.contains_key(&x) {
                                continue;
                            }
                            let owner = table.tensors[x].owner;
                            if !replay.insert((plan.step_of_forward[owner], x)) {
                                continue;
                            }
                            for &p in &m.net.layer(owner).prev {
                                if let Some(pa) = table.activation[p].filter(|&pa| dropped[pa].is_some()) {
                                    stack.push(pa);
                                }
                            }
                        }
                    }
                    Strategy::Keep => unreachable!("kept segments are filtered out of `dropped`"),
                }
            }

            let first = slots.len();
            group_start[s] = first;
            let r = replay.len();
            for (k, &(fs, t)) in replay.iter().enumerate() {
                slots.push(Slot {
                    step: s,
                    layer: table.tensors[t].owner,
                    phase: Phase::Replay,
                    label: (s - 1) as f64 + (k + 1) as f64 / (r + 1) as f64,
                    src: fs,
                });
                segment_extra[dropped[t].unwrap()] += 1;
            }
            extra += r;
            let bwd = slots.len();
            slots.push(Slot { step: s, layer: plan.layer_at(s), phase: Phase::Backward, label: s as f64, src: s });

            // Carried-over tensors are required here; keep them only if the next step needs them too.
            retained.retain(|&t, &mut at| {
                let keep = uses_at(s + 1, t);
                if !keep {
                    intervals.push(Interval { tensor: t, start: at, end: bwd, origin: Origin::Replayed });
                }
                keep
            });
            for (k, &(_, t)) in replay.iter().enumerate() {
                let at = first + k;
                if choice[dropped[t].unwrap()] == Strategy::Speed {
                    speed_pending.push((t, at));
                    continue;
                }
                let needed_here = uses_at(s, t);
                if needed_here && uses_at(s + 1, t) {
                    retained.insert(t, at);
                    continue;
                }
                let end = if needed_here {
                    bwd
                } else {
                    (at..bwd).rev().find(|&i| slots[i].uses(table).binary_search(&t).is_ok()).unwrap_or(at)
                };
                intervals.push(Interval { tensor: t, start: at, end, origin: Origin::Replayed });
            }
        }
        debug_assert!(retained.is_empty());

        // First and last slot touching each tensor, split at the forward/backward boundary.
        const NONE: usize = usize::MAX;
        let total = slots.len();
        let mut first = vec![NONE; table.len()];
        let mut last = vec![NONE; table.len()];
        let mut fwd_last = vec![NONE; table.len()];
        let mut bwd_first = vec![NONE; table.len()];
        for (i, slot) in slots.iter().enumerate() {
            for &t in slot.uses(table) {
                if first[t] == NONE {
                    first[t] = i;
                }
                last[t] = i;
                if i < n {
                    fwd_last[t] = i;
                } else if bwd_first[t] == NONE {
                    bwd_first[t] = i;
                }
            }
        }
        for &(t, at) in &speed_pending {
            intervals.push(Interval { tensor: t, start: at, end: last[t].max(at), origin: Origin::Replayed });
        }

        let mut transfers = Vec::new();
        for t in 0..table.len() {
            if first[t] == NONE {
                continue;
            }
            let fwd_end = if fwd_last[t] == NONE { first[t] } else { fwd_last[t] };
            if dropped[t].is_some() {
                intervals.push(Interval { tensor: t, start: first[t], end: fwd_end, origin: Origin::Produced });
                continue;
            }
            if !policy.liveness {
                intervals.push(Interval { tensor: t, start: first[t], end: total - 1, origin: Origin::Produced });
                continue;
            }
            if let (true, Some(deadline), true) = (policy.offload, m.offload_deadline[t], bwd_first[t] != NONE) {
                let release = fwd_end.max(deadline.saturating_sub(1));
                let rule = m.prefetch_step[t].map(|st| group_start[st]);
                let issue = rule.map_or(bwd_first[t], |r| r.min(bwd_first[t]));
                if issue > release + 1 {
                    intervals.push(Interval { tensor: t, start: first[t], end: release, origin: Origin::Produced });
                    intervals.push(Interval { tensor: t, start: issue, end: last[t], origin: Origin::Prefetched });
                    transfers.push(PlannedTransfer {
                        tensor: t,
                        direction: Direction::Off,
                        kind: TransferKind::Scheduled,
                        issue_slot: first[t],
                        need_slot: release + 1,
                    });
                    transfers.push(PlannedTransfer {
                        tensor: t,
                        direction: Direction::Pre,
                        kind: if rule.is_some() { TransferKind::Scheduled } else { TransferKind::DemandMiss },
                        issue_slot: issue,
                        need_slot: bwd_first[t],
                    });
                    continue;
                }
            }
            intervals.push(Interval { tensor: t, start: first[t], end: last[t], origin: Origin::Produced });
        }
        intervals.sort_unstable_by_key(|iv| (iv.start, iv.tensor));
        transfers.sort_unstable_by_key(|tr| (tr.issue_slot, tr.direction == Direction::Pre, tr.tensor));
        Schedule { slots, intervals, transfers, group_start, extra, segment_extra }
    }

    pub fn residency(&self, table: &TensorTable) -> Residency {
        let n = self.slots.len();
        let mut db = vec![0i128; n + 1];
        let mut dl = vec![0i64; n + 1];
        for iv in &self.intervals {
            let t = &table.tensors[iv.tensor];
            db[iv.start] += t.bytes as i128;
            db[iv.end + 1] -= t.bytes as i128;
            if t.functional() {
                dl[iv.start] += 1;
                dl[iv.end + 1] -= 1;
            }
        }
        let mut bytes = Vec::with_capacity(n);
        let mut live = Vec::with_capacity(n);
        let (mut b, mut l) = (0i128, 0i64);
        for i in 0..n {
            b += db[i];
            l += dl[i];
            bytes.push(b as u64);
            live.push(l as usize);
        }
        Residency { bytes, live }
    }

    /// Every tensor a slot touches is resident during that slot, and no
    /// tensor holds two overlapping intervals.
    pub fn validate(&self, table: &TensorTable) -> Result<(), String> {
        let mut by_tensor: HashMap<TensorId, Vec<(usize, usize)>> = HashMap::new();
        for iv in &self.intervals {
            if iv.start > iv.end {
                return Err(format!("empty interval for tensor {}", iv.tensor));
            }
            by_tensor.entry(iv.tensor).or_default().push((iv.start, iv.end));
        }
        for (t, v) in by_tensor.iter_mut() {
            v.sort_unstable();
            if v.windows(2).any(|w| w[1].0 <= w[0].1) {
                return Err(format!("tensor {t} has overlapping intervals"));
            }
        }
        for (i, slot) in self.slots.iter().enumerate() {
            for &t in slot.uses(table) {
                let ok = by_tensor.get(&t).is_some_and(|v| v.iter().any(|&(a, b)| a <= i && i <= b));
                if !ok {
                    return Err(format!("tensor {t} not resident at slot {i} (step {})", slot.step));
                }
            }
        }
        Ok(())
    }

    /// Layer charged for a slot: the executing layer in forward, the layer
    /// being differentiated for backward slots and the replays serving it.
    pub fn owner_layer(&self, m: &Model, slot: usize) -> LayerId {
        let s = &self.slots[slot];
        m.plan.layer_at(s.step)
    }
}
