//! Segments of non-checkpoint layers and the three replay planners.

use serde::{Deserialize, Serialize};

use crate::costmodel::{TensorId, TensorTable};
use crate::incremental::PeakTracker;
use crate::model::Model;
use crate::netgraph::{ExecutionPlan, LayerId, LayerKind, NetworkDef};
use crate::schedule::{Origin, Policy, Schedule};
use crate::utp::CheckpointSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Checkpoint (or DATA) executed right before the first member.
    pub anchor: LayerId,
    /// Members in forward order.
    pub members: Vec<LayerId>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Replay the whole segment once and keep the results.
    Speed,
    /// Replay only what each backward step needs and discard intermediates.
    Memory,
    /// Do not drop the segment. Chosen when every replay order would raise
    /// the peak above keeping the activations.
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    SpeedCentric,
    MemoryCentric,
    CostAware,
}

impl std::str::FromStr for PlanKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "speed" | "speed-centric" => Ok(PlanKind::SpeedCentric),
            "memory" | "memory-centric" => Ok(PlanKind::MemoryCentric),
            "cost-aware" | "costaware" | "cost" => Ok(PlanKind::CostAware),
            other => Err(format!("unknown recompute strategy `{other}`")),
        }
    }
}

impl std::fmt::Display for PlanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanKind::SpeedCentric => "speed-centric",
            PlanKind::MemoryCentric => "memory-centric",
            PlanKind::CostAware => "cost-aware",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub kind: PlanKind,
    pub choices: Vec<Strategy>,
    pub extra: usize,
    pub segment_extra: Vec<usize>,
    /// Peak resident bytes over the slots where the segment's replayed
    /// tensors live; 0 when nothing in the segment is replayed.
    pub memcost: Vec<u64>,
    /// Activations freed after their last forward use.
    pub dropped: Vec<TensorId>,
    pub peak_bytes: u64,
}

/// Maximal forward-order runs of layers that are neither checkpoints, the
/// DATA layer, nor the terminal layer.
pub fn build_segments(net: &NetworkDef, plan: &ExecutionPlan, cps: &CheckpointSet) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut cur: Option<Segment> = None;
    for (s, &l) in plan.forward.iter().enumerate() {
        let boundary = cps.contains(&l) || net.layer(l).kind == LayerKind::Data || l == net.terminal();
        if boundary {
            if let Some(seg) = cur.take() {
                segs.push(seg);
            }
        } else {
            cur.get_or_insert_with(|| Segment { anchor: plan.forward[s - 1], members: Vec::new() }).members.push(l);
        }
    }
    if let Some(seg) = cur {
        segs.push(seg);
    }
    segs
}

/// Segment index of every activation that may be dropped after the forward
/// pass. A member stays resident when one of its inputs is a dropped tensor
/// of another segment, since replay never crosses segments.
pub fn droppable(net: &NetworkDef, plan: &ExecutionPlan, table: &TensorTable, segs: &[Segment]) -> Vec<Option<usize>> {
    let mut seg_of_layer = vec![None; net.len()];
    for (i, seg) in segs.iter().enumerate() {
        for &m in &seg.members {
            seg_of_layer[m] = Some(i);
        }
    }
    let mut dropped = vec![None; table.len()];
    for &l in &plan.forward {
        let (Some(seg), Some(t)) = (seg_of_layer[l], table.activation[l]) else { continue };
        let ok = net.layer(l).prev.iter().all(|&p| match table.activation[p] {
            Some(pa) => dropped[pa].is_none_or(|ps| ps == seg),
            None => true,
        });
        if ok {
            dropped[t] = Some(seg);
        }
    }
    dropped
}

fn finish(m: &Model, kind: PlanKind, choices: Vec<Strategy>, offload: bool) -> RecomputePlan {
    let policy = Policy { liveness: true, offload, recompute: Some(&choices) };
    let sched = Schedule::build(m, &policy);
    let res = sched.residency(&m.table);
    let mut memcost = vec![0u64; m.segments.len()];
    for iv in &sched.intervals {
        if iv.origin != Origin::Replayed {
            continue;
        }
        if let Some(seg) = m.dropped[iv.tensor] {
            let window = res.bytes[iv.start..=iv.end].iter().copied().max().unwrap_or(0);
            memcost[seg] = memcost[seg].max(window);
        }
    }
    RecomputePlan {
        kind,
        extra: sched.extra,
        segment_extra: sched.segment_extra.clone(),
        memcost,
        dropped: (0..m.table.len()).filter(|&t| m.dropped[t].is_some_and(|seg| choices[seg] != Strategy::Keep)).collect(),
        peak_bytes: res.peak().0,
        choices,
    }
}

pub fn plan_speed_centric(m: &Model, offload: bool) -> RecomputePlan {
    finish(m, PlanKind::SpeedCentric, vec![Strategy::Speed; m.segments.len()], offload)
}

pub fn plan_memory_centric(m: &Model, offload: bool) -> RecomputePlan {
    finish(m, PlanKind::MemoryCentric, vec![Strategy::Memory; m.segments.len()], offload)
}

/// Starts memory-centric everywhere and, segment by segment in forward
/// order, switches to speed-centric whenever the resulting peak stays
/// within `bound`. Segments with nothing to replay are speed-centric.
pub fn greedy_choices(m: &Model, bound: u64, offload: bool) -> Vec<Strategy> {
    let mut tracker = PeakTracker::new(m, offload, &vec![Strategy::Memory; m.segments.len()]);
    let choices = greedy_with(&mut tracker, bound);
    keep_if_lower(m, offload, choices, tracker.peak())
}

/// Falls back to dropping nothing when that peaks strictly lower: on small
/// nets a replay can pull an offloaded checkpoint back early.
pub(crate) fn keep_if_lower(m: &Model, offload: bool, choices: Vec<Strategy>, peak: u64) -> Vec<Strategy> {
    let keep = vec![Strategy::Keep; m.segments.len()];
    let kept = Schedule::build(m, &Policy { liveness: true, offload, recompute: Some(&keep) });
    if kept.residency(&m.table).peak().0 < peak {
        keep
    } else {
        choices
    }
}

pub(crate) fn greedy_with(tracker: &mut PeakTracker<'_>, bound: u64) -> Vec<Strategy> {
    let mut has_dropped = vec![false; tracker.choices().len()];
    for seg in tracker.model().dropped.iter().flatten() {
        has_dropped[*seg] = true;
    }
    for (i, &dropped) in has_dropped.iter().enumerate() {
        tracker.set(i, Strategy::Speed);
        if dropped && tracker.peak() > bound {
            tracker.set(i, Strategy::Memory);
        }
    }
    tracker.choices().to_vec()
}

/// Cost-aware plan under `l_peak`. With offload and the model's own
/// `l_peak` this is the floor plan the working sets were measured on.
pub fn plan_cost_aware(m: &Model, l_peak: u64, offload: bool) -> RecomputePlan {
    let choices = if offload && l_peak == m.l_peak().0 { m.floor_choices.clone() } else { greedy_choices(m, l_peak, offload) };
    finish(m, PlanKind::CostAware, choices, offload)
}

pub fn plan(m: &Model, kind: PlanKind, offload: bool) -> RecomputePlan {
    match kind {
        PlanKind::SpeedCentric => plan_speed_centric(m, offload),
        PlanKind::MemoryCentric => plan_memory_centric(m, offload),
        PlanKind::CostAware => plan_cost_aware(m, m.l_peak().0, offload),
    }
}

/// `anchor,len,strategy,extra,memcost_bytes` per segment.
pub fn dump_plan_csv(m: &Model, p: &RecomputePlan) -> String {
    let mut out = String::from("anchor,len,strategy,extra,memcost_bytes\n");
    for (i, seg) in m.segments.iter().enumerate() {
        let strategy = match p.choices[i] {
            Strategy::Speed => "speed",
            Strategy::Memory => "memory",
            Strategy::Keep => "keep",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.net.layer(seg.anchor).name,
            seg.len(),
            strategy,
            p.segment_extra[i],
            p.memcost[i]
        ));
    }
    out
}
