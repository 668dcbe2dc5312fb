//! Everything derived from a network and a cost configuration that the
//! planners and the simulator share.

use crate::costmodel::{base_costs, infer_shapes, CostConfig, CostError, LayerCost, Shape, TensorTable};
use crate::netgraph::{build_execution_order, ExecutionPlan, LayerId, NetworkDef, Pass};
use crate::incremental::PeakTracker;
use crate::recompute::{build_segments, droppable, greedy_with, keep_if_lower, Segment, Strategy};
use crate::schedule::{Policy, Schedule};
use crate::utp::{mark_checkpoints, schedule_offload, schedule_prefetch, CheckpointSet, TransferEvent};

#[derive(Debug, Clone)]
pub struct Model {
    pub net: NetworkDef,
    pub cfg: CostConfig,
    pub plan: ExecutionPlan,
    pub shapes: Vec<Shape>,
    pub table: TensorTable,
    pub costs: Vec<LayerCost>,
    pub offload_cps: CheckpointSet,
    /// Recompute checkpoints; offload checkpoints are always included.
    pub recompute_cps: CheckpointSet,
    pub segments: Vec<Segment>,
    /// Segment of each droppable activation, indexed by tensor id.
    pub dropped: Vec<Option<usize>>,
    pub offload_events: Vec<TransferEvent>,
    pub prefetch_events: Vec<TransferEvent>,
    /// Offload deadline step per tensor, for checkpoint outputs.
    pub offload_deadline: Vec<Option<usize>>,
    /// Backward step at which each offloaded tensor is prefetched, when a
    /// later checkpoint triggers it.
    pub prefetch_step: Vec<Option<usize>>,
    /// Per-segment strategies of the least-peak schedule found (liveness,
    /// offload and replay); the per-layer working sets are measured on it.
    pub floor_choices: Vec<Strategy>,
}

impl Model {
    pub fn build(net: &NetworkDef, cfg: &CostConfig) -> Result<Model, CostError> {
        cfg.validate()?;
        let plan = build_execution_order(net)?;
        let shapes = infer_shapes(net, &plan, cfg.batch)?;
        let table = TensorTable::build(net, &plan, Pass::Training, &shapes, cfg);
        let costs = base_costs(net, &plan, &shapes, &table, cfg);
        let offload_cps = mark_checkpoints(net, &cfg.checkpoints.offload);
        let mut kinds = cfg.checkpoints.recompute.clone();
        kinds.extend(cfg.checkpoints.offload.iter().copied());
        let recompute_cps = mark_checkpoints(net, &kinds);
        let segments = build_segments(net, &plan, &recompute_cps);
        let dropped = droppable(net, &plan, &table, &segments);
        let offload_events = schedule_offload(&plan, &offload_cps, &table);
        let prefetch_events = schedule_prefetch(&plan, &offload_cps, &table);
        let mut offload_deadline = vec![None; table.len()];
        for e in &offload_events {
            offload_deadline[e.tensor] = Some(e.deadline_step);
        }
        let mut prefetch_step = vec![None; table.len()];
        for e in &prefetch_events {
            prefetch_step[e.tensor] = Some(e.issue_step);
        }
        let nseg = segments.len();
        let mut m = Model {
            net: net.clone(),
            cfg: cfg.clone(),
            plan,
            shapes,
            table,
            costs,
            offload_cps,
            recompute_cps,
            segments,
            dropped,
            offload_events,
            prefetch_events,
            offload_deadline,
            prefetch_step,
            floor_choices: vec![Strategy::Memory; nseg],
        };
        // Memory-centric replay is not always the least: re-reading a
        // checkpoint across groups can cost more than one speed replay. Start
        // from it and keep every switch that does not raise the peak.
        let mut tracker = PeakTracker::new(&m, true, &m.floor_choices);
        let bound = tracker.peak();
        let choices = greedy_with(&mut tracker, bound);
        let peak = tracker.peak();
        m.floor_choices = keep_if_lower(&m, true, choices, peak);
        let sched = m.floor_schedule();
        let res = sched.residency(&m.table);
        let mut ws = vec![0u64; net.len()];
        for (i, slot) in sched.slots.iter().enumerate() {
            let l = m.plan.layer_at(slot.step);
            ws[l] = ws[l].max(res.bytes[i]);
        }
        for (c, w) in m.costs.iter_mut().zip(ws) {
            c.working_set_bytes = w;
        }
        Ok(m)
    }

    /// Liveness, every checkpoint offloaded, replay per `floor_choices`.
    pub fn floor_schedule(&self) -> Schedule {
        Schedule::build(self, &Policy { liveness: true, offload: true, recompute: Some(&self.floor_choices) })
    }

    pub fn l_peak(&self) -> (u64, LayerId) {
        crate::costmodel::l_peak(&self.costs)
    }

    pub fn baseline_peak(&self) -> u64 {
        crate::costmodel::baseline_peak(&self.costs)
    }

    /// Σ l^f + l^b of the terminal layer.
    pub fn liveness_formula(&self) -> u64 {
        let f: u64 = self.costs.iter().map(|c| c.fwd_bytes).sum();
        f + self.costs[self.net.terminal()].bwd_bytes
    }

    /// Σ l^f over non-checkpoint layers + l^b of the terminal layer.
    pub fn offload_formula(&self) -> u64 {
        let f: u64 = self.costs.iter().filter(|c| !self.offload_cps.contains(&c.layer)).map(|c| c.fwd_bytes).sum();
        f + self.costs[self.net.terminal()].bwd_bytes
    }
}
