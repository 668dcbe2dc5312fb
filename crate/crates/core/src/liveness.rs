//! Per-step live tensor sets, free events and resident bytes.

use crate::costmodel::{TensorId, TensorTable};
use crate::netgraph::{ExecutionPlan, LayerId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessTable {
    pub layers: Vec<LayerId>,
    /// Tensors alive when the step begins.
    pub in_sets: Vec<Vec<TensorId>>,
    /// Tensors alive after the step's free events.
    pub out_sets: Vec<Vec<TensorId>>,
    /// Tensors freed right after the step.
    pub free_events: Vec<Vec<TensorId>>,
    /// Bytes resident during the step, inputs and outputs included.
    pub resident_bytes: Vec<u64>,
    /// Functional tensors resident during the step.
    pub live_counts: Vec<usize>,
}

pub fn build_liveness(plan: &ExecutionPlan, table: &TensorTable) -> LivenessTable {
    let steps = table.steps.len();
    let mut t = LivenessTable {
        layers: (0..steps).map(|s| plan.layer_at(s)).collect(),
        in_sets: vec![Vec::new(); steps],
        out_sets: vec![Vec::new(); steps],
        free_events: vec![Vec::new(); steps],
        resident_bytes: vec![0; steps],
        live_counts: vec![0; steps],
    };
    for desc in &table.tensors {
        let (first, last) = (desc.use_steps[0], desc.last_use());
        for s in first..=last {
            if s > first {
                t.in_sets[s].push(desc.id);
            }
            if s < last {
                t.out_sets[s].push(desc.id);
            }
            t.resident_bytes[s] += desc.bytes;
            if desc.functional() {
                t.live_counts[s] += 1;
            }
        }
        t.free_events[last].push(desc.id);
    }
    t
}

impl LivenessTable {
    pub fn steps(&self) -> usize {
        self.layers.len()
    }

    /// Highest resident bytes and the first step reaching it.
    pub fn peak(&self) -> (u64, usize) {
        let mut best = (0, 0);
        for (s, &b) in self.resident_bytes.iter().enumerate() {
            if b > best.0 {
                best = (b, s);
            }
        }
        best
    }

    /// `step,layer,in_count,out_count,resident_bytes` rows.
    pub fn dump_csv(&self, names: impl Fn(LayerId) -> String) -> String {
        let mut out = String::from("step,layer,in_count,out_count,resident_bytes\n");
        for s in 0..self.steps() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s,
                names(self.layers[s]),
                self.in_sets[s].len(),
                self.out_sets[s].len(),
                self.resident_bytes[s]
            ));
        }
        out
    }
}

pub fn liveness_peak(table: &LivenessTable) -> (u64, usize) {
    table.peak()
}
