//! Convolution algorithm choice under the memory left by functional tensors.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::costmodel::ConvAlgo;
use crate::netgraph::LayerId;
use crate::schedule::Phase;

/// Pool capacity minus resident functional bytes.
pub fn profile_free_bytes(capacity: u64, resident: u64) -> u64 {
    capacity.saturating_sub(resident)
}

fn rank(a: &ConvAlgo, b: &ConvAlgo) -> Ordering {
    a.time
        .total_cmp(&b.time)
        .then(a.workspace_bytes.cmp(&b.workspace_bytes))
        .then_with(|| a.name.cmp(&b.name))
}

/// Feasible algorithms, best first.
pub fn feasible(catalog: &[ConvAlgo], free_bytes: u64) -> Vec<&ConvAlgo> {
    let mut v: Vec<&ConvAlgo> = catalog.iter().filter(|a| a.workspace_bytes <= free_bytes).collect();
    v.sort_by(|a, b| rank(a, b));
    v
}

/// Fastest algorithm whose workspace fits; ties go to the smaller
/// workspace, then to the name.
pub fn select_algo(catalog: &[ConvAlgo], free_bytes: u64) -> &ConvAlgo {
    feasible(catalog, free_bytes)
        .into_iter()
        .next()
        .expect("catalog must contain an algorithm without workspace")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSelection {
    pub step: usize,
    pub label: f64,
    pub phase: Phase,
    pub layer: LayerId,
    pub layer_name: String,
    pub algo: String,
    pub workspace_bytes: u64,
    pub time: f64,
    pub free_bytes: u64,
}

/// `step,layer,algo,workspace_bytes,time` rows.
pub fn dump_selections_csv(sel: &[ConvSelection]) -> String {
    let mut out = String::from("step,layer,algo,workspace_bytes,time\n");
    for s in sel {
        out.push_str(&format!("{},{},{},{},{}\n", s.label, s.layer_name, s.algo, s.workspace_bytes, s.time));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1 << 20;

    fn algo(name: &str, ws: u64, time: f64) -> ConvAlgo {
        ConvAlgo { name: name.into(), workspace_bytes: ws, time }
    }

    #[test]
    fn picks_fastest_feasible() {
        let cat = vec![algo("a", 0, 10.0), algo("b", 4 * MB, 8.0), algo("c", 12 * MB, 6.0)];
        assert_eq!(select_algo(&cat, 0).name, "a");
        assert_eq!(select_algo(&cat, 5 * MB).name, "b");
        assert_eq!(select_algo(&cat, 12 * MB).name, "c");
        assert_eq!(select_algo(&cat, u64::MAX).name, "c");
    }

    #[test]
    fn ties_prefer_small_workspace_then_name() {
        let cat = vec![algo("z", 0, 5.0), algo("y", MB, 5.0), algo("x", 0, 5.0)];
        assert_eq!(select_algo(&cat, 10 * MB).name, "x");
    }

    #[test]
    fn free_bytes() {
        assert_eq!(profile_free_bytes(3 * 1024 * MB, 0), 3 * 1024 * MB);
        assert_eq!(profile_free_bytes(3 * 1024 * MB, 900 * MB), 2172 * MB);
        assert_eq!(profile_free_bytes(MB, 2 * MB), 0);
    }
}
