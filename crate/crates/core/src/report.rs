//! Report rendering: JSON (lossless), per-slot CSV and a human table.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::sim::{SimReport, TransferRecord};
use crate::utp::{Direction, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected json, csv or table)")]
    UnknownFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "table" | "text" => Ok(Format::Table),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

const MIB: f64 = (1u64 << 20) as f64;

pub fn emit_report(report: &SimReport, format: Format) -> Result<String, ReportError> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(report)? + "\n",
        Format::Csv => steps_csv(report),
        Format::Table => table(report),
    })
}

pub fn parse_json_report(text: &str) -> Result<SimReport, ReportError> {
    Ok(serde_json::from_str(text)?)
}

/// One row per executed slot.
pub fn steps_csv(r: &SimReport) -> String {
    let mut out = String::from("slot,step,label,phase,layer,resident_bytes,live_tensors,pool_used_bytes,workspace_bytes,start,end,compute,stall\n");
    for s in &r.steps {
        let phase = match s.phase {
            crate::schedule::Phase::Forward => "forward",
            crate::schedule::Phase::Replay => "replay",
            crate::schedule::Phase::Backward => "backward",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.slot,
            s.step,
            s.label,
            phase,
            s.layer,
            s.resident_bytes,
            s.live_tensors,
            s.pool_used_bytes,
            s.workspace_bytes,
            s.start,
            s.end,
            s.compute,
            s.stall
        );
    }
    out
}

/// `step,tensor,direction,bytes,issue,complete,kind`
pub fn transfers_csv(transfers: &[TransferRecord]) -> String {
    let mut out = String::from("step,tensor,direction,bytes,issue,complete,kind\n");
    for t in transfers {
        let dir = match t.direction {
            Direction::Off => "off",
            Direction::Pre => "pre",
        };
        let kind = match t.kind {
            TransferKind::Scheduled => "scheduled",
            TransferKind::DemandMiss => "demand-miss",
        };
        let _ = writeln!(out, "{},{},{},{},{},{},{}", t.step, t.tensor, dir, t.bytes, t.issue, t.complete, kind);
    }
    out
}

fn mib(b: u64) -> String {
    format!("{:.3} MB", b as f64 / MIB)
}

fn table(r: &SimReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "features      {}", r.features);
    let _ = writeln!(out, "batch         {}", r.batch);
    let _ = writeln!(out, "pool          {}", mib(r.pool_bytes));
    let _ = writeln!(out, "peak          {} at step {} ({})", mib(r.peak_bytes), r.peak_label, r.peak_layer);
    let _ = writeln!(out, "pool high     {}", mib(r.pool_high_water_bytes));
    let _ = writeln!(out, "iteration     {:.3} us (compute {:.3}, stall {:.3}, drain {:.3})", r.iteration_time, r.compute_time, r.stall_time, r.drain_time);
    let _ = writeln!(out, "transfers     {} ({} scheduled, {} demand, {:.3} us)", r.transfers.len(), mib(r.scheduled_bytes), mib(r.demand_bytes), r.transfer_time);
    let _ = writeln!(out, "communication {}", mib(r.communication_bytes));
    let _ = writeln!(out, "recomputed    {} extra layer runs", r.extra_recompute);
    if r.features.cache {
        let _ = writeln!(out, "cache         {} hits, {} misses", r.cache_hits, r.cache_misses);
    }
    let c = &r.comparison;
    let _ = writeln!(out);
    let _ = writeln!(out, "comparison");
    let _ = writeln!(out, "  baseline peak        {}", mib(c.baseline_peak));
    let _ = writeln!(out, "  liveness formula     {}", mib(c.liveness_formula));
    let _ = writeln!(out, "  offload formula      {}", mib(c.offload_formula));
    let _ = writeln!(out, "  least working set    {} ({})", mib(c.l_peak), c.l_peak_layer);
    let _ = writeln!(out, "  this run             {}", mib(r.peak_bytes));
    let _ = writeln!(out);
    let _ = writeln!(out, "{:>8} {:>8} {:<16} {:>14} {:>6} {:>12} {:>10}", "step", "phase", "layer", "resident MB", "live", "compute us", "stall us");
    for s in &r.steps {
        let phase = match s.phase {
            crate::schedule::Phase::Forward => "fwd",
            crate::schedule::Phase::Replay => "replay",
            crate::schedule::Phase::Backward => "bwd",
        };
        let _ = writeln!(
            out,
            "{:>8.3} {:>8} {:<16} {:>14.3} {:>6} {:>12.3} {:>10.3}",
            s.label,
            phase,
            s.layer,
            s.resident_bytes as f64 / MIB,
            s.live_tensors,
            s.compute,
            s.stall
        );
    }
    out
}
