//! `memsched` command line: run one simulated iteration, sweep batch or pool
//! size, and generate network files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use memsched::costmodel::{AlgoTemplate, CheckpointKinds};
use memsched::report::{emit_report, transfers_csv, Format};
use memsched::sim::{Allocator, SweepAxis};
use memsched::{fixtures, parse_network, run_iteration, sweep, LayerKind, NetworkDef, SimConfig, SimError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "memsched", version, about = "Simulate dynamic GPU memory scheduling for one training iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one iteration and write a report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the transfer log as CSV.
        #[arg(long)]
        transfers: Option<PathBuf>,
    },
    /// Run one iteration per value of batch size or pool size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "batch")]
        axis: SweepAxis,
        /// Comma-separated values; pool sizes accept K/M/G suffixes.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write a residual network with stage block counts n1..n4.
    GenResnet {
        #[arg(long, default_value_t = 3)]
        n1: usize,
        #[arg(long, default_value_t = 4)]
        n2: usize,
        #[arg(long, default_value_t = 6)]
        n3: usize,
        #[arg(long, default_value_t = 3)]
        n4: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded random fan/join network.
    GenRandom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        max_layers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Network file, or one of @alexnet, @resnet50, @fan12, @nested-fan10.
    #[arg(long)]
    net: String,
    #[arg(long)]
    batch: Option<u64>,
    /// Pool size in bytes; K, M and G suffixes are powers of 1024.
    #[arg(long, value_parser = parse_size)]
    pool: Option<u64>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long, default_value = "table")]
    report: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file; its values override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&s[..s.len() - 1], 10),
        Some('M') => (&s[..s.len() - 1], 20),
        Some('G') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let v: f64 = digits.trim().parse().map_err(|_| format!("bad size `{s}`"))?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(format!("bad size `{s}`"));
    }
    Ok((v * (1u64 << shift) as f64).round() as u64)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Size {
    Bytes(u64),
    Text(String),
}

impl Size {
    fn bytes(&self) -> Result<u64> {
        match self {
            Size::Bytes(b) => Ok(*b),
            Size::Text(t) => parse_size(t).map_err(|e| anyhow!(e)),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    cost: CostSection,
    checkpoints: Option<CheckpointSection>,
    conv_algos: Option<BTreeMap<String, AlgoSection>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimSection {
    pool: Option<Size>,
    block: Option<Size>,
    bandwidth: Option<f64>,
    allocator: Option<Allocator>,
    native_call_cost: Option<f64>,
    features: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CostSection {
    batch: Option<u64>,
    elem_bytes: Option<u64>,
    bwd_time_factor: Option<f64>,
    count_params: Option<bool>,
    input_on_device: Option<bool>,
    time_coeff: Option<BTreeMap<String, f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointSection {
    offload: Option<Vec<String>>,
    recompute: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AlgoSection {
    workspace_factor: f64,
    time_factor: f64,
}

fn kinds(names: &[String]) -> Result<Vec<LayerKind>> {
    names.iter().map(|n| n.parse::<LayerKind>().map_err(|e| anyhow!(e))).collect()
}

fn apply_file(cfg: &mut SimConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let s = file.sim;
    if let Some(p) = s.pool {
        cfg.pool_bytes = p.bytes()?;
    }
    if let Some(b) = s.block {
        cfg.block_bytes = b.bytes()?;
    }
    if let Some(b) = s.bandwidth {
        cfg.bandwidth = b;
    }
    if let Some(a) = s.allocator {
        cfg.allocator = a;
    }
    if let Some(c) = s.native_call_cost {
        cfg.native_call_cost = c;
    }
    if let Some(f) = s.features {
        cfg.features = f.parse().map_err(|e: String| anyhow!(e))?;
    }
    let c = file.cost;
    let cost = &mut cfg.cost;
    cost.batch = c.batch.unwrap_or(cost.batch);
    cost.elem_bytes = c.elem_bytes.unwrap_or(cost.elem_bytes);
    cost.bwd_time_factor = c.bwd_time_factor.unwrap_or(cost.bwd_time_factor);
    cost.count_params = c.count_params.unwrap_or(cost.count_params);
    cost.input_on_device = c.input_on_device.unwrap_or(cost.input_on_device);
    for (kind, v) in c.time_coeff.unwrap_or_default() {
        cost.time_coeff.insert(kind.parse().map_err(|e: String| anyhow!(e))?, v);
    }
    if let Some(cp) = file.checkpoints {
        let default = CheckpointKinds::default();
        cost.checkpoints = CheckpointKinds {
            offload: cp.offload.as_deref().map(kinds).transpose()?.unwrap_or(default.offload),
            recompute: cp.recompute.as_deref().map(kinds).transpose()?.unwrap_or(default.recompute),
        };
    }
    if let Some(algos) = file.conv_algos {
        cost.conv_algos =
            algos.into_iter().map(|(name, a)| AlgoTemplate::new(&name, a.workspace_factor, a.time_factor)).collect();
    }
    Ok(())
}

fn load_net(spec: &str) -> Result<NetworkDef> {
    if let Some(name) = spec.strip_prefix('@') {
        return Ok(match name {
            "alexnet" => fixtures::alexnet(),
            "resnet50" | "resnet" => fixtures::resnet([3, 4, 6, 3]),
            "fan12" => fixtures::fan12(),
            "nested-fan10" | "nested_fan10" => fixtures::nested_fan10(),
            other => bail!("unknown built-in network `@{other}`"),
        });
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
    parse_network(&text).with_context(|| format!("parsing {spec}"))
}

fn config(common: &Common) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    if let Some(b) = common.batch {
        cfg.cost.batch = b;
    }
    if let Some(p) = common.pool {
        cfg.pool_bytes = p;
    }
    if let Some(f) = &common.features {
        cfg.features = f.parse().map_err(|e: String| anyhow!(e))?;
    }
    if let Some(path) = &common.config {
        apply_file(&mut cfg, path)?;
    }
    Ok(cfg)
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Errors that should exit with a code other than the generic 2.
enum Failure {
    Sim(SimError),
    Other(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Other(e.into())
    }
}

fn sweep_rows(axis: SweepAxis, values: &[u64], runs: &[Result<memsched::SimReport, SimError>], format: Format) -> Result<String> {
    if format == Format::Json {
        let docs: Vec<serde_json::Value> = values
            .iter()
            .zip(runs)
            .map(|(v, r)| match r {
                Ok(rep) => serde_json::json!({ "value": v, "report": rep }),
                Err(e) => serde_json::json!({ "value": v, "error": e.to_string(), "exit_code": e.exit_code() }),
            })
            .collect();
        return Ok(serde_json::to_string_pretty(&docs)? + "\n");
    }
    let axis = match axis {
        SweepAxis::Batch => "batch",
        SweepAxis::Pool => "pool_bytes",
    };
    let header = [axis, "status", "peak_bytes", "communication_bytes", "demand_bytes", "extra_recompute", "iteration_time"];
    let mut rows = vec![header.map(String::from).to_vec()];
    for (v, r) in values.iter().zip(runs) {
        rows.push(match r {
            Ok(rep) => vec![
                v.to_string(),
                "ok".into(),
                rep.peak_bytes.to_string(),
                rep.communication_bytes.to_string(),
                rep.demand_bytes.to_string(),
                rep.extra_recompute.to_string(),
                format!("{:.3}", rep.iteration_time),
            ],
            Err(e) => {
                let mut row = vec![v.to_string(), format!("error {}", e.exit_code())];
                row.extend(std::iter::repeat_n(String::new(), header.len() - 2));
                row
            }
        });
    }
    let sep = if format == Format::Csv { "," } else { "  " };
    let mut out = String::new();
    if format == Format::Table {
        let widths: Vec<usize> = (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
        for r in &rows {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out += cells.join(sep).trim_end();
            out.push('\n');
        }
        for (v, r) in values.iter().zip(runs) {
            if let Err(e) = r {
                out += &format!("{axis}={v}: {e}\n");
            }
        }
    } else {
        for r in &rows {
            out += &r.join(sep);
            out.push('\n');
        }
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, transfers } => {
            let format: Format = common.report.parse()?;
            let cfg = config(&common)?;
            let net = load_net(&common.net)?;
            let report = run_iteration(&net, &cfg).map_err(Failure::Sim)?;
            write_out(common.out.as_deref(), &emit_report(&report, format)?)?;
            if let Some(p) = transfers {
                write_out(Some(&p), &transfers_csv(&report.transfers))?;
            }
        }
        Command::Sweep { common, axis, values } => {
            let format: Format = common.report.parse()?;
            let cfg = config(&common)?;
            cfg.validate().map_err(Failure::Sim)?;
            let net = load_net(&common.net)?;
            let values: Vec<u64> = values
                .iter()
                .map(|v| match axis {
                    SweepAxis::Pool => parse_size(v),
                    SweepAxis::Batch => v.trim().parse().map_err(|_| format!("bad batch size `{v}`")),
                })
                .collect::<Result<_, _>>()
                .map_err(|e| anyhow!(e))?;
            let runs = sweep(&net, &cfg, axis, &values);
            write_out(common.out.as_deref(), &sweep_rows(axis, &values, &runs, format)?)?;
        }
        Command::GenResnet { n1, n2, n3, n4, out } => {
            write_out(out.as_deref(), &fixtures::resnet_text([n1, n2, n3, n4]))?;
        }
        Command::GenRandom { seed, max_layers, out } => {
            if max_layers < 3 {
                return Err(anyhow!("--max-layers must be at least 3").into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            write_out(out.as_deref(), &fixtures::random_network(&mut rng, max_layers).to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Sim(e)) => {
            eprintln!("memsched: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Other(e)) => {
            eprintln!("memsched: {e:#}");
            ExitCode::from(2)
        }
    }
}
