//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single `criterion N: PASS|FAIL` line.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use memsched::costmodel::{infer_shapes, Shape};
use memsched::fixtures;
use memsched::liveness::build_liveness;
use memsched::netgraph::LayerKind;
use memsched::poolalloc::{MemoryPool, PoolError};
use memsched::recompute::{self, PlanKind};
use memsched::schedule::{Policy, Schedule};
use memsched::sim::SweepAxis;
use memsched::{build_execution_order, run_iteration, sweep, CostConfig, Model, NetworkDef, SimConfig, SimReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: f64 = (1u64 << 20) as f64;
const GIB: u64 = 1 << 30;

/// Written to the raw stderr handle so the line shows without `--nocapture`.
fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
}

fn sim(net: &NetworkDef, batch: u64, features: &str) -> SimReport {
    let mut cfg = SimConfig { features: features.parse().unwrap(), ..SimConfig::default() };
    cfg.cost.batch = batch;
    run_iteration(net, &cfg).unwrap_or_else(|e| panic!("{features}: {e}"))
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    ((actual - expected) / expected).abs() <= rel
}

#[test]
fn criterion_1_formula_ladder() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1adde5);
    let mut failures = Vec::new();
    for i in 0..200 {
        let net = fixtures::random_network(&mut rng, 64);
        let batch = rng.gen_range(1..=4);
        let base = sim(&net, batch, "none").peak_bytes;
        let live = sim(&net, batch, "liveness").peak_bytes;
        let off = sim(&net, batch, "liveness,offload").peak_bytes;
        let all = sim(&net, batch, "liveness,offload,recompute");
        let ok = base >= live && live >= off && off >= all.peak_bytes && all.peak_bytes == all.comparison.l_peak;
        if !ok {
            failures.push(format!("net {i}: {base} {live} {off} {} l_peak {}", all.peak_bytes, all.comparison.l_peak));
        }
    }
    let mut chain_failures = Vec::new();
    for i in 0..40 {
        let blocks = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=8);
        let hw = rng.gen_range(1..=8);
        let net = fixtures::uniform_chain(&mut rng, blocks, c, hw);
        let batch = rng.gen_range(1..=4);
        // Every tensor of a uniform chain has the same size, so each closed
        // form is a count of tensors.
        let b = batch * c * hw * hw * 4;
        let n = net.len() as u64;
        let convs = net.layers().iter().filter(|l| l.kind == LayerKind::Conv).count() as u64;
        let grads = gradient_buffers(&net);
        let terminal_grad = b;
        let expect = [
            (n + grads) * b,
            n * b + terminal_grad,
            (n - convs) * b + terminal_grad,
        ];
        let got = [
            sim(&net, batch, "none").peak_bytes,
            sim(&net, batch, "liveness").peak_bytes,
            sim(&net, batch, "liveness,offload").peak_bytes,
        ];
        if got != expect {
            chain_failures.push(format!("chain {i}: got {got:?} expected {expect:?}"));
        }
    }
    let elapsed = t0.elapsed();
    let ok = failures.is_empty() && chain_failures.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        1,
        ok,
        &format!(
            "200 random nets, {} ladder violations; 40 uniform chains, {} closed-form mismatches; {:.2}s",
            failures.len(),
            chain_failures.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok, "{failures:?} {chain_failures:?} {elapsed:?}");
}

/// Gradient buffers of a chain: every non-DATA layer with a predecessor
/// other than DATA gets one, except in-place layers that have an incoming
/// gradient to overwrite.
fn gradient_buffers(net: &NetworkDef) -> u64 {
    let mut count = 0;
    for l in net.layers() {
        let Some(&p) = l.prev.first() else { continue };
        if net.layer(p).kind == LayerKind::Data {
            continue;
        }
        let in_place = matches!(l.kind, LayerKind::Act | LayerKind::Dropout | LayerKind::Lrn) && !l.next.is_empty();
        if !in_place {
            count += 1;
        }
    }
    count
}

/// Buffer identity used by the oracle: an activation, or the gradient
/// buffer first created for a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Buf {
    Act(usize),
    Grad(usize),
}

struct Oracle {
    bytes: Vec<u64>,
    live: Vec<BTreeSet<Buf>>,
}

/// Replays the iteration from the layer rules alone and keeps every buffer
/// from its first to its last touching step, found by scanning all steps.
fn brute_force_liveness(net: &NetworkDef, batch: u64, input_on_device: bool) -> Oracle {
    let plan = build_execution_order(net).unwrap();
    let shapes: Vec<Shape> = infer_shapes(net, &plan, batch).unwrap();
    let size = |b: Buf| match b {
        Buf::Act(l) | Buf::Grad(l) => shapes[l].elements() * 4,
    };
    let has_act = |l: usize| input_on_device || net.layer(l).kind != LayerKind::Data;
    let mut touches: Vec<BTreeSet<Buf>> = Vec::new();
    for &l in &plan.forward {
        let mut s = BTreeSet::new();
        for &p in &net.layer(l).prev {
            if has_act(p) {
                s.insert(Buf::Act(p));
            }
        }
        if has_act(l) {
            s.insert(Buf::Act(l));
        }
        touches.push(s);
    }
    let mut grad: HashMap<usize, Buf> = HashMap::new();
    for &l in &plan.backward {
        let node = net.layer(l);
        let mut s = BTreeSet::new();
        if node.kind != LayerKind::Data {
            let (needs_x, needs_y) = match node.kind {
                LayerKind::Join => (false, false),
                LayerKind::Softmax => (false, true),
                LayerKind::Conv | LayerKind::Fc | LayerKind::Bn => (true, false),
                _ => (true, true),
            };
            if needs_x {
                for &p in &node.prev {
                    if has_act(p) {
                        s.insert(Buf::Act(p));
                    }
                }
            }
            if needs_y {
                s.insert(Buf::Act(l));
            }
            let incoming = grad.get(&l).copied();
            if let Some(g) = incoming {
                s.insert(g);
            }
            for &p in &node.prev {
                if net.layer(p).kind == LayerKind::Data {
                    continue;
                }
                let g = match grad.get(&p) {
                    Some(&g) => g,
                    None => {
                        let in_place = matches!(node.kind, LayerKind::Act | LayerKind::Dropout | LayerKind::Lrn)
                            && node.prev.len() == 1
                            && shapes[p] == shapes[l]
                            && incoming.is_some();
                        let g = if in_place { incoming.unwrap() } else { Buf::Grad(p) };
                        grad.insert(p, g);
                        g
                    }
                };
                s.insert(g);
            }
        }
        touches.push(s);
    }
    let steps = touches.len();
    let all: BTreeSet<Buf> = touches.iter().flatten().copied().collect();
    let mut bytes = vec![0; steps];
    let mut live = vec![BTreeSet::new(); steps];
    for s in 0..steps {
        for &b in &all {
            let before = (0..=s).any(|k| touches[k].contains(&b));
            let after = (s..steps).any(|k| touches[k].contains(&b));
            if before && after {
                bytes[s] += size(b);
                live[s].insert(b);
            }
        }
    }
    Oracle { bytes, live }
}

#[test]
fn criterion_2_liveness_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut mismatches = Vec::new();
    for i in 0..100 {
        let net = fixtures::random_network(&mut rng, 64);
        let batch = rng.gen_range(1..=4);
        let on_device = i % 2 == 0;
        let oracle = brute_force_liveness(&net, batch, on_device);
        let mut cfg = CostConfig::default().with_batch(batch);
        cfg.input_on_device = on_device;
        let m = Model::build(&net, &cfg).unwrap();
        let lt = build_liveness(&m.plan, &m.table);
        let sched = Schedule::build(&m, &Policy::LIVENESS);
        let mut sc = SimConfig { features: "liveness".parse().unwrap(), cost: cfg, ..SimConfig::default() };
        sc.pool_bytes = 4 * GIB;
        let report = run_iteration(&net, &sc).unwrap();
        for s in 0..oracle.bytes.len() {
            let sets: BTreeSet<Buf> = sched
                .intervals
                .iter()
                .filter(|iv| iv.start <= s && s <= iv.end)
                .map(|iv| {
                    let t = &m.table.tensors[iv.tensor];
                    match t.role {
                        memsched::costmodel::TensorRole::Activation => Buf::Act(t.owner),
                        _ => Buf::Grad(t.owner),
                    }
                })
                .collect();
            let rec = &report.steps[s];
            if lt.resident_bytes[s] != oracle.bytes[s]
                || rec.resident_bytes != oracle.bytes[s]
                || rec.live_tensors != oracle.live[s].len()
                || sets != oracle.live[s]
            {
                mismatches.push(format!("net {i} step {s}: oracle {} table {} sim {}", oracle.bytes[s], lt.resident_bytes[s], rec.resident_bytes));
                break;
            }
        }
    }
    let elapsed = t0.elapsed();
    let ok = mismatches.is_empty() && elapsed < Duration::from_secs(5);
    verdict(2, ok, &format!("100 random nets, {} mismatching nets; {:.2}s", mismatches.len(), elapsed.as_secs_f64()));
    assert!(ok, "{mismatches:?} {elapsed:?}");
}

fn alexnet_cost() -> CostConfig {
    let mut cfg = CostConfig::default().with_batch(200);
    cfg.input_on_device = false;
    cfg
}

fn alexnet_run(features: &str) -> SimReport {
    let cfg = SimConfig { features: features.parse().unwrap(), cost: alexnet_cost(), ..SimConfig::default() };
    run_iteration(&fixtures::alexnet(), &cfg).unwrap()
}

#[test]
fn criterion_3_alexnet_calibration() {
    let net = fixtures::alexnet();
    let m = Model::build(&net, &alexnet_cost()).unwrap();
    let step_of = |name: &str| m.plan.step_of_backward[net.find(name).unwrap()];
    let base = alexnet_run("none");
    let live = alexnet_run("liveness");
    let off = alexnet_run("liveness,offload");
    let all = alexnet_run("liveness,offload,recompute");
    // The liveness peak splits into the tensors the peak step itself touches
    // and everything else still resident.
    let touched: u64 = m.table.steps[live.peak_step].uses.iter().map(|&t| m.table.bytes(t)).sum();
    let rest = live.peak_bytes - touched;
    let mb = |b: u64| b as f64 / MIB;
    let checks = [
        ("baseline", within(mb(base.peak_bytes), 2189.437, 0.02), format!("{:.3} vs 2189.437", mb(base.peak_bytes))),
        ("liveness", within(mb(live.peak_bytes), 1489.355, 0.02), format!("{:.3} vs 1489.355", mb(live.peak_bytes))),
        ("liveness step", live.peak_step == step_of("POOL5"), format!("step {}", live.peak_step)),
        ("decomposition", within(mb(rest), 1409.277, 0.02) && within(mb(touched), 80.078, 0.02), format!("{:.3} + {:.3}", mb(rest), mb(touched))),
        ("offload", within(mb(off.peak_bytes), 1132.155, 0.02), format!("{:.3} vs 1132.155", mb(off.peak_bytes))),
        ("offload step", off.peak_step == step_of("POOL2"), format!("step {}", off.peak_step)),
        ("final", within(mb(all.peak_bytes), 886.385, 0.02), format!("{:.3} vs 886.385", mb(all.peak_bytes))),
        ("final step", all.peak_step == step_of("LRN1"), format!("step {}", all.peak_step)),
    ];
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks.iter().map(|(n, pass, d)| format!("{n} {d} {}", if *pass { "ok" } else { "MISS" })).collect();
    verdict(3, ok, &detail.join("; "));
    assert!(ok, "{detail:?}");
}

#[test]
fn criterion_4_recompute_counts() {
    let m = Model::build(&fixtures::alexnet(), &alexnet_cost()).unwrap();
    let speed = recompute::plan(&m, PlanKind::SpeedCentric, true);
    let memory = recompute::plan(&m, PlanKind::MemoryCentric, true);
    let cost = recompute::plan(&m, PlanKind::CostAware, true);
    let near = |got: usize, want: usize| got.abs_diff(want) <= 2;
    let ok = near(speed.extra, 14)
        && near(memory.extra, 23)
        && near(cost.extra, 17)
        && speed.extra < cost.extra
        && cost.extra < memory.extra
        && cost.peak_bytes == memory.peak_bytes;
    verdict(
        4,
        ok,
        &format!(
            "extra speed/memory/cost-aware = {}/{}/{}; peaks memory {} cost-aware {}",
            speed.extra, memory.extra, cost.extra, memory.peak_bytes, cost.peak_bytes
        ),
    );
    assert!(ok);
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

#[test]
fn criterion_5_cache_communication() {
    let net = fixtures::alexnet();
    let batches: Vec<u64> = vec![256, 512, 768, 1024, 1280, 1536, 1664, 1792, 1920, 2048];
    let mut cfg = SimConfig { features: "liveness,offload,cache".parse().unwrap(), cost: alexnet_cost(), ..SimConfig::default() };
    cfg.pool_bytes = 12 * GIB;
    let cached: Vec<u64> = sweep(&net, &cfg, SweepAxis::Batch, &batches)
        .into_iter()
        .map(|r| r.map(|r| r.communication_bytes).unwrap_or_else(|e| panic!("{e}")))
        .collect();
    cfg.features = "liveness,offload".parse().unwrap();
    let uncached: Vec<f64> = sweep(&net, &cfg, SweepAxis::Batch, &batches)
        .into_iter()
        .map(|r| r.map(|r| r.communication_bytes as f64).unwrap_or_else(|e| panic!("{e}")))
        .collect();
    let first = cached.iter().position(|&b| b > 0);
    let shape_ok = match first {
        Some(k) => k > 0 && cached[..k].iter().all(|&b| b == 0) && cached[k..].windows(2).all(|w| w[1] > w[0]),
        None => false,
    };
    let xs: Vec<f64> = batches.iter().map(|&b| b as f64).collect();
    let r2 = r_squared(&xs, &uncached);
    let ok = shape_ok && r2 >= 0.99;
    let gb: Vec<String> = cached.iter().map(|&b| format!("{:.2}", b as f64 / GIB as f64)).collect();
    verdict(5, ok, &format!("cache GB over batches {batches:?} = [{}]; cache off R^2 = {r2:.5}", gb.join(", ")));
    assert!(ok);
}

/// Block bitmap with the same first-fit-by-offset rule.
struct Bitmap {
    used: Vec<bool>,
    block: u64,
    live: HashMap<u64, (usize, usize)>,
}

impl Bitmap {
    fn alloc(&mut self, id: u64, bytes: u64) -> Option<usize> {
        let need = bytes.div_ceil(self.block) as usize;
        let mut run = 0;
        for i in 0..self.used.len() {
            run = if self.used[i] { 0 } else { run + 1 };
            if run == need {
                let start = i + 1 - need;
                self.used[start..=i].iter_mut().for_each(|b| *b = true);
                self.live.insert(id, (start, need));
                return Some(start);
            }
        }
        None
    }

    fn free(&mut self, id: u64) {
        let (start, n) = self.live.remove(&id).unwrap();
        self.used[start..start + n].iter_mut().for_each(|b| *b = false);
    }
}

#[test]
fn criterion_6_allocator_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10c);
    let blocks = 2048u64;
    let mut pool = MemoryPool::new(blocks * 1024).unwrap();
    let mut bitmap = Bitmap { used: vec![false; blocks as usize], block: 1024, live: HashMap::new() };
    let mut ids: Vec<u64> = Vec::new();
    let mut disagreements = 0;
    let mut invariant_breaks = 0;
    let (mut successes, mut failures) = (0, 0);
    for _ in 0..100_000 {
        if ids.is_empty() || rng.gen_bool(0.55) {
            let bytes = rng.gen_range(1..=96 * 1024);
            match pool.alloc(bytes) {
                Ok(id) => {
                    successes += 1;
                    let offset = pool.node(id).unwrap().offset as usize;
                    if bitmap.alloc(id, bytes) != Some(offset) {
                        disagreements += 1;
                    }
                    ids.push(id);
                }
                Err(PoolError::OutOfMemory { .. }) => {
                    failures += 1;
                    if bitmap.alloc(u64::MAX, bytes).is_some() {
                        disagreements += 1;
                        bitmap.free(u64::MAX);
                    }
                }
                Err(_) => disagreements += 1,
            }
        } else {
            let id = ids.swap_remove(rng.gen_range(0..ids.len()));
            if pool.free(id).is_err() {
                disagreements += 1;
            }
            bitmap.free(id);
        }
        if pool.check_invariants().is_err() || pool.used_blocks() != bitmap.used.iter().filter(|&&b| b).count() as u64 {
            invariant_breaks += 1;
        }
    }
    let elapsed = t0.elapsed();
    let ok = disagreements == 0 && invariant_breaks == 0 && failures > 0 && elapsed < Duration::from_secs(5);
    verdict(
        6,
        ok,
        &format!(
            "1e5 ops ({successes} allocs, {failures} out-of-memory), {disagreements} disagreements, {invariant_breaks} invariant breaks; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_conv_selection() {
    let net = fixtures::alexnet();
    // From just above the least working set (about 1.1 GiB here), where the
    // cache and the workspace compete for the pool, up to 12 GiB.
    let pools: Vec<u64> = [1136u64, 1200, 1300, 1400, 1600, 2048, 3072, 4096, 6144, 12288].iter().map(|m| m << 20).collect();
    let mut cfg = SimConfig { features: "all".parse().unwrap(), cost: alexnet_cost(), ..SimConfig::default() };
    cfg.cost.batch = 256;
    let runs: Vec<SimReport> =
        sweep(&net, &cfg, SweepAxis::Pool, &pools).into_iter().map(|r| r.unwrap_or_else(|e| panic!("{e}"))).collect();
    let infeasible: usize =
        runs.iter().map(|r| r.conv_selections.iter().filter(|s| s.workspace_bytes > s.free_bytes).count()).sum();
    let times: Vec<f64> = runs.iter().map(|r| r.iteration_time).collect();
    let monotone = times.windows(2).all(|w| w[1] <= w[0]);
    let ok = infeasible == 0 && monotone;
    let shown: Vec<String> = times.iter().map(|t| format!("{t:.0}")).collect();
    verdict(7, ok, &format!("{infeasible} infeasible selections; time over pools 1136 MB..12 GB = [{}]", shown.join(", ")));
    assert!(ok);
}

const STAGES: (usize, usize, usize) = (6, 32, 6);

fn resnet_k(k: usize) -> NetworkDef {
    fixtures::resnet([STAGES.0, STAGES.1, k, STAGES.2])
}

fn depth_k(k: usize) -> usize {
    fixtures::resnet_depth([STAGES.0, STAGES.1, k, STAGES.2])
}

fn trains(k: usize, features: &str) -> bool {
    let mut cfg = SimConfig { features: features.parse().unwrap(), ..SimConfig::default() };
    cfg.cost.batch = 16;
    cfg.pool_bytes = 12 * GIB;
    run_iteration(&resnet_k(k), &cfg).is_ok()
}

#[test]
fn criterion_8_depth_scaling() {
    // Without features the peak is every tensor at once; step K up until a run fails.
    let mut k_off = 0;
    while trains(k_off + 1, "none") {
        k_off += 1;
    }
    // With features on, the pool bound on the least working set decides;
    // bisect on that bound, then confirm with full runs on both sides.
    let fits = |k: usize| {
        let cost = CostConfig::default().with_batch(16);
        Model::build(&resnet_k(k), &cost).unwrap().l_peak().0 <= 12 * GIB
    };
    let (mut lo, mut hi) = (1usize, 2usize);
    while fits(hi) {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k_all = lo;
    let confirmed = trains(k_all, "all") && !trains(k_all + 1, "all");
    let (d_off, d_all) = (depth_k(k_off), depth_k(k_all));
    let ratio = d_all as f64 / d_off as f64;
    // Regression baselines from the first run of this suite.
    let frozen = d_off == DEPTH_OFF && d_all == DEPTH_ALL;
    let ok = confirmed && ratio >= 3.0 && frozen;
    verdict(8, ok, &format!("depth off {d_off} (n3={k_off}), all features {d_all} (n3={k_all}), ratio {ratio:.2}; confirmed {confirmed}"));
    assert!(ok);
}

const DEPTH_OFF: usize = 161;
const DEPTH_ALL: usize = 2861;
