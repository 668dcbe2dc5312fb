//! Peak tracking for the per-segment replay search.
//!
//! Switching one segment between speed- and memory-centric replay only
//! changes that segment's replay slots, the intervals of its dropped
//! tensors and the intervals of the tensors its replays read. Slots are
//! addressed by a coordinate that does not move when other groups gain or
//! lose replays, so the residency lives in a max segment tree and a switch
//! costs a handful of range updates instead of a schedule rebuild.
//!
//! The result always equals the peak of `Schedule::build` for the same
//! choices; the tests check this on random networks.

use std::collections::{BTreeMap, BTreeSet};

use crate::costmodel::TensorId;
use crate::model::Model;
use crate::recompute::Strategy;

/// `(step, 0)` forward slot, `(step, fs + 1)` replay of the layer at
/// forward step `fs`, `(step, BWD)` backward slot.
type Coord = (usize, usize);
const BWD: usize = usize::MAX;
const INACTIVE: i64 = 1 << 60;

/// Range add, global max. Lazy tags are never pushed down: a node's max
/// already includes its own tag.
struct MaxTree {
    n: usize,
    tag: Vec<i64>,
    max: Vec<i64>,
}

impl MaxTree {
    fn new(init: &[i64]) -> Self {
        let n = init.len();
        let mut t = MaxTree { n, tag: vec![0; 4 * n], max: vec![0; 4 * n] };
        t.build(1, 0, n - 1, init);
        t
    }

    fn build(&mut self, node: usize, lo: usize, hi: usize, init: &[i64]) {
        if lo == hi {
            self.max[node] = init[lo];
            return;
        }
        let mid = (lo + hi) / 2;
        self.build(2 * node, lo, mid, init);
        self.build(2 * node + 1, mid + 1, hi, init);
        self.max[node] = self.max[2 * node].max(self.max[2 * node + 1]);
    }

    fn add(&mut self, l: usize, r: usize, v: i64) {
        if l <= r && v != 0 {
            self.update(1, 0, self.n - 1, l, r, v);
        }
    }

    fn update(&mut self, node: usize, lo: usize, hi: usize, l: usize, r: usize, v: i64) {
        if r < lo || hi < l {
            return;
        }
        if l <= lo && hi <= r {
            self.tag[node] += v;
            self.max[node] += v;
            return;
        }
        let mid = (lo + hi) / 2;
        self.update(2 * node, lo, mid, l, r, v);
        self.update(2 * node + 1, mid + 1, hi, l, r, v);
        self.max[node] = self.max[2 * node].max(self.max[2 * node + 1]) + self.tag[node];
    }

    fn top(&self) -> i64 {
        self.max[1]
    }
}

/// What one segment contributes under one strategy.
#[derive(Debug, Default)]
struct SegRun {
    replays: Vec<Coord>,
    /// Replay intervals of the segment's dropped tensors.
    intervals: Vec<(TensorId, Coord, Coord)>,
    /// Reads of kept tensors by the replays.
    reads: Vec<(TensorId, Coord)>,
}

fn step_coord(n: usize, s: usize) -> Coord {
    if s < n {
        (s, 0)
    } else {
        (s, BWD)
    }
}

fn seg_run(m: &Model, seg: usize, strategy: Strategy) -> SegRun {
    let table = &m.table;
    let plan = &m.plan;
    let n = plan.n();
    let steps = table.steps.len();
    let mine = |t: TensorId| m.dropped[t] == Some(seg);
    let uses_at = |s: usize, t: TensorId| s < steps && table.steps[s].uses.binary_search(&t).is_ok();
    let members: Vec<TensorId> =
        m.segments[seg].members.iter().filter_map(|&l| table.activation[l]).filter(|&a| mine(a)).collect();
    let mut need: Vec<usize> =
        members.iter().flat_map(|&t| table.tensors[t].use_steps.iter().copied().filter(|&s| s >= n)).collect();
    need.sort_unstable();
    need.dedup();
    let mut run = SegRun::default();
    if need.is_empty() {
        return run;
    }
    let add_reads = |run: &mut SegRun, replay: &BTreeSet<(usize, TensorId)>, s: usize| {
        for &(fs, _) in replay {
            run.replays.push((s, fs + 1));
            for &u in &table.steps[fs].uses {
                if m.dropped[u].is_none() {
                    run.reads.push((u, (s, fs + 1)));
                }
            }
        }
    };
    // Last replay slot in `replay` (at or after `from`) that reads `t`.
    let last_reader = |replay: &BTreeSet<(usize, TensorId)>, s: usize, t: TensorId, from: usize| {
        replay
            .iter()
            .filter(|&&(fs, _)| fs >= from && table.steps[fs].uses.binary_search(&t).is_ok())
            .map(|&(fs, _)| (s, fs + 1))
            .next_back()
    };
    match strategy {
        Strategy::Speed => {
            let s0 = need[0];
            let replay: BTreeSet<(usize, TensorId)> =
                members.iter().map(|&a| (plan.step_of_forward[table.tensors[a].owner], a)).collect();
            for &(fs, t) in &replay {
                let at = (s0, fs + 1);
                let bwd_last = table.tensors[t].use_steps.iter().copied().filter(|&s| s >= n).max().map(|s| (s, BWD));
                let end = [Some(at), bwd_last, last_reader(&replay, s0, t, 0)].into_iter().flatten().max().unwrap();
                run.intervals.push((t, at, end));
            }
            add_reads(&mut run, &replay, s0);
        }
        Strategy::Memory => {
            let mut retained: BTreeMap<TensorId, Coord> = BTreeMap::new();
            for &s in &need {
                let mut replay: BTreeSet<(usize, TensorId)> = BTreeSet::new();
                for &t in &table.steps[s].uses {
                    if !mine(t) {
                        continue;
                    }
                    let mut stack = vec![t];
                    while let Some(x) = stack.pop() {
                        if retained.contains_key(&x) {
                            continue;
                        }
                        let owner = table.tensors[x].owner;
                        if !replay.insert((plan.step_of_forward[owner], x)) {
                            continue;
                        }
                        for &p in &m.net.layer(owner).prev {
                            if let Some(pa) = table.activation[p].filter(|&pa| m.dropped[pa].is_some()) {
                                stack.push(pa);
                            }
                        }
                    }
                }
                retained.retain(|&t, &mut at| {
                    let keep = uses_at(s + 1, t);
                    if !keep {
                        run.intervals.push((t, at, (s, BWD)));
                    }
                    keep
                });
                for &(fs, t) in &replay {
                    let at = (s, fs + 1);
                    let needed_here = uses_at(s, t);
                    if needed_here && uses_at(s + 1, t) {
                        retained.insert(t, at);
                        continue;
                    }
                    let end = if needed_here { (s, BWD) } else { last_reader(&replay, s, t, fs).unwrap_or(at) };
                    run.intervals.push((t, at, end));
                }
                add_reads(&mut run, &replay, s);
            }
            debug_assert!(retained.is_empty());
        }
        Strategy::Keep => unreachable!("kept segments drop nothing"),
    }
    run
}

pub(crate) struct PeakTracker<'m> {
    m: &'m Model,
    offload: bool,
    coords: Vec<Coord>,
    tree: MaxTree,
    runs: Vec<[SegRun; 2]>,
    choice: Vec<Strategy>,
    reads_of: Vec<BTreeMap<Coord, u32>>,
    kept: Vec<Vec<(Coord, Coord)>>,
    active_first_group: BTreeSet<Coord>,
}

fn slot_of(s: Strategy) -> usize {
    match s {
        Strategy::Speed => 0,
        Strategy::Memory => 1,
        Strategy::Keep => unreachable!("the tracker only compares replay orders"),
    }
}

impl<'m> PeakTracker<'m> {
    /// Liveness schedule with every segment replayed per `choices`.
    pub(crate) fn new(m: &'m Model, offload: bool, choices: &[Strategy]) -> Self {
        let n = m.plan.n();
        let steps = m.table.steps.len();
        let runs: Vec<[SegRun; 2]> =
            (0..m.segments.len()).map(|i| [seg_run(m, i, Strategy::Speed), seg_run(m, i, Strategy::Memory)]).collect();
        let mut coords: Vec<Coord> = (0..steps).map(|s| step_coord(n, s)).collect();
        for r in runs.iter().flatten() {
            coords.extend(r.replays.iter().copied());
        }
        coords.sort_unstable();
        coords.dedup();
        let init: Vec<i64> = coords.iter().map(|c| if c.1 == 0 || c.1 == BWD { 0 } else { -INACTIVE }).collect();
        let mut t = PeakTracker {
            m,
            offload,
            tree: MaxTree::new(&init),
            coords,
            runs,
            choice: choices.to_vec(),
            reads_of: vec![BTreeMap::new(); m.table.len()],
            kept: vec![Vec::new(); m.table.len()],
            active_first_group: BTreeSet::from([(n, BWD)]),
        };
        for (tid, d) in m.table.tensors.iter().enumerate() {
            if m.dropped[tid].is_some() {
                let first = step_coord(n, d.use_steps[0]);
                let fwd_end = d.use_steps.iter().copied().filter(|&s| s < n).max().map_or(first, |s| (s, 0));
                t.add_interval(first, fwd_end, d.bytes as i64);
            }
        }
        for i in 0..t.runs.len() {
            t.apply(i, t.choice[i], 1);
        }
        for tid in 0..m.table.len() {
            if m.dropped[tid].is_none() {
                t.refresh(tid);
            }
        }
        t
    }

    pub(crate) fn peak(&self) -> u64 {
        self.tree.top().max(0) as u64
    }

    pub(crate) fn model(&self) -> &'m Model {
        self.m
    }

    pub(crate) fn choices(&self) -> &[Strategy] {
        &self.choice
    }

    pub(crate) fn set(&mut self, seg: usize, strategy: Strategy) {
        if self.choice[seg] == strategy {
            return;
        }
        let n = self.m.plan.n();
        let old = self.choice[seg];
        let touches_first = |r: &SegRun| r.replays.iter().any(|c| c.0 == n);
        let first_changed = touches_first(&self.runs[seg][slot_of(old)]) || touches_first(&self.runs[seg][slot_of(strategy)]);
        self.apply(seg, old, -1);
        self.apply(seg, strategy, 1);
        self.choice[seg] = strategy;
        let mut affected: BTreeSet<TensorId> = BTreeSet::new();
        for s in [old, strategy] {
            affected.extend(self.runs[seg][slot_of(s)].reads.iter().map(|&(t, _)| t));
        }
        if first_changed {
            affected.extend(self.m.offload_events.iter().map(|e| e.tensor).filter(|&t| self.m.dropped[t].is_none()));
        }
        for t in affected {
            self.refresh(t);
        }
    }

    fn idx(&self, c: Coord) -> usize {
        self.coords.partition_point(|&x| x < c)
    }

    fn add_interval(&mut self, a: Coord, b: Coord, v: i64) {
        let (l, r) = (self.idx(a), self.idx(b));
        debug_assert!(r < self.coords.len() && self.coords[r] == b);
        self.tree.add(l, r, v);
    }

    /// Adds (`sign` = 1) or removes (`sign` = -1) one segment run.
    fn apply(&mut self, seg: usize, strategy: Strategy, sign: i64) {
        let n = self.m.plan.n();
        let run = std::mem::take(&mut self.runs[seg][slot_of(strategy)]);
        for &c in &run.replays {
            let i = self.idx(c);
            self.tree.add(i, i, sign * INACTIVE);
            if c.0 == n {
                if sign > 0 {
                    self.active_first_group.insert(c);
                } else {
                    self.active_first_group.remove(&c);
                }
            }
        }
        for &(t, a, b) in &run.intervals {
            self.add_interval(a, b, sign * self.m.table.bytes(t) as i64);
        }
        for &(t, c) in &run.reads {
            let e = self.reads_of[t].entry(c).or_insert(0);
            if sign > 0 {
                *e += 1;
            } else {
                *e -= 1;
                if *e == 0 {
                    self.reads_of[t].remove(&c);
                }
            }
        }
        self.runs[seg][slot_of(strategy)] = run;
    }

    /// Recomputes the intervals of a kept tensor from its current readers.
    fn refresh(&mut self, t: TensorId) {
        let bytes = self.m.table.bytes(t) as i64;
        for (a, b) in std::mem::take(&mut self.kept[t]) {
            self.add_interval(a, b, -bytes);
        }
        let new = self.kept_intervals(t);
        for &(a, b) in &new {
            self.add_interval(a, b, bytes);
        }
        self.kept[t] = new;
    }

    fn kept_intervals(&self, t: TensorId) -> Vec<(Coord, Coord)> {
        let m = self.m;
        let n = m.plan.n();
        let d = &m.table.tensors[t];
        let reads = &self.reads_of[t];
        let first = step_coord(n, d.use_steps[0]);
        let first = reads.keys().next().map_or(first, |&c| c.min(first));
        let last = step_coord(n, d.last_use());
        let last = reads.keys().next_back().map_or(last, |&c| c.max(last));
        let fwd_last = d.use_steps.iter().copied().filter(|&s| s < n).max();
        let bwd_base = d.use_steps.iter().copied().find(|&s| s >= n).map(|s| (s, BWD));
        let bwd_first = match (bwd_base, reads.keys().next().copied()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if let (true, Some(deadline), Some(bwd_first)) = (self.offload, m.offload_deadline[t], bwd_first) {
            let fwd_end = fwd_last.map_or(first.0, |s| s);
            let release = fwd_end.max(deadline.saturating_sub(1));
            let rule = m.prefetch_step[t].map(|st| self.coords[self.idx((st, 0))]);
            let issue = rule.map_or(bwd_first, |r| r.min(bwd_first));
            // The prefetch must start at least two slots after the release.
            let gap = release + 2 <= n || issue > *self.active_first_group.first().unwrap();
            if gap {
                return vec![(first, (release, 0)), (issue, last)];
            }
        }
        vec![(first, last)]
    }
}
