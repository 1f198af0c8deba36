//! Paths in the lifted graph: long-range crossings, loop erasure,
//! backtracking, deviation, regeneration marks and local tree-likeness.
//!
//! A long-range edge is identified by its departure state `a`; it leads to
//! `eta(a)` and its reversal is the edge leaving `eta(a)`.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::StochasticMatrix;
use crate::model::{step, LiftedKernel};

/// A long-range crossing: the state left and the tick of arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Crossing {
    pub tick: u64,
    pub from: usize,
    pub to: usize,
}

/// A tick-resolved walk. `states[i]` is the state at tick `start_tick + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start_tick: u64,
    pub states: Vec<usize>,
    pub crossings: Vec<Crossing>,
}

impl Trajectory {
    /// Rebuild from states; a crossing is a half step that moved to the partner.
    pub fn from_states(start_tick: u64, states: Vec<usize>, lift: &LiftedKernel) -> Self {
        let crossings = states
            .windows(2)
            .enumerate()
            .filter(|(i, w)| (start_tick + *i as u64) % 2 == 0 && w[1] != w[0] && w[1] == lift.eta(w[0]))
            .map(|(i, w)| Crossing { tick: start_tick + i as u64 + 1, from: w[0], to: w[1] })
            .collect();
        Self { start_tick, states, crossings }
    }

    pub fn start(&self) -> usize {
        self.states[0]
    }

    pub fn end_tick(&self) -> u64 {
        self.start_tick + self.states.len() as u64 - 1
    }

    /// Departure states of the crossings in order.
    pub fn lr_path(&self) -> Vec<usize> {
        self.crossings.iter().map(|c| c.from).collect()
    }

    /// One line per tick: tick, state, crossed flag.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut c = self.crossings.iter().peekable();
        for (i, s) in self.states.iter().enumerate() {
            let tick = self.start_tick + i as u64;
            let crossed = c.peek().is_some_and(|x| x.tick == tick);
            if crossed {
                c.next();
            }
            out.push_str(&format!("{tick} {s} {}\n", u8::from(crossed)));
        }
        out
    }
}

/// Run the lifted chain for `ticks` ticks from `x0` at `start_tick`.
pub fn simulate<R: Rng + ?Sized>(lift: &LiftedKernel, x0: usize, start_tick: u64, ticks: u64, rng: &mut R) -> Trajectory {
    let mut states = Vec::with_capacity(ticks as usize + 1);
    let mut crossings = Vec::new();
    let mut x = x0;
    states.push(x);
    for i in 0..ticks {
        let tick = start_tick + i;
        let y = step(lift, x, tick, rng);
        if tick % 2 == 0 && y != x {
            crossings.push(Crossing { tick: tick + 1, from: x, to: y });
        }
        x = y;
        states.push(x);
    }
    Trajectory { start_tick, states, crossings }
}

/// Erase adjacent `(e, rev(e))` pairs until none remain.
pub fn loop_erase_by<E: Copy + Eq>(path: &[E], rev: impl Fn(E) -> E) -> Vec<E> {
    let mut stack: Vec<E> = Vec::with_capacity(path.len());
    for &e in path {
        if stack.last().is_some_and(|&top| rev(top) == e) {
            stack.pop();
        } else {
            stack.push(e);
        }
    }
    stack
}

/// Loop-erased trace of a sequence of crossings.
pub fn loop_erase(lr_path: &[usize], lift: &LiftedKernel) -> Vec<usize> {
    loop_erase_by(lr_path, |e| lift.eta(e))
}

/// First index `j` at which the last `2l` edges read `f_1..f_l` with distinct
/// `f_i`, followed by `rev(f_l)..rev(f_1)`.
pub fn detect_backtrack_by<E: Copy + Eq + std::hash::Hash>(path: &[E], rev: impl Fn(E) -> E, l: usize) -> Option<usize> {
    if l == 0 {
        return None;
    }
    (2 * l - 1..path.len()).find(|&j| {
        let w = &path[j + 1 - 2 * l..=j];
        let (fwd, back) = w.split_at(l);
        let distinct = fwd.iter().collect::<HashSet<_>>().len() == l;
        distinct && (0..l).all(|i| back[i] == rev(fwd[l - 1 - i]))
    })
}

/// Tick of the first backtrack over long-range distance `l`.
pub fn detect_backtrack(traj: &Trajectory, lift: &LiftedKernel, l: usize) -> Option<u64> {
    detect_backtrack_by(&traj.lr_path(), |e| lift.eta(e), l).map(|j| traj.crossings[j].tick)
}

/// Cached forward small-range balls of radius `r - 1`.
pub struct SrBalls<'a> {
    p: &'a StochasticMatrix,
    r: usize,
    cache: HashMap<usize, HashMap<usize, usize>>,
}

impl<'a> SrBalls<'a> {
    pub fn new(p: &'a StochasticMatrix, r: usize) -> Self {
        Self { p, r, cache: HashMap::new() }
    }

    /// Forward distances from `c` that are below `r`.
    pub fn ball(&mut self, c: usize) -> &HashMap<usize, usize> {
        let (p, r) = (self.p, self.r);
        self.cache.entry(c).or_insert_with(|| sr_ball(p, c, r.saturating_sub(1)))
    }

    /// `d_SR(c, y) < r`.
    pub fn within(&mut self, c: usize, y: usize) -> bool {
        self.r > 0 && self.ball(c).contains_key(&y)
    }
}

/// Forward BFS distances from `c` up to `radius`.
pub fn sr_ball(p: &StochasticMatrix, c: usize, radius: usize) -> HashMap<usize, usize> {
    let mut dist = HashMap::from([(c, 0usize)]);
    let mut q = VecDeque::from([c]);
    while let Some(u) = q.pop_front() {
        let d = dist[&u];
        if d == radius {
            continue;
        }
        for &v in p.row_cols(u) {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                e.insert(d + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Tracks the stack of uncancelled crossings and the current center.
#[derive(Debug, Clone)]
pub struct CenterStack {
    start: usize,
    stack: Vec<usize>,
}

impl CenterStack {
    pub fn new(start: usize) -> Self {
        Self { start, stack: Vec::new() }
    }

    /// Returns true when the crossing cancels the top edge.
    pub fn cross(&mut self, from: usize, lift: &LiftedKernel) -> bool {
        if self.stack.last().is_some_and(|&top| lift.eta(top) == from) {
            self.stack.pop();
            true
        } else {
            self.stack.push(from);
            false
        }
    }

    /// Arrival state of the top edge, or the start.
    pub fn center(&self, lift: &LiftedKernel) -> usize {
        self.stack.last().map_or(self.start, |&a| lift.eta(a))
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn edges(&self) -> &[usize] {
        &self.stack
    }
}

/// First tick with `d_SR(center, X_t) >= r`.
pub fn detect_deviation(traj: &Trajectory, lift: &LiftedKernel, r: usize) -> Option<u64> {
    let mut balls = SrBalls::new(&lift.second_half, r);
    let mut cs = CenterStack::new(traj.start());
    let mut next = traj.crossings.iter().peekable();
    for (i, &x) in traj.states.iter().enumerate() {
        let tick = traj.start_tick + i as u64;
        if let Some(c) = next.next_if(|c| c.tick == tick) {
            cs.cross(c.from, lift);
        }
        if !balls.within(cs.center(lift), x) {
            return Some(tick);
        }
    }
    None
}

/// A first crossing of a covering edge and its regeneration status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegenMark {
    pub tick: u64,
    pub from: usize,
    /// Number of uncancelled crossings after this one.
    pub depth: usize,
    pub regeneration: bool,
    /// Not decided within the lookahead; counted as a regeneration.
    pub unresolved: bool,
    /// Crossed within the final lookahead window; excluded from statistics.
    pub tail: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegenReport {
    pub marks: Vec<RegenMark>,
    /// Some decision needed more than the lookahead.
    pub lookahead_short: bool,
}

impl RegenReport {
    /// Regeneration ticks outside the tail window.
    pub fn ticks(&self) -> Vec<u64> {
        self.marks.iter().filter(|m| m.regeneration && !m.tail).map(|m| m.tick).collect()
    }

    /// All regeneration ticks, tail included.
    pub fn all_ticks(&self) -> Vec<u64> {
        self.marks.iter().filter(|m| m.regeneration).map(|m| m.tick).collect()
    }
}

/// Mark first crossings of covering edges that reach `l` more levels (or the
/// end of the path) before being cancelled. Decisions are looked up to `w`
/// time units ahead; an undecided crossing counts as a regeneration.
pub fn regeneration_edges(traj: &Trajectory, lift: &LiftedKernel, l: usize, w: u64) -> RegenReport {
    let l = l.max(1);
    let horizon = w.saturating_mul(2);
    let end = traj.end_tick();
    let mut trie: HashMap<(usize, usize), usize> = HashMap::new();
    // Stack entries: (trie node, departure state, candidate index if still pending).
    let mut stack: Vec<(usize, usize, Option<usize>)> = Vec::new();
    let mut cands: Vec<(Crossing, usize, Option<(u64, bool)>)> = Vec::new();
    for c in &traj.crossings {
        if stack.last().is_some_and(|&(_, a, _)| lift.eta(a) == c.from) {
            let (_, _, pending) = stack.pop().expect("nonempty");
            if let Some(k) = pending {
                cands[k].2 = Some((c.tick, false));
            }
            continue;
        }
        let parent = stack.last().map_or(0, |&(node, _, _)| node);
        let fresh = trie.len() + 1;
        let node = *trie.entry((parent, c.from)).or_insert(fresh);
        let pending = if node == fresh {
            cands.push((*c, stack.len() + 1, None));
            Some(cands.len() - 1)
        } else {
            None
        };
        stack.push((node, c.from, pending));
        let s = stack.len();
        if s >= l {
            if let Some(k) = stack[s - l].2.take() {
                cands[k].2 = Some((c.tick, true));
            }
        }
    }
    let mut lookahead_short = false;
    let marks = cands
        .into_iter()
        .map(|(c, depth, outcome)| {
            let (at, ok) = outcome.unwrap_or((end, true));
            let unresolved = at - c.tick > horizon;
            lookahead_short |= unresolved && outcome.is_some();
            RegenMark {
                tick: c.tick,
                from: c.from,
                depth,
                regeneration: ok || unresolved,
                unresolved,
                tail: end.saturating_sub(horizon) < c.tick,
            }
        })
        .collect();
    RegenReport { marks, lookahead_short }
}

/// Parameters of the typical-path class.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PathClassConfig {
    pub r: usize,
    pub l: usize,
    pub m: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GammaReason {
    Deviate,
    Backtrack,
    NoRegeneration,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaResult {
    pub member: bool,
    pub reasons: Vec<GammaReason>,
    pub deviation: Option<u64>,
    pub backtrack: Option<u64>,
}

/// Membership in the typical class: no deviation from small-range distance
/// `r`, no backtrack over `l`, and no stretch of `m` time units without a
/// regeneration crossing. Regeneration is judged on the whole path.
pub fn gamma_membership(traj: &Trajectory, lift: &LiftedKernel, cfg: &PathClassConfig) -> GammaResult {
    let deviation = detect_deviation(traj, lift, cfg.r);
    let backtrack = detect_backtrack(traj, lift, cfg.l);
    let regen = regeneration_edges(traj, lift, cfg.l, u64::MAX / 4);
    let mut reasons = Vec::new();
    if deviation.is_some() {
        reasons.push(GammaReason::Deviate);
    }
    if backtrack.is_some() {
        reasons.push(GammaReason::Backtrack);
    }
    if has_regeneration_gap(&regen.all_ticks(), traj.start_tick, traj.end_tick(), cfg.m) {
        reasons.push(GammaReason::NoRegeneration);
    }
    GammaResult { member: reasons.is_empty(), reasons, deviation, backtrack }
}

/// Some window of `2m` ticks contains no regeneration tick.
pub fn has_regeneration_gap(ticks: &[u64], start: u64, end: u64, m: u64) -> bool {
    let mut prev = start;
    for &t in ticks {
        if (t - 1).min(end) - prev >= 2 * m {
            return true;
        }
        prev = t;
    }
    end - prev >= 2 * m
}

/// Which ball `quasi_tree_like` explores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BallMode {
    /// Undirected lifted-kernel steps up to radius `r`.
    Kernel,
    /// Up to `r` long-range levels, small-range moves limited to distance below `sr_radius`.
    LongRange { sr_radius: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeLikeReport {
    pub tree_like: bool,
    pub ball_size: usize,
    /// Largest undirected degree of the lifted kernel graph.
    pub degree: usize,
    /// `(degree^(r+1) - 1) / (degree - 1)` in kernel mode.
    pub size_bound: Option<usize>,
}

/// Covering component: center state and link to the parent.
#[derive(Debug, Clone)]
struct CoverComp {
    center: Option<usize>,
    parent: Option<(usize, usize)>,
}

/// Lazily built covering of the lifted graph rooted at a state.
struct Cover<'a> {
    lift: &'a LiftedKernel,
    comps: Vec<CoverComp>,
    children: HashMap<(usize, usize), usize>,
}

impl<'a> Cover<'a> {
    fn new(lift: &'a LiftedKernel) -> Self {
        Self { lift, comps: vec![CoverComp { center: None, parent: None }], children: HashMap::new() }
    }

    /// Partner of a covering vertex.
    fn jump(&mut self, (c, a): (usize, usize)) -> (usize, usize) {
        let ea = self.lift.eta(a);
        if self.comps[c].center == Some(a) {
            let (pc, pa) = self.comps[c].parent.expect("centers have parents");
            return (pc, pa);
        }
        let next = self.comps.len();
        let child = *self.children.entry((c, a)).or_insert(next);
        if child == next {
            self.comps.push(CoverComp { center: Some(ea), parent: Some((c, a)) });
        }
        (child, ea)
    }
}

/// Largest number of distinct undirected neighbours in the lifted kernel graph.
pub fn kernel_degree(lift: &LiftedKernel) -> usize {
    let pred = lift.scp.predecessors();
    (0..lift.size())
        .map(|x| {
            let mut s: HashSet<usize> = lift.scp.row_cols(x).iter().copied().collect();
            s.extend(pred[x].iter().copied());
            s.remove(&x);
            s.len()
        })
        .max()
        .unwrap_or(0)
}

/// Explore a ball in the covering and report whether it projects injectively.
pub fn quasi_tree_like(lift: &LiftedKernel, x: usize, r: usize, mode: BallMode, budget: usize) -> Result<TreeLikeReport> {
    let degree = kernel_degree(lift);
    let mut cover = Cover::new(lift);
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut states: HashSet<usize> = HashSet::new();
    let mut tree_like = true;
    let mut visit = |v: (usize, usize), seen: &mut HashSet<(usize, usize)>| -> Result<bool> {
        if !seen.insert(v) {
            return Ok(false);
        }
        if seen.len() > budget {
            return Err(Error::Budget(format!("ball exceeds {budget} vertices")));
        }
        if !states.insert(v.1) {
            tree_like = false;
        }
        Ok(true)
    };
    let p = &lift.second_half;
    match mode {
        BallMode::Kernel => {
            let pred = p.predecessors();
            let root = (0, x);
            visit(root, &mut seen)?;
            let mut frontier = vec![root];
            for _ in 0..r {
                let mut next = Vec::new();
                for v in frontier {
                    let mut nb = Vec::new();
                    nb.extend(p.row_cols(v.1).iter().map(|&b| (v.0, b)));
                    let j = cover.jump(v);
                    nb.extend(p.row_cols(j.1).iter().map(|&b| (j.0, b)));
                    for &c in &pred[v.1] {
                        nb.push((v.0, c));
                        nb.push(cover.jump((v.0, c)));
                    }
                    for u in nb {
                        if visit(u, &mut seen)? {
                            next.push(u);
                        }
                    }
                }
                frontier = next;
            }
        }
        BallMode::LongRange { sr_radius } => {
            let mut balls = SrBalls::new(p, sr_radius);
            let mut frontier = vec![(0usize, x)];
            for level in 0..=r {
                let mut next = Vec::new();
                for (comp, center) in frontier {
                    let mut members: Vec<usize> = balls.ball(center).keys().copied().collect();
                    members.sort_unstable();
                    for a in members {
                        visit((comp, a), &mut seen)?;
                        if level < r && cover.comps[comp].center != Some(a) {
                            next.push(cover.jump((comp, a)));
                        }
                    }
                }
                frontier = next;
            }
        }
    }
    let size_bound = match mode {
        BallMode::Kernel if degree > 1 => {
            Some((degree.pow(r as u32 + 1) - 1) / (degree - 1))
        }
        BallMode::Kernel => Some(r + 1),
        BallMode::LongRange { .. } => None,
    };
    Ok(TreeLikeReport { tree_like, ball_size: seen.len(), degree, size_bound })
}
