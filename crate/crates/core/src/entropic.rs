//! Weights of loop-erased traces on the finite graph, entropy and drift
//! audits, forward and backward explorations, nice-path membership and the
//! regeneration estimate of the stationary law.
//!
//! A long-range edge is named by its departure state, as in `topology`.
//! Time is counted in ticks: even ticks take the half step, odd ticks a `P`
//! step, and one time unit is two ticks.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sparse_solve;
use crate::mixing::tv_distance;
use crate::model::{step, LiftedKernel};
use crate::rng::task_rng;
use crate::stats::{linear_fit, mean, quantile, Proportion};
use crate::topology::{
    gamma_membership, kernel_degree, loop_erase, quasi_tree_like, regeneration_edges, simulate, BallMode, CenterStack,
    PathClassConfig, SrBalls, Trajectory,
};

/// How a weight is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightMode {
    /// From `x` before its half step.
    Plain,
    /// From `x` after its half step, conditioned on reaching depth `l`
    /// before visiting `eta(x)`.
    Conditional,
}

/// Base state, radii and mode of a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WeightQuery {
    pub x: usize,
    /// Small-range radius: the walk fails once `d_SR(center, X) >= r`.
    pub r: usize,
    /// Long-range depth at which the first edge is read.
    pub l: usize,
    pub mode: WeightMode,
}

impl WeightQuery {
    fn validate(&self, lift: &LiftedKernel) -> Result<()> {
        if self.x >= lift.size() {
            return Err(Error::Invalid(format!("state {} out of range", self.x)));
        }
        if self.r == 0 || self.l == 0 {
            return Err(Error::Invalid("weights need r >= 1 and l >= 1".into()));
        }
        Ok(())
    }
}

/// Exact weights of the first edge.
#[derive(Debug, Clone, Serialize)]
pub struct WeightTable {
    pub query: WeightQuery,
    /// Probability of success through each first edge, unnormalized.
    pub raw: BTreeMap<usize, f64>,
    /// Total success probability.
    pub success: f64,
    /// Number of covering states in the linear system.
    pub cover_states: usize,
}

impl WeightTable {
    /// Weight of first edge `e`; conditional weights are normalized by the success probability.
    pub fn get(&self, e: usize) -> f64 {
        let w = self.raw.get(&e).copied().unwrap_or(0.0);
        match self.query.mode {
            WeightMode::Plain => w,
            WeightMode::Conditional if self.success > 0.0 => w / self.success,
            WeightMode::Conditional => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.raw.keys().map(|&e| self.get(e)).sum()
    }
}

/// Where a covering transition leads.
#[derive(Debug, Clone, Copy)]
enum Exit {
    Next(usize),
    Success(usize),
    Fail,
}

/// Stack of departure states, current state, half step pending.
type CoverKey = (Vec<usize>, usize, bool);

#[derive(Default)]
struct Interner {
    index: HashMap<CoverKey, usize>,
    keys: Vec<CoverKey>,
}

impl Interner {
    fn id(&mut self, k: CoverKey) -> usize {
        if let Some(&i) = self.index.get(&k) {
            return i;
        }
        let i = self.keys.len();
        self.index.insert(k.clone(), i);
        self.keys.push(k);
        i
    }
}

/// Transitions of the walk on the covering, truncated at depth `l`.
fn cover_chain(lift: &LiftedKernel, balls: &mut SrBalls, q: &WeightQuery, budget: usize) -> Result<Vec<Vec<(f64, Exit)>>> {
    let cond = q.mode == WeightMode::Conditional;
    let avoid = lift.eta(q.x);
    let center_of = |stack: &[usize]| stack.last().map_or(q.x, |&a| lift.eta(a));
    let mut keys = Interner::default();
    keys.id((Vec::new(), q.x, !cond));
    let mut moves: Vec<Vec<(f64, Exit)>> = Vec::new();
    while moves.len() < keys.keys.len() {
        if keys.keys.len() > budget {
            return Err(Error::Budget(format!("covering chain exceeds {budget} states")));
        }
        let (stack, s, half) = keys.keys[moves.len()].clone();
        let mut out = Vec::new();
        if half {
            let stay = lift.stay[s];
            if stay > 0.0 {
                out.push((stay, Exit::Next(keys.id((stack.clone(), s, false)))));
            }
            if stay < 1.0 {
                let to = lift.eta(s);
                let mut next = stack;
                let exit = if cond && to == avoid {
                    Exit::Fail
                } else if next.last().is_some_and(|&a| lift.eta(a) == s) {
                    next.pop();
                    if balls.within(center_of(&next), to) {
                        Exit::Next(keys.id((next, to, false)))
                    } else {
                        Exit::Fail
                    }
                } else {
                    next.push(s);
                    if next.len() >= q.l {
                        Exit::Success(next[0])
                    } else {
                        Exit::Next(keys.id((next, to, false)))
                    }
                };
                out.push((1.0 - stay, exit));
            }
        } else {
            let center = center_of(&stack);
            for (y, v) in lift.second_half.row(s) {
                if v <= 0.0 {
                    continue;
                }
                let exit = if (cond && y == avoid) || !balls.within(center, y) {
                    Exit::Fail
                } else {
                    Exit::Next(keys.id((stack.clone(), y, true)))
                };
                out.push((v, exit));
            }
        }
        moves.push(out);
    }
    Ok(moves)
}

/// Absorption probabilities from covering state 0, split by first edge.
fn absorb(moves: &[Vec<(f64, Exit)>]) -> Result<BTreeMap<usize, f64>> {
    let m = moves.len();
    let mut rev = vec![Vec::new(); m];
    let mut live = vec![false; m];
    let mut queue = VecDeque::new();
    for (i, out) in moves.iter().enumerate() {
        for &(_, e) in out {
            match e {
                Exit::Next(j) => rev[j].push(i),
                Exit::Success(_) if !live[i] => {
                    live[i] = true;
                    queue.push_back(i);
                }
                _ => {}
            }
        }
    }
    while let Some(j) = queue.pop_front() {
        for &i in &rev[j] {
            if !live[i] {
                live[i] = true;
                queue.push_back(i);
            }
        }
    }
    if !live[0] {
        return Ok(BTreeMap::new());
    }
    let mut index = vec![usize::MAX; m];
    let mut k = 0;
    for i in 0..m {
        if live[i] {
            index[i] = k;
            k += 1;
        }
    }
    let mut edges: BTreeMap<usize, usize> = BTreeMap::new();
    for out in moves {
        for &(_, e) in out {
            if let Exit::Success(f) = e {
                let next = edges.len();
                edges.entry(f).or_insert(next);
            }
        }
    }
    let mut triplets = Vec::new();
    let mut rhs = vec![vec![0.0; k]; edges.len()];
    for (i, out) in moves.iter().enumerate() {
        if !live[i] {
            continue;
        }
        let a = index[i];
        triplets.push((a, a, 1.0));
        for &(v, e) in out {
            match e {
                Exit::Next(j) if live[j] => triplets.push((a, index[j], -v)),
                Exit::Success(f) => rhs[edges[&f]][a] += v,
                _ => {}
            }
        }
    }
    let sol = sparse_solve(k, &triplets, &rhs)?;
    Ok(edges.into_iter().map(|(f, c)| (f, sol[c][index[0]].clamp(0.0, 1.0))).collect())
}

/// Default cap on covering states for one weight table.
pub const WEIGHT_BUDGET: usize = 2_000_000;

/// Exact first-edge weights by a sparse solve over the covering walk.
pub fn exact_weights(lift: &LiftedKernel, q: &WeightQuery, budget: usize) -> Result<WeightTable> {
    q.validate(lift)?;
    let mut balls = SrBalls::new(&lift.second_half, q.r);
    let moves = cover_chain(lift, &mut balls, q, budget)?;
    let raw = absorb(&moves)?;
    let success = raw.values().sum();
    Ok(WeightTable { query: *q, raw, success, cover_states: moves.len() })
}

/// Monte Carlo weights of the first edge.
#[derive(Debug, Clone, Serialize)]
pub struct WeightEstimate {
    pub query: WeightQuery,
    pub trials: u64,
    /// Runs that reached depth `l` without failing.
    pub accepted: u64,
    /// Per first edge; conditional estimates are over accepted runs.
    pub first: BTreeMap<usize, Proportion>,
    /// Fraction of runs that succeeded.
    pub success: Proportion,
    /// Base ball of `l` long-range levels projects injectively.
    pub tree_like: bool,
    /// Runs cut by the tick cap, counted as failures.
    pub truncated: u64,
}

impl WeightEstimate {
    /// Sum of the estimated weights and its standard error.
    pub fn sum(&self) -> (f64, f64) {
        match self.query.mode {
            WeightMode::Plain => (self.success.estimate, self.success.sigma),
            WeightMode::Conditional => (if self.accepted > 0 { 1.0 } else { 0.0 }, 0.0),
        }
    }
}

enum Trial {
    Success(usize),
    Fail,
    Cut,
}

fn weight_trial<R: Rng + ?Sized>(lift: &LiftedKernel, balls: &mut SrBalls, q: &WeightQuery, max_ticks: u64, rng: &mut R) -> Trial {
    let cond = q.mode == WeightMode::Conditional;
    let avoid = lift.eta(q.x);
    let mut s = q.x;
    let mut stack: Vec<usize> = Vec::new();
    for tick in (u64::from(cond)..).take(max_ticks as usize) {
        let y = step(lift, s, tick, rng);
        let half = tick % 2 == 0;
        if cond && y == avoid {
            return Trial::Fail;
        }
        if half {
            if y == s {
                continue;
            }
            if stack.last().is_some_and(|&a| lift.eta(a) == s) {
                stack.pop();
            } else {
                stack.push(s);
                if stack.len() >= q.l {
                    return Trial::Success(stack[0]);
                }
                s = y;
                continue;
            }
        }
        let center = stack.last().map_or(q.x, |&a| lift.eta(a));
        if !balls.within(center, y) {
            return Trial::Fail;
        }
        s = y;
    }
    Trial::Cut
}

/// Estimate first-edge weights by simulation; the conditional variant rejects
/// runs that fail the conditioning.
pub fn finite_weight<R: Rng + ?Sized>(
    lift: &LiftedKernel,
    q: &WeightQuery,
    trials: u64,
    max_ticks: u64,
    budget: usize,
    rng: &mut R,
) -> Result<WeightEstimate> {
    q.validate(lift)?;
    let mut balls = SrBalls::new(&lift.second_half, q.r);
    let mut hits: BTreeMap<usize, u64> = BTreeMap::new();
    let (mut accepted, mut truncated) = (0u64, 0u64);
    for _ in 0..trials {
        match weight_trial(lift, &mut balls, q, max_ticks, rng) {
            Trial::Success(e) => {
                *hits.entry(e).or_default() += 1;
                accepted += 1;
            }
            Trial::Fail => {}
            Trial::Cut => truncated += 1,
        }
    }
    let denom = match q.mode {
        WeightMode::Plain => trials,
        WeightMode::Conditional if accepted == 0 => {
            return Err(Error::Invalid(format!("no accepted samples in {trials} conditional trials from {}", q.x)))
        }
        WeightMode::Conditional => accepted,
    };
    let tree_like = quasi_tree_like(lift, q.x, q.l, BallMode::LongRange { sr_radius: q.r }, budget)?.tree_like;
    Ok(WeightEstimate {
        query: *q,
        trials,
        accepted,
        first: hits.into_iter().map(|(e, h)| (e, Proportion::new(h, denom))).collect(),
        success: Proportion::new(accepted, trials),
        tree_like,
        truncated,
    })
}

/// Exact weight tables cached per base state and mode.
pub struct WeightCache<'a> {
    lift: &'a LiftedKernel,
    pub r: usize,
    pub l: usize,
    pub budget: usize,
    tables: HashMap<(usize, WeightMode), WeightTable>,
}

impl<'a> WeightCache<'a> {
    pub fn new(lift: &'a LiftedKernel, r: usize, l: usize) -> Self {
        Self { lift, r, l, budget: WEIGHT_BUDGET, tables: HashMap::new() }
    }

    pub fn lift(&self) -> &'a LiftedKernel {
        self.lift
    }

    pub fn table(&mut self, x: usize, mode: WeightMode) -> Result<&WeightTable> {
        if !self.tables.contains_key(&(x, mode)) {
            let q = WeightQuery { x, r: self.r, l: self.l, mode };
            let t = exact_weights(self.lift, &q, self.budget)?;
            self.tables.insert((x, mode), t);
        }
        Ok(&self.tables[&(x, mode)])
    }

    pub fn edge(&mut self, x: usize, e: usize, mode: WeightMode) -> Result<f64> {
        Ok(self.table(x, mode)?.get(e))
    }

    /// Weight of a long-range path from `x`: the plain weight of the first
    /// edge, then conditional weights at the arrival of each previous edge.
    pub fn path(&mut self, x: usize, xi: &[usize]) -> Result<f64> {
        let mut w = 1.0;
        for (i, &e) in xi.iter().enumerate() {
            w *= if i == 0 {
                self.edge(x, e, WeightMode::Plain)?
            } else {
                self.edge(self.lift.eta(xi[i - 1]), e, WeightMode::Conditional)?
            };
            if w == 0.0 {
                break;
            }
        }
        Ok(w)
    }

    pub fn cached(&self) -> usize {
        self.tables.len()
    }
}

/// Settings of the entropy and drift audit.
#[derive(Debug, Clone, Serialize)]
pub struct AuditConfig {
    /// Length in time units.
    pub t: u64,
    pub r: usize,
    pub l: usize,
    pub runs: u64,
    /// Number of evenly spaced checkpoints.
    pub checkpoints: usize,
    /// Band constant; fitted from the runs when absent.
    pub band: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AuditPoint {
    pub time: f64,
    pub xi_len: usize,
    pub neg_log_w: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditRun {
    pub run: u64,
    pub start: usize,
    pub xi_len: usize,
    pub neg_log_w: f64,
    /// False when some weight factor vanished.
    pub nice: bool,
    pub curve: Vec<AuditPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub runs: Vec<AuditRun>,
    /// Slopes over the later checkpoints.
    pub d_hat: f64,
    pub h_hat: f64,
    /// Endpoint means divided by `t`.
    pub d_end: f64,
    pub h_end: f64,
    /// 90% quantiles of `|dev| / sqrt(t)` at the endpoint.
    pub c_lr: f64,
    pub c_h: f64,
    /// Quantiles `(q, value)` of the scaled deviations.
    pub lr_quantiles: Vec<(f64, f64)>,
    pub h_quantiles: Vec<(f64, f64)>,
    /// Fraction of usable runs inside both bands.
    pub within_band: f64,
    pub flagged: usize,
    pub tables: usize,
}

/// Run trajectories and record the loop-erased trace length and the
/// negative log weight of the trace at each checkpoint.
pub fn entropy_drift_audit(lift: &LiftedKernel, starts: Option<&[usize]>, cfg: &AuditConfig) -> Result<AuditReport> {
    if cfg.runs == 0 || cfg.checkpoints == 0 {
        return Err(Error::Invalid("audit needs runs and checkpoints".into()));
    }
    let mut cache = WeightCache::new(lift, cfg.r, cfg.l);
    let k = cfg.checkpoints as u64;
    let mut runs = Vec::with_capacity(cfg.runs as usize);
    for run in 0..cfg.runs {
        let mut rng = task_rng(cfg.seed, run);
        let start = match starts {
            Some(s) if !s.is_empty() => s[run as usize % s.len()],
            _ => rng.random_range(0..lift.size()),
        };
        let traj = simulate(lift, start, 0, 2 * cfg.t, &mut rng);
        let lr = traj.lr_path();
        let mut curve = Vec::with_capacity(cfg.checkpoints);
        let mut nice = true;
        for j in 1..=k {
            let tick = 2 * cfg.t * j / k;
            let upto = traj.crossings.partition_point(|c| c.tick <= tick);
            let xi = loop_erase(&lr[..upto], lift);
            let w = cache.path(start, &xi)?;
            nice &= w > 0.0;
            curve.push(AuditPoint { time: tick as f64 / 2.0, xi_len: xi.len(), neg_log_w: -w.ln() });
        }
        let last = *curve.last().expect("checkpoints");
        runs.push(AuditRun { run, start, xi_len: last.xi_len, neg_log_w: last.neg_log_w, nice, curve });
    }
    let good: Vec<&AuditRun> = runs.iter().filter(|r| r.nice).collect();
    let flagged = runs.len() - good.len();
    let from = cfg.checkpoints.div_ceil(4).max(1) - 1;
    let (mut xs, mut ds, mut hs) = (Vec::new(), Vec::new(), Vec::new());
    for r in &good {
        for p in &r.curve[from..] {
            xs.push(p.time);
            ds.push(p.xi_len as f64);
            hs.push(p.neg_log_w);
        }
    }
    let t = cfg.t as f64;
    let slope = |ys: &[f64]| {
        if xs.iter().any(|&x| x != xs[0]) {
            linear_fit(&xs, ys).slope
        } else {
            f64::NAN
        }
    };
    let (d_hat, h_hat) = (slope(&ds), slope(&hs));
    let d_end = mean(&good.iter().map(|r| r.xi_len as f64).collect::<Vec<_>>()) / t;
    let h_end = mean(&good.iter().map(|r| r.neg_log_w).collect::<Vec<_>>()) / t;
    let scale = t.sqrt().max(1.0);
    let dev_lr: Vec<f64> = good.iter().map(|r| (r.xi_len as f64 - d_hat * t) / scale).collect();
    let dev_h: Vec<f64> = good.iter().map(|r| (r.neg_log_w - h_hat * t) / scale).collect();
    let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
    let c_lr = quantile(&abs(&dev_lr), 0.9);
    let c_h = quantile(&abs(&dev_h), 0.9);
    let (b_lr, b_h) = cfg.band.map_or((c_lr, c_h), |c| (c, c));
    let inside = dev_lr.iter().zip(&dev_h).filter(|(a, b)| a.abs() <= b_lr && b.abs() <= b_h).count();
    let qs = [0.05, 0.25, 0.5, 0.75, 0.95];
    Ok(AuditReport {
        config: cfg.clone(),
        d_hat,
        h_hat,
        d_end,
        h_end,
        c_lr,
        c_h,
        lr_quantiles: qs.iter().map(|&q| (q, quantile(&dev_lr, q))).collect(),
        h_quantiles: qs.iter().map(|&q| (q, quantile(&dev_h, q))).collect(),
        within_band: inside as f64 / good.len().max(1) as f64,
        flagged,
        tables: cache.cached(),
        runs,
    })
}

/// A component of the explored covering: the small-range ball around its anchor.
#[derive(Debug, Clone, Serialize)]
pub struct FwdComp {
    /// Arrival state of the parent edge, or the base state.
    pub anchor: usize,
    /// Parent component and departure state.
    pub parent: Option<(usize, usize)>,
    pub depth: usize,
    pub members: Vec<usize>,
    pub children: Vec<usize>,
    pub expanded: bool,
    /// Cumulative weight of the parent edge.
    pub w_hat: Option<f64>,
}

impl FwdComp {
    /// Departure states of edges leading away from the root.
    pub fn exits(&self) -> impl Iterator<Item = usize> + '_ {
        let skip = self.parent.map(|_| self.anchor);
        self.members.iter().copied().filter(move |&z| Some(z) != skip)
    }
}

/// Knobs of the forward exploration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ForwardConfig {
    pub eps: f64,
    pub c_kappa: f64,
    /// Cap on revealed components.
    pub budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ForwardStop {
    /// The initial ball contains a long-range cycle.
    NotTreeLike,
    /// No queued edge qualifies.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// Two newly revealed balls overlap.
    Fresh,
    /// A new ball meets the explored set.
    Explored,
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub comp: usize,
    pub w_hat: f64,
    /// Edges revealed so far, this step included.
    pub kappa: usize,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardNeighbourhood {
    pub x: usize,
    pub l: usize,
    pub w_min: f64,
    pub r: usize,
    pub big_l: usize,
    pub comps: Vec<FwdComp>,
    /// Edges left in the queue, named by their child component.
    pub queue: BTreeSet<usize>,
    pub selected: Vec<Selection>,
    pub kappa: usize,
    /// Accumulated weight of edges that violated the tree structure.
    pub w_process: f64,
    pub w_trace: Vec<f64>,
    pub stop: ForwardStop,
    pub degree: usize,
    pub kappa_bound: f64,
    /// Steps where `w_hat * kappa` exceeded the per-step bound.
    pub step_bound_misses: usize,
    owner: HashMap<usize, usize>,
}

impl ForwardNeighbourhood {
    pub fn owner(&self, state: usize) -> Option<usize> {
        self.owner.get(&state).copied()
    }

    pub fn contains_state(&self, state: usize) -> bool {
        self.owner.contains_key(&state)
    }

    pub fn child_of(&self, c: usize, departure: usize) -> Option<usize> {
        self.comps[c].children.iter().copied().find(|&k| self.comps[k].parent == Some((c, departure)))
    }

    /// Components from depth 1 down to `c`.
    pub fn path_to(&self, c: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = c;
        while let Some((p, _)) = self.comps[cur].parent {
            out.push(cur);
            cur = p;
        }
        out.reverse();
        out
    }

    fn is_ancestor(&self, a: usize, mut c: usize) -> bool {
        loop {
            if a == c {
                return true;
            }
            match self.comps[c].parent {
                Some((p, _)) => c = p,
                None => return false,
            }
        }
    }

    /// Members of components at depth `l`.
    pub fn boundary(&self) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.comps.iter().filter(|c| c.depth == self.l).flat_map(|c| c.members.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// One line per component: id, parent, departure, anchor, depth, w_hat, queued.
    pub fn dump(&self) -> String {
        let mut out = String::from("comp,parent,departure,anchor,depth,w_hat,queued\n");
        for (i, c) in self.comps.iter().enumerate() {
            let (p, d) = c.parent.map_or((String::new(), String::new()), |(p, d)| (p.to_string(), d.to_string()));
            let w = c.w_hat.map_or(String::new(), |w| format!("{w:e}"));
            out.push_str(&format!("{i},{p},{d},{},{},{w},{}\n", c.anchor, c.depth, u8::from(self.queue.contains(&i))));
        }
        out
    }
}

/// Explore the forward neighbourhood of `x`: repeatedly take the queued edge
/// of largest cumulative weight among depths up to `l` with weight at least
/// `w_min`, and reveal the balls `L` levels beyond it.
pub fn explore_forward(
    cache: &mut WeightCache,
    x: usize,
    l: usize,
    w_min: f64,
    cfg: &ForwardConfig,
) -> Result<ForwardNeighbourhood> {
    let lift = cache.lift();
    let (r, big_l) = (cache.r, cache.l);
    let mut balls = SrBalls::new(&lift.second_half, r);
    let mut members = |c: usize| {
        let mut v: Vec<usize> = balls.ball(c).keys().copied().collect();
        v.sort_unstable();
        v
    };
    let degree = kernel_degree(lift);
    let scale = cfg.c_kappa * l.max(1) as f64 * (degree.max(1) as f64).powi((r * big_l) as i32);
    let mut k = ForwardNeighbourhood {
        x,
        l,
        w_min,
        r,
        big_l,
        comps: vec![FwdComp {
            anchor: x,
            parent: None,
            depth: 0,
            members: members(x),
            children: Vec::new(),
            expanded: false,
            w_hat: None,
        }],
        queue: BTreeSet::new(),
        selected: Vec::new(),
        kappa: 0,
        w_process: 0.0,
        w_trace: Vec::new(),
        stop: ForwardStop::Exhausted,
        degree,
        kappa_bound: scale / w_min,
        step_bound_misses: 0,
        owner: HashMap::new(),
    };
    let mut tree_like = true;
    for &z in &k.comps[0].members {
        k.owner.insert(z, 0);
    }
    let mut frontier = vec![0usize];
    for _ in 0..big_l {
        let mut next = Vec::new();
        for c in frontier {
            let exits: Vec<usize> = k.comps[c].exits().collect();
            for z in exits {
                let id = k.comps.len();
                let comp = FwdComp {
                    anchor: lift.eta(z),
                    parent: Some((c, z)),
                    depth: k.comps[c].depth + 1,
                    members: members(lift.eta(z)),
                    children: Vec::new(),
                    expanded: false,
                    w_hat: None,
                };
                for &m in &comp.members {
                    tree_like &= k.owner.insert(m, id).is_none();
                }
                k.comps.push(comp);
                k.comps[c].children.push(id);
                next.push(id);
                k.kappa += 1;
            }
            k.comps[c].expanded = true;
            if k.comps.len() > cfg.budget {
                return Err(Error::Budget(format!("forward exploration exceeds {} components", cfg.budget)));
            }
        }
        frontier = next;
    }
    if !tree_like {
        k.stop = ForwardStop::NotTreeLike;
        return Ok(k);
    }
    let first: Vec<usize> = k.comps[0].children.clone();
    for c in first {
        let (_, z) = k.comps[c].parent.expect("child");
        k.comps[c].w_hat = Some(cache.edge(x, z, WeightMode::Plain)?);
        k.queue.insert(c);
    }
    loop {
        let pick = k
            .queue
            .iter()
            .copied()
            .filter(|&c| k.comps[c].depth <= l && k.comps[c].w_hat.unwrap_or(0.0) >= w_min)
            .max_by(|&a, &b| {
                let (ca, cb) = (&k.comps[a], &k.comps[b]);
                ca.w_hat
                    .partial_cmp(&cb.w_hat)
                    .expect("finite weights")
                    .then(cb.anchor.cmp(&ca.anchor))
                    .then(b.cmp(&a))
            });
        let Some(e) = pick else { break };
        k.queue.remove(&e);
        let w_e = k.comps[e].w_hat.expect("queued edges carry weights");
        let target = k.comps[e].depth + big_l - 1;
        let mut stack = vec![e];
        let mut front = Vec::new();
        while let Some(c) = stack.pop() {
            if k.comps[c].depth == target {
                if !k.comps[c].expanded {
                    front.push(c);
                }
            } else {
                stack.extend(k.comps[c].children.iter().copied());
            }
        }
        front.sort_unstable();
        let mut fresh: Vec<FwdComp> = Vec::new();
        let mut fresh_owner: HashMap<usize, usize> = HashMap::new();
        let mut hit: Vec<usize> = Vec::new();
        let mut violation = None;
        'reveal: for &f in &front {
            let exits: Vec<usize> = k.comps[f].exits().collect();
            for z in exits {
                k.kappa += 1;
                let comp = FwdComp {
                    anchor: lift.eta(z),
                    parent: Some((f, z)),
                    depth: k.comps[f].depth + 1,
                    members: members(lift.eta(z)),
                    children: Vec::new(),
                    expanded: false,
                    w_hat: None,
                };
                for &m in &comp.members {
                    if let Some(&o) = k.owner.get(&m) {
                        hit.push(o);
                    } else if fresh_owner.insert(m, fresh.len()).is_some() {
                        violation.get_or_insert(Violation::Fresh);
                    }
                }
                if !hit.is_empty() {
                    violation = Some(Violation::Explored);
                }
                if violation.is_some() {
                    break 'reveal;
                }
                fresh.push(comp);
            }
        }
        match violation {
            Some(v) => {
                k.w_process += w_e.min(cfg.eps / 2.0);
                if v == Violation::Explored {
                    hit.sort_unstable();
                    hit.dedup();
                    let drop: Vec<usize> = k
                        .queue
                        .iter()
                        .copied()
                        .filter(|&q| hit.iter().any(|&a| k.is_ancestor(q, a) || k.is_ancestor(a, q)))
                        .collect();
                    for q in drop {
                        k.queue.remove(&q);
                    }
                }
            }
            None => {
                for comp in fresh {
                    let id = k.comps.len();
                    let (p, _) = comp.parent.expect("child");
                    for &m in &comp.members {
                        k.owner.insert(m, id);
                    }
                    k.comps[p].children.push(id);
                    k.comps.push(comp);
                }
                for f in front {
                    k.comps[f].expanded = true;
                }
                let anchor = k.comps[e].anchor;
                for c in k.comps[e].children.clone() {
                    let (_, z) = k.comps[c].parent.expect("child");
                    k.comps[c].w_hat = Some(w_e * cache.edge(anchor, z, WeightMode::Conditional)?);
                    k.queue.insert(c);
                }
            }
        }
        k.selected.push(Selection { comp: e, w_hat: w_e, kappa: k.kappa, violation });
        k.w_trace.push(k.w_process);
        if w_e * k.kappa as f64 > scale {
            k.step_bound_misses += 1;
        }
        if k.kappa as f64 > 2.0 * k.kappa_bound {
            return Err(Error::Invalid(format!(
                "forward exploration revealed {} edges, twice the bound {:.3e}",
                k.kappa, k.kappa_bound
            )));
        }
        if k.comps.len() > cfg.budget {
            return Err(Error::Budget(format!("forward exploration exceeds {} components", cfg.budget)));
        }
    }
    Ok(k)
}

/// Backward neighbourhood of `y`: the reverse ball of the lifted kernel
/// intersected with a reverse long-range ball.
#[derive(Debug, Clone, Serialize)]
pub struct BackwardNeighbourhood {
    pub y: usize,
    /// Radius of the reverse ball in time units.
    pub radius: usize,
    pub l3: usize,
    pub big_l: usize,
    pub ball_size: usize,
    /// `sum_{i <= radius} Delta^i` with `Delta` the largest in-degree.
    pub size_bound: f64,
    /// Long-range distance to `y` of every state in the neighbourhood.
    pub dist: BTreeMap<usize, usize>,
    /// States whose shortest long-range path to `y` is unique.
    pub unique: BTreeSet<usize>,
    /// First departure on the unique shortest path.
    pub next_edge: BTreeMap<usize, usize>,
    #[serde(skip)]
    eta: Vec<usize>,
}

impl BackwardNeighbourhood {
    pub fn contains(&self, z: usize, l: usize) -> bool {
        self.dist.get(&z).is_some_and(|&d| d <= l)
    }

    pub fn is_f_prime(&self, z: usize, l: usize) -> bool {
        self.dist.get(&z) == Some(&l) && self.unique.contains(&z)
    }

    pub fn f_prime(&self, l: usize) -> Vec<usize> {
        self.dist.iter().filter(|&(z, &d)| d == l && self.unique.contains(z)).map(|(&z, _)| z).collect()
    }

    /// Departures of the unique shortest path from `z` to `y`.
    pub fn path(&self, z: usize) -> Option<Vec<usize>> {
        if !self.unique.contains(&z) {
            return None;
        }
        let mut out = Vec::new();
        let mut cur = z;
        while let Some(&a) = self.next_edge.get(&cur) {
            out.push(a);
            cur = self.eta[a];
        }
        Some(out)
    }

    /// Edges at long-range distance `L - 1` from the vertices of `F'`.
    pub fn f_edges(&self, l: usize) -> BTreeSet<usize> {
        self.f_prime(l)
            .into_iter()
            .filter_map(|z| self.path(z).and_then(|p| p.get(self.big_l.saturating_sub(1)).copied()))
            .collect()
    }
}

/// Reverse adjacency shared by backward explorations.
pub struct BackwardExplorer<'a> {
    lift: &'a LiftedKernel,
    scp_pred: Vec<Vec<usize>>,
    p_pred: Vec<Vec<usize>>,
    delta: usize,
}

impl<'a> BackwardExplorer<'a> {
    pub fn new(lift: &'a LiftedKernel) -> Self {
        Self {
            lift,
            scp_pred: lift.scp.predecessors(),
            p_pred: lift.second_half.predecessors(),
            delta: lift.scp.max_in_degree(),
        }
    }

    /// Reverse ball of `radius` steps, long-range distances up to `l3`
    /// within it, and uniqueness of shortest long-range paths.
    pub fn explore(&self, y: usize, radius: usize, l3: usize, big_l: usize, budget: usize) -> Result<BackwardNeighbourhood> {
        let lift = self.lift;
        let mut ball: HashMap<usize, usize> = HashMap::from([(y, 0)]);
        let mut q = VecDeque::from([y]);
        while let Some(u) = q.pop_front() {
            let d = ball[&u];
            if d == radius {
                continue;
            }
            for &v in &self.scp_pred[u] {
                if let std::collections::hash_map::Entry::Vacant(e) = ball.entry(v) {
                    e.insert(d + 1);
                    q.push_back(v);
                    if ball.len() > budget {
                        return Err(Error::Budget(format!("backward ball exceeds {budget} states")));
                    }
                }
            }
        }
        let delta = self.delta.max(1) as f64;
        let size_bound = if self.delta <= 1 {
            (radius + 1) as f64
        } else {
            (delta.powi(radius as i32 + 1) - 1.0) / (delta - 1.0)
        };
        let mut dist: HashMap<usize, usize> = HashMap::from([(y, 0)]);
        let mut dq = VecDeque::from([y]);
        while let Some(v) = dq.pop_front() {
            let d = dist[&v];
            for &u in &self.p_pred[v] {
                if ball.contains_key(&u) && dist.get(&u).is_none_or(|&old| old > d) {
                    dist.insert(u, d);
                    dq.push_front(u);
                }
            }
            let u = lift.eta(v);
            if d < l3 && ball.contains_key(&u) && dist.get(&u).is_none_or(|&old| old > d + 1) {
                dist.insert(u, d + 1);
                dq.push_back(u);
            }
        }
        let mut by_level: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&z, &d) in &dist {
            by_level.entry(d).or_default().push(z);
        }
        let mut count: HashMap<usize, u8> = HashMap::new();
        let mut next_edge = BTreeMap::new();
        for (&d, zs) in &by_level {
            let mut zs = zs.clone();
            zs.sort_unstable();
            for z in zs {
                if d == 0 {
                    count.insert(z, 1);
                    continue;
                }
                let mut seen = HashMap::from([(z, ())]);
                let mut q = VecDeque::from([z]);
                let mut total = 0u8;
                let mut last = None;
                while let Some(a) = q.pop_front() {
                    if dist.get(&lift.eta(a)) == Some(&(d - 1)) {
                        total = total.saturating_add(count[&lift.eta(a)]).min(2);
                        last = Some(a);
                    }
                    for &b in lift.second_half.row_cols(a) {
                        if dist.get(&b) == Some(&d) && seen.insert(b, ()).is_none() {
                            q.push_back(b);
                        }
                    }
                }
                count.insert(z, total);
                if total == 1 {
                    next_edge.insert(z, last.expect("one departure"));
                }
            }
        }
        let unique = count.iter().filter(|&(_, &c)| c == 1).map(|(&z, _)| z).collect();
        Ok(BackwardNeighbourhood {
            y,
            radius,
            l3,
            big_l,
            ball_size: ball.len(),
            size_bound,
            dist: dist.into_iter().collect(),
            unique,
            next_edge,
            eta: (0..lift.size()).map(|x| lift.eta(x)).collect(),
        })
    }
}

/// One-off backward exploration.
pub fn explore_backward(
    lift: &LiftedKernel,
    y: usize,
    radius: usize,
    l3: usize,
    big_l: usize,
    budget: usize,
) -> Result<BackwardNeighbourhood> {
    BackwardExplorer::new(lift).explore(y, radius, l3, big_l, budget)
}

/// Constants of the nice-path windows, loaded from the bundled config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiceConstants {
    pub version: u32,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c_h: f64,
    pub c_kappa: f64,
    pub eps: f64,
}

pub const NICE_DEFAULTS: &str = include_str!("../config/nice.toml");

impl NiceConstants {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

impl Default for NiceConstants {
    fn default() -> Self {
        Self::from_toml(NICE_DEFAULTS).expect("bundled constants parse")
    }
}

/// Lengths, weights and windows of the nice-path class.
#[derive(Debug, Clone, Serialize)]
pub struct NicePathConfig {
    /// Backward depth in time units.
    pub s: u64,
    /// Path length in time units.
    pub t: u64,
    pub l1: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub r: usize,
    pub big_l: usize,
    pub m: u64,
    /// Admissible length of the middle piece, in time units.
    pub p2_window: (f64, f64),
    /// Admissible long-range depth of the backward neighbourhood.
    pub l_window: (usize, usize),
    pub constants: NiceConstants,
}

impl NicePathConfig {
    /// Parameters from entropy `h`, drift `d` and degree `delta` at size `n`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: usize, h: f64, d: f64, delta: usize, r: usize, big_l: usize, m: u64, constants: NiceConstants) -> Result<Self> {
        if !(h > 0.0 && d > 0.0) || n < 2 || delta < 2 {
            return Err(Error::Invalid("nice parameters need h, d > 0, n >= 2 and degree >= 2".into()));
        }
        let c = constants;
        let ln = (n as f64).ln();
        let s = ((ln / (10.0 * (delta as f64).ln())).floor()).min((ln / (10.0 * h)).floor()).max(0.0) as u64;
        let t = (ln / h + c.c0 * ln.sqrt()).floor() as u64;
        if s >= t {
            return Err(Error::Invalid(format!("nice parameters need s < t, got s = {s}, t = {t}")));
        }
        let span = (t - s) as f64;
        let l1 = (d * span - c.c4 * (t as f64).sqrt()).round().max(1.0) as usize;
        let w_min = (-h * span - c.c_h * (t as f64).sqrt()).exp();
        let w_max = (-h * t as f64 + c.c1 * (t as f64).sqrt()).exp();
        if w_min >= w_max {
            return Err(Error::Invalid(format!("nice parameters need w_min < w_max, got {w_min:e} >= {w_max:e}")));
        }
        let lo = (d * s as f64 - c.c5 * ln.sqrt()).floor().max(0.0) as usize;
        let hi = (d * s as f64 + c.c5 * ln.sqrt()).ceil() as usize;
        Ok(Self {
            s,
            t,
            l1,
            w_min,
            w_max,
            r,
            big_l,
            m,
            p2_window: (c.c3 * ln.sqrt(), c.c2 * ln.sqrt()),
            l_window: (lo, hi),
            constants,
        })
    }

    pub fn forward(&self, budget: usize) -> ForwardConfig {
        ForwardConfig { eps: self.constants.eps, c_kappa: self.constants.c_kappa, budget }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum NiceReason {
    Gamma,
    /// The first piece leaves the explored set or never reaches depth `l1`.
    NotInK,
    /// The first piece crosses neither a queued edge nor a selected edge at depth `l1`.
    NoE,
    /// The split point is not a long-range arrival in `F'`.
    Split,
    P2Length,
    P2NoRegeneration,
    P2EntersB,
    P3NotInB,
    P3Regeneration,
    Weight,
    /// An exploration ran over budget.
    Budget,
}

#[derive(Debug, Clone, Serialize)]
pub struct NiceVerdict {
    pub nice: bool,
    pub reasons: Vec<NiceReason>,
    /// Twice the backward length parameter, when a split succeeded.
    pub r2: Option<u64>,
    pub l: Option<usize>,
    pub weight: Option<f64>,
}

impl NiceVerdict {
    fn fail(reasons: impl IntoIterator<Item = NiceReason>) -> Self {
        let mut reasons: Vec<NiceReason> = reasons.into_iter().collect();
        reasons.sort_unstable();
        reasons.dedup();
        Self { nice: false, reasons, r2: None, l: None, weight: None }
    }
}

/// Per-trajectory facts shared by every split.
pub struct NiceContext {
    gamma: bool,
    /// Arrival tick at depth `l1` and the weight of the queued edge crossed.
    first: std::result::Result<(u64, f64), NiceReason>,
    regen: Vec<u64>,
    regen_outside: Vec<u64>,
}

impl NiceContext {
    pub fn new(traj: &Trajectory, lift: &LiftedKernel, k: &ForwardNeighbourhood, cfg: &NicePathConfig) -> Self {
        let gamma = gamma_membership(traj, lift, &PathClassConfig { r: cfg.r, l: cfg.big_l, m: cfg.m }).member;
        let first = first_piece(traj, k);
        let marks = regeneration_edges(traj, lift, cfg.big_l, u64::MAX / 4).marks;
        let regen = marks.iter().filter(|m| m.regeneration).map(|m| m.tick).collect();
        let regen_outside =
            marks.iter().filter(|m| m.regeneration && !k.contains_state(m.from)).map(|m| m.tick).collect();
        Self { gamma, first, regen, regen_outside }
    }
}

fn first_piece(traj: &Trajectory, k: &ForwardNeighbourhood) -> std::result::Result<(u64, f64), NiceReason> {
    if k.stop == ForwardStop::NotTreeLike {
        return Err(NiceReason::NotInK);
    }
    let mut c = 0usize;
    let mut next = traj.crossings.iter().peekable();
    for (i, &x) in traj.states.iter().enumerate() {
        let tick = traj.start_tick + i as u64;
        if let Some(cr) = next.next_if(|cr| cr.tick == tick) {
            let comp = &k.comps[c];
            c = match comp.parent {
                Some((p, _)) if comp.anchor == cr.from => p,
                _ => k.child_of(c, cr.from).ok_or(NiceReason::NotInK)?,
            };
        }
        if k.comps[c].members.binary_search(&x).is_err() {
            return Err(NiceReason::NotInK);
        }
        if k.comps[c].depth == k.l {
            let path = k.path_to(c);
            let e = path
                .iter()
                .copied()
                .find(|q| k.queue.contains(q))
                .or_else(|| path.last().copied().filter(|&q| k.selected.iter().any(|s| s.comp == q && s.violation.is_none())))
                .ok_or(NiceReason::NoE)?;
            return Ok((tick, k.comps[e].w_hat.unwrap_or(0.0)));
        }
    }
    Err(NiceReason::NotInK)
}

/// Check one split of a trajectory: backward length `r2 / 2` and depth `l`.
pub fn nice_split(
    traj: &Trajectory,
    ctx: &NiceContext,
    b: &BackwardNeighbourhood,
    r2: u64,
    l: usize,
    cfg: &NicePathConfig,
    cache: &mut WeightCache,
) -> Result<NiceVerdict> {
    if !ctx.gamma {
        return Ok(NiceVerdict::fail([NiceReason::Gamma]));
    }
    let (tau1, w_e) = match ctx.first {
        Ok(v) => v,
        Err(reason) => return Ok(NiceVerdict::fail([reason])),
    };
    let end = traj.end_tick();
    let back = r2 + 2 * cfg.s;
    let Some(split) = end.checked_sub(back).filter(|&k| k > tau1) else {
        return Ok(NiceVerdict::fail([NiceReason::Split]));
    };
    let at = |tick: u64| traj.states[(tick - traj.start_tick) as usize];
    let z = at(split);
    let arrival = traj.crossings.binary_search_by_key(&split, |c| c.tick).is_ok();
    if !arrival || !b.is_f_prime(z, l) {
        return Ok(NiceVerdict::fail([NiceReason::Split]));
    }
    let mut reasons = Vec::new();
    let len2 = (split - tau1) as f64 / 2.0;
    if len2 < cfg.p2_window.0 || len2 > cfg.p2_window.1 {
        reasons.push(NiceReason::P2Length);
    }
    if (tau1..split).any(|tick| b.contains(at(tick), l)) {
        reasons.push(NiceReason::P2EntersB);
    }
    let horizon = tau1 + 2 * cfg.m * cfg.big_l as u64;
    if !ctx.regen_outside.iter().any(|&t| t > tau1 && t <= horizon) {
        reasons.push(NiceReason::P2NoRegeneration);
    }
    if (split..=end).any(|tick| !b.contains(at(tick), l)) {
        reasons.push(NiceReason::P3NotInB);
    }
    if ctx.regen.iter().any(|&t| t > split && t <= split + r2) {
        reasons.push(NiceReason::P3Regeneration);
    }
    let path = b.path(z).expect("F' vertices have unique paths");
    let big_l = cfg.big_l.max(1);
    let w_f = if path.len() >= big_l {
        let lo = big_l;
        let hi = (path.len() + 1).saturating_sub(big_l).max(lo);
        cache.path(cache.lift().eta(path[big_l - 1]), &path[lo..hi])?
    } else {
        1.0
    };
    let weight = w_e * w_f;
    if weight > cfg.w_max {
        reasons.push(NiceReason::Weight);
    }
    let nice = reasons.is_empty();
    Ok(NiceVerdict { nice, reasons, r2: Some(r2), l: Some(l), weight: Some(weight) })
}

/// Membership of one trajectory in the union over backward lengths and depths.
pub fn nice_path_check(
    traj: &Trajectory,
    k: &ForwardNeighbourhood,
    explorer: &BackwardExplorer,
    cfg: &NicePathConfig,
    cache: &mut WeightCache,
    budget: usize,
) -> Result<NiceVerdict> {
    let lift = cache.lift();
    let ctx = NiceContext::new(traj, lift, k, cfg);
    if !ctx.gamma {
        return Ok(NiceVerdict::fail([NiceReason::Gamma]));
    }
    if let Err(reason) = ctx.first {
        return Ok(NiceVerdict::fail([reason]));
    }
    let y = *traj.states.last().expect("nonempty trajectory");
    let (lo, hi) = cfg.l_window;
    let mut reasons = Vec::new();
    let mut r2 = 2 * cfg.big_l as u64 + 1;
    while r2 <= 2 * cfg.m {
        let radius = (r2 + 2 * cfg.s).div_ceil(2) as usize;
        let b = match explorer.explore(y, radius, hi, cfg.big_l, budget) {
            Ok(b) => b,
            Err(e) if e.is_budget() => {
                reasons.push(NiceReason::Budget);
                r2 += 2;
                continue;
            }
            Err(e) => return Err(e),
        };
        for l in lo..=hi {
            let v = nice_split(traj, &ctx, &b, r2, l, cfg, cache)?;
            if v.nice {
                return Ok(v);
            }
            reasons.extend(v.reasons);
        }
        r2 += 2;
    }
    if reasons.is_empty() {
        reasons.push(NiceReason::Split);
    }
    Ok(NiceVerdict::fail(reasons))
}

#[derive(Debug, Clone, Serialize)]
pub struct NiceAuditRun {
    pub run: u64,
    pub start: usize,
    pub verdict: NiceVerdict,
    pub kappa: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NiceAudit {
    pub config: NicePathConfig,
    pub runs: Vec<NiceAuditRun>,
    pub fraction: f64,
    pub reason_counts: BTreeMap<String, usize>,
}

/// Fraction of trajectories of length `t` from uniform starts that are nice.
pub fn nice_audit(cache: &mut WeightCache, cfg: &NicePathConfig, runs: u64, seed: u64, budget: usize) -> Result<NiceAudit> {
    let lift = cache.lift();
    let explorer = BackwardExplorer::new(lift);
    let mut out = Vec::new();
    let mut reason_counts = BTreeMap::new();
    for run in 0..runs {
        let mut rng = task_rng(seed, run);
        let x = rng.random_range(0..lift.size());
        let verdict = match explore_forward(cache, x, cfg.l1, cfg.w_min, &cfg.forward(budget)) {
            Ok(k) => {
                let traj = simulate(lift, x, 0, 2 * cfg.t, &mut rng);
                let v = nice_path_check(&traj, &k, &explorer, cfg, cache, budget)?;
                out.push(NiceAuditRun { run, start: x, verdict: v.clone(), kappa: k.kappa });
                v
            }
            Err(e) if e.is_budget() => {
                let v = NiceVerdict::fail([NiceReason::Budget]);
                out.push(NiceAuditRun { run, start: x, verdict: v.clone(), kappa: 0 });
                v
            }
            Err(e) => return Err(e),
        };
        for r in &verdict.reasons {
            *reason_counts.entry(format!("{r:?}")).or_insert(0) += 1;
        }
    }
    let nice = out.iter().filter(|r| r.verdict.nice).count();
    Ok(NiceAudit { config: cfg.clone(), fraction: nice as f64 / runs.max(1) as f64, runs: out, reason_counts })
}

/// Settings of the regeneration estimate of the stationary law.
#[derive(Debug, Clone, Serialize)]
pub struct PihatConfig {
    pub big_l: usize,
    pub m: u64,
    /// Burn-in in time units.
    pub s0: u64,
    pub samples: u64,
    /// Time units beyond `M` used to decide regenerations.
    pub lookahead: u64,
    /// Time units allowed to reach depth `L`.
    pub max_wait: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PihatEstimate {
    pub config: PihatConfig,
    pub pihat: Vec<f64>,
    /// Mass before normalization.
    pub mass: f64,
    pub tv: f64,
    pub accepted: u64,
    pub attempts: u64,
    pub acceptance: f64,
    pub mean_t1_m: f64,
    /// Law of the starting state.
    pub proxy: String,
}

/// Smallest acceptance rate tolerated by the rejection step.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// Estimate the stationary law from excursions started right after a
/// regeneration: start at `u` after its half step, reject runs that visit
/// `eta(u)` before reaching depth `L`, and count the states at times
/// `r + s0` for `r` below the first regeneration time.
pub fn estimate_pihat(lift: &LiftedKernel, pi: &[f64], cfg: &PihatConfig) -> Result<PihatEstimate> {
    let size = lift.size();
    if pi.len() != size {
        return Err(Error::Dimension { expected: size, found: pi.len() });
    }
    if cfg.m == 0 {
        return Err(Error::Invalid("M = 0 leaves the estimator empty".into()));
    }
    if cfg.samples == 0 || cfg.big_l == 0 {
        return Err(Error::Invalid("need samples > 0 and L >= 1".into()));
    }
    let mut counts = vec![0u64; size];
    let mut t1_sum = 0.0;
    let (mut accepted, mut attempts) = (0u64, 0u64);
    let horizon = 2 * (cfg.s0 + cfg.m).max(cfg.m + cfg.lookahead);
    let max_attempts = ((cfg.samples as f64 / MIN_ACCEPTANCE).ceil() as u64).max(cfg.samples);
    while accepted < cfg.samples {
        if attempts >= max_attempts {
            break;
        }
        let mut rng = task_rng(cfg.seed, attempts);
        attempts += 1;
        let u = rng.random_range(0..size);
        let avoid = lift.eta(u);
        let mut stack = CenterStack::new(u);
        let mut states = vec![u];
        let mut x = u;
        let mut tick = 1u64;
        let mut reached = false;
        let mut ok = true;
        let wait = 2 * cfg.max_wait.max(1) + 1;
        while !reached || tick <= horizon {
            if !reached && tick > wait {
                ok = false;
                break;
            }
            let y = step(lift, x, tick, &mut rng);
            if !reached && y == avoid {
                ok = false;
                break;
            }
            if tick % 2 == 0 && y != x {
                stack.cross(x, lift);
                reached |= stack.depth() >= cfg.big_l;
            }
            tick += 1;
            states.push(y);
            x = y;
        }
        if !ok {
            continue;
        }
        accepted += 1;
        let traj = Trajectory::from_states(1, states, lift);
        let marks = regeneration_edges(&traj, lift, cfg.big_l, cfg.lookahead).marks;
        let t1 = marks.iter().find(|m| m.regeneration).map_or(f64::INFINITY, |m| m.tick as f64 / 2.0);
        t1_sum += t1.min(cfg.m as f64);
        if t1 <= cfg.m as f64 {
            let mut r = 0u64;
            while (r as f64) < t1 {
                let tick = 2 * (r + cfg.s0);
                counts[traj.states[(tick - 1) as usize]] += 1;
                r += 1;
            }
        }
    }
    let acceptance = accepted as f64 / attempts.max(1) as f64;
    if accepted < cfg.samples || acceptance < MIN_ACCEPTANCE {
        return Err(Error::Invalid(format!(
            "rejection acceptance {acceptance:.2e} after {attempts} attempts ({accepted} accepted)"
        )));
    }
    let mean_t1_m = t1_sum / accepted as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64 / (accepted as f64 * mean_t1_m)).collect();
    let mass: f64 = raw.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Invalid("no regeneration before M in any accepted run".into()));
    }
    let pihat: Vec<f64> = raw.iter().map(|v| v / mass).collect();
    let tv = tv_distance(&pihat, pi)?;
    Ok(PihatEstimate {
        config: cfg.clone(),
        pihat,
        mass,
        tv,
        accepted,
        attempts,
        acceptance,
        mean_t1_m,
        proxy: "uniform".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::stationary_direct;
    use crate::model::{build_lifted_kernel, demo_spec, random_spec, Environment};
    use crate::topology::sr_ball;

    fn lift_of(n: usize, seed: u64, demo: bool) -> LiftedKernel {
        let spec = if demo { demo_spec(n).unwrap() } else { random_spec(n, seed) };
        build_lifted_kernel(&spec, &Environment::sample(n, seed)).unwrap()
    }

    /// Tick-by-tick propagation of path mass; the stack is the loop-erased
    /// crossing sequence.
    fn path_sum(lift: &LiftedKernel, q: &WeightQuery) -> BTreeMap<usize, f64> {
        let cond = q.mode == WeightMode::Conditional;
        let avoid = lift.eta(q.x);
        let inside = |c: usize, y: usize| sr_ball(&lift.second_half, c, q.r - 1).contains_key(&y);
        let mut mass: HashMap<(Vec<usize>, usize), f64> = HashMap::from([((Vec::new(), q.x), 1.0)]);
        let mut out = BTreeMap::new();
        let mut tick = u64::from(cond);
        while mass.values().sum::<f64>() > 1e-15 && tick < 100_000 {
            let mut next: HashMap<(Vec<usize>, usize), f64> = HashMap::new();
            for ((stack, s), m) in mass {
                let moves: Vec<(usize, f64)> = if tick % 2 == 0 {
                    vec![(s, lift.stay[s]), (lift.eta(s), 1.0 - lift.stay[s])]
                } else {
                    lift.second_half.row(s).collect()
                };
                for (y, v) in moves {
                    if v == 0.0 || (cond && y == avoid) {
                        continue;
                    }
                    let mut st = stack.clone();
                    if tick % 2 == 0 && y != s {
                        st.push(s);
                        st = loop_erase(&st, lift);
                        if st.len() > stack.len() && st.len() == q.l {
                            *out.entry(st[0]).or_insert(0.0) += m * v;
                            continue;
                        }
                    }
                    let c = st.last().map_or(q.x, |&a| lift.eta(a));
                    if inside(c, y) {
                        *next.entry((st, y)).or_insert(0.0) += m * v;
                    }
                }
            }
            mass = next;
            tick += 1;
        }
        out
    }

    #[test]
    fn exact_weights_match_path_sums() {
        for (n, seed, demo) in [(6, 1, false), (12, 2, true), (8, 3, false)] {
            let lift = lift_of(n, seed, demo);
            for x in [0, n + 1] {
                for mode in [WeightMode::Plain, WeightMode::Conditional] {
                    let q = WeightQuery { x, r: 2, l: 2, mode };
                    let t = exact_weights(&lift, &q, WEIGHT_BUDGET).unwrap();
                    let oracle = path_sum(&lift, &q);
                    for (e, v) in &oracle {
                        assert!((t.raw.get(e).copied().unwrap_or(0.0) - v).abs() < 1e-10, "{n} {x} {mode:?} {e}");
                    }
                    assert_eq!(t.raw.len(), oracle.len());
                    assert!(t.sum() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn monte_carlo_agrees_with_exact_weights() {
        let lift = lift_of(12, 4, true);
        let mut rng = task_rng(9, 0);
        for mode in [WeightMode::Plain, WeightMode::Conditional] {
            let q = WeightQuery { x: 3, r: 2, l: 3, mode };
            let exact = exact_weights(&lift, &q, WEIGHT_BUDGET).unwrap();
            let mc = finite_weight(&lift, &q, 20_000, 100_000, 100_000, &mut rng).unwrap();
            assert_eq!(mc.truncated, 0);
            for (e, p) in &mc.first {
                assert!((p.estimate - exact.get(*e)).abs() <= 4.0 * p.sigma + 1e-9, "{mode:?} {e}");
            }
            let (s, sigma) = mc.sum();
            assert!(s <= 1.0 + 3.0 * sigma);
        }
    }

    #[test]
    fn unreachable_edges_weigh_nothing() {
        let lift = lift_of(12, 5, true);
        let q = WeightQuery { x: 0, r: 1, l: 1, mode: WeightMode::Plain };
        let t = exact_weights(&lift, &q, WEIGHT_BUDGET).unwrap();
        // With r = 1 only the base state itself can be left.
        assert_eq!(t.raw.keys().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(t.get(5), 0.0);
        assert!(exact_weights(&lift, &WeightQuery { r: 0, ..q }, 10).is_err());
    }

    #[test]
    fn conditional_without_acceptance_is_an_error() {
        let spec = demo_spec(6).unwrap();
        let spec = crate::model::MixtureSpec::new(spec.p1.clone(), spec.p2.clone(), crate::model::PTable::Constant(1.0), 0.5, 3)
            .unwrap();
        let lift = build_lifted_kernel(&spec, &Environment::sample(6, 0)).unwrap();
        // Side-two states always jump back, so a side-one start never gets deeper than one level.
        let q = WeightQuery { x: 0, r: 2, l: 2, mode: WeightMode::Conditional };
        let mut rng = task_rng(1, 0);
        assert!(finite_weight(&lift, &q, 200, 10_000, 10_000, &mut rng).is_err());
        assert_eq!(exact_weights(&lift, &q, WEIGHT_BUDGET).unwrap().sum(), 0.0);
    }

    #[test]
    fn audit_at_time_zero_is_trivial() {
        let lift = lift_of(12, 0, true);
        let cfg = AuditConfig { t: 0, r: 2, l: 2, runs: 5, checkpoints: 4, band: None, seed: 1 };
        let rep = entropy_drift_audit(&lift, None, &cfg).unwrap();
        for r in &rep.runs {
            assert_eq!(r.xi_len, 0);
            assert_eq!(r.neg_log_w, 0.0);
        }
    }

    #[test]
    fn audit_rates_are_positive_on_the_demo() {
        let lift = lift_of(600, 0, true);
        let cfg = AuditConfig { t: 60, r: 2, l: 2, runs: 40, checkpoints: 8, band: None, seed: 3 };
        let rep = entropy_drift_audit(&lift, None, &cfg).unwrap();
        assert!(rep.d_hat > 0.0 && rep.h_hat > 0.0, "{} {}", rep.d_hat, rep.h_hat);
        assert!(rep.within_band >= 0.8);
    }

    fn fwd() -> ForwardConfig {
        ForwardConfig { eps: 0.2, c_kappa: 1.0, budget: 1_000_000 }
    }

    #[test]
    fn high_threshold_keeps_the_initial_ball() {
        let lift = lift_of(600, 1, true);
        let mut cache = WeightCache::new(&lift, 2, 2);
        let k = explore_forward(&mut cache, 5, 6, 1.5, &fwd()).unwrap();
        assert!(k.selected.is_empty());
        assert_eq!(k.stop, ForwardStop::Exhausted);
        assert!(k.comps.iter().all(|c| c.depth <= 2));
    }

    #[test]
    fn forward_exploration_respects_its_bounds() {
        let lift = lift_of(3000, 2, true);
        let mut cache = WeightCache::new(&lift, 2, 2);
        for x in [0, 17, 3001] {
            let k = explore_forward(&mut cache, x, 8, 1e-3, &fwd()).unwrap();
            assert!(k.kappa as f64 <= k.kappa_bound);
            assert_eq!(k.step_bound_misses, 0);
            let clean: Vec<f64> = k.selected.iter().map(|s| s.w_hat).collect();
            assert!(clean.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            let mut seen = HashMap::new();
            for (i, c) in k.comps.iter().enumerate() {
                for &m in &c.members {
                    assert!(seen.insert(m, i).is_none(), "state {m} revealed twice");
                }
            }
            assert!(k.w_trace.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    /// Reverse reachability and long-range distances from dense matrices.
    fn dense_backward(lift: &LiftedKernel, y: usize, radius: usize, l3: usize) -> BTreeMap<usize, usize> {
        let n = lift.size();
        let k = lift.scp.to_dense();
        let p = lift.second_half.to_dense();
        let mut reach = vec![false; n];
        reach[y] = true;
        for _ in 0..radius {
            let prev = reach.clone();
            for a in 0..n {
                if (0..n).any(|b| prev[b] && k[a][b] > 0.0) {
                    reach[a] = true;
                }
            }
        }
        let inf = usize::MAX;
        let mut d = vec![inf; n];
        d[y] = 0;
        loop {
            let mut changed = false;
            for a in (0..n).filter(|&a| reach[a]) {
                let mut best = d[a];
                for b in 0..n {
                    if reach[b] && p[a][b] > 0.0 && d[b] < best {
                        best = d[b];
                    }
                }
                let e = lift.eta(a);
                if reach[e] && d[e] != inf && d[e] < l3 && d[e] + 1 < best {
                    best = d[e] + 1;
                }
                if best < d[a] {
                    d[a] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        (0..n).filter(|&a| d[a] != inf).map(|a| (a, d[a])).collect()
    }

    #[test]
    fn backward_matches_dense_oracle() {
        for seed in 0..4 {
            let lift = lift_of(24, seed, seed % 2 == 0);
            for y in [0, 7, 30] {
                for (radius, l3) in [(2, 1), (4, 2), (6, 3)] {
                    let b = explore_backward(&lift, y, radius, l3, 2, 10_000).unwrap();
                    assert_eq!(b.dist, dense_backward(&lift, y, radius, l3));
                    assert!(b.ball_size as f64 <= b.size_bound);
                    for z in b.f_prime(l3) {
                        let path = b.path(z).unwrap();
                        assert_eq!(path.len(), l3);
                        let mut cur = z;
                        for &a in &path {
                            assert_eq!(b.dist[&a], b.dist[&cur]);
                            cur = lift.eta(a);
                        }
                        assert_eq!(b.dist[&cur], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_depth_backward_stays_small_range() {
        let lift = lift_of(24, 1, true);
        let b = explore_backward(&lift, 4, 5, 0, 1, 10_000).unwrap();
        assert!(b.dist.values().all(|&d| d == 0));
        let pred = lift.second_half.predecessors();
        let mut closure = BTreeSet::from([4usize]);
        let mut q = vec![4usize];
        while let Some(v) = q.pop() {
            for &u in &pred[v] {
                if closure.insert(u) {
                    q.push(u);
                }
            }
        }
        assert!(b.dist.keys().all(|z| closure.contains(z)));
    }

    #[test]
    fn nice_defaults_parse() {
        let c = NiceConstants::default();
        assert_eq!(c.version, 1);
        assert!(NiceConstants::from_toml("c0 = 1").is_err());
        let cfg = NicePathConfig::new(4096, 0.05, 0.1, 4, 2, 2, 6, c).unwrap();
        assert!(cfg.s < cfg.t && cfg.w_min < cfg.w_max);
        assert!(NicePathConfig::new(4096, 0.0, 0.1, 4, 2, 2, 6, c).is_err());
    }

    fn toy_config(lift: &LiftedKernel) -> NicePathConfig {
        let _ = lift;
        NicePathConfig {
            s: 1,
            t: 80,
            l1: 2,
            w_min: 1e-6,
            w_max: 1.0,
            r: 2,
            big_l: 4,
            m: 40,
            p2_window: (0.0, 80.0),
            l_window: (1, 4),
            constants: NiceConstants::default(),
        }
    }

    #[test]
    fn gamma_failures_are_reported() {
        let lift = lift_of(300, 0, true);
        let mut cfg = toy_config(&lift);
        cfg.m = 1;
        cfg.big_l = 6;
        let mut cache = WeightCache::new(&lift, cfg.r, cfg.big_l);
        let k = explore_forward(&mut cache, 0, cfg.l1, cfg.w_min, &cfg.forward(100_000)).unwrap();
        let traj = simulate(&lift, 0, 0, 2 * cfg.t, &mut task_rng(0, 0));
        let v = nice_path_check(&traj, &k, &BackwardExplorer::new(&lift), &cfg, &mut cache, 100_000).unwrap();
        assert!(!v.nice);
        assert_eq!(v.reasons, vec![NiceReason::Gamma]);
    }

    #[test]
    fn some_toy_paths_are_nice_and_checks_are_monotone() {
        let lift = lift_of(3000, 0, true);
        let cfg = toy_config(&lift);
        let mut cache = WeightCache::new(&lift, cfg.r, cfg.big_l);
        let explorer = BackwardExplorer::new(&lift);
        let mut found = 0;
        for seed in 0..60 {
            let mut rng = task_rng(seed, 0);
            let x = rng.random_range(0..lift.size());
            let k = explore_forward(&mut cache, x, cfg.l1, cfg.w_min, &cfg.forward(100_000)).unwrap();
            let traj = simulate(&lift, x, 0, 2 * cfg.t, &mut rng);
            let v = nice_path_check(&traj, &k, &explorer, &cfg, &mut cache, 100_000).unwrap();
            let mut wide = cfg.clone();
            wide.w_max = 2.0;
            wide.p2_window = (0.0, 160.0);
            let w = nice_path_check(&traj, &k, &explorer, &wide, &mut cache, 100_000).unwrap();
            assert!(!v.nice || w.nice);
            if v.nice {
                found += 1;
                assert!(v.weight.unwrap() <= cfg.w_max);
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn pihat_rejects_empty_horizon() {
        let lift = lift_of(12, 0, true);
        let pi = vec![1.0 / 24.0; 24];
        let cfg = PihatConfig { big_l: 2, m: 0, s0: 5, samples: 10, lookahead: 10, max_wait: 50, seed: 0 };
        assert!(estimate_pihat(&lift, &pi, &cfg).is_err());
    }

    #[test]
    fn pihat_is_close_on_a_small_demo() {
        let lift = lift_of(300, 1, true);
        let pi = stationary_direct(&lift.scp).unwrap();
        let cfg = PihatConfig { big_l: 2, m: 20, s0: 60, samples: 20_000, lookahead: 20, max_wait: 200, seed: 4 };
        let est = estimate_pihat(&lift, &pi, &cfg).unwrap();
        assert!((est.pihat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((est.mass - 1.0).abs() < 0.1, "mass {}", est.mass);
        assert!(est.tv < 0.35, "tv {}", est.tv);
        assert_eq!(est.proxy, "uniform");
    }
}
