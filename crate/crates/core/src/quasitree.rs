//! The random matching tree generated on demand, a walker on it, its
//! coupling with the finite chain, escape probabilities, regeneration
//! records, renewal statistics, and drift and entropy estimates.
//!
//! A component is the forward reachable set of its center type. The root
//! component has no center: every vertex in it hangs a child. A vertex is a
//! pair `(component, type)`.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::sample_row;
use crate::model::{MixtureSpec, Side};
use crate::rng::{child_key, mix64, task_rng};
use crate::stats::{linear_fit, mean, variance, LinearFit, Proportion};
use crate::topology::SrBalls;

/// `(component index, type)`.
pub type Vertex = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Comp {
    /// Type of the center; `None` for the root component.
    pub center: Option<usize>,
    /// Parent component and the departure type in it.
    pub parent: Option<(usize, usize)>,
    pub depth: usize,
    pub key: u64,
}

/// Path label: departure types from the root, then the type of the vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct UlamLabel {
    pub prefix: Vec<usize>,
    pub tip: usize,
}

/// Infinite random tree of components, materialized lazily and memoized.
#[derive(Debug, Clone)]
pub struct LazyQuasiTree<'a> {
    spec: &'a MixtureSpec,
    seed: u64,
    root_type: usize,
    comps: Vec<Comp>,
    memo: HashMap<Vertex, usize>,
    /// Candidate center types for children hanging from side one and side two.
    candidates: [Vec<usize>; 2],
    members: HashMap<usize, Vec<usize>>,
}

impl<'a> LazyQuasiTree<'a> {
    /// Centers drawn uniformly from the opposite side.
    pub fn new(spec: &'a MixtureSpec, root_type: usize, seed: u64) -> Self {
        let n = spec.n;
        Self::with_candidates(spec, root_type, seed, [(n..2 * n).collect(), (0..n).collect()])
    }

    /// Centers for children of side-one vertices drawn from `candidates[0]`,
    /// and for side-two vertices from `candidates[1]`.
    pub fn with_candidates(spec: &'a MixtureSpec, root_type: usize, seed: u64, candidates: [Vec<usize>; 2]) -> Self {
        assert!(!candidates[0].is_empty() && !candidates[1].is_empty());
        let root = Comp { center: None, parent: None, depth: 0, key: mix64(root_type as u64) };
        Self { spec, seed, root_type, comps: vec![root], memo: HashMap::new(), candidates, members: HashMap::new() }
    }

    pub fn spec(&self) -> &'a MixtureSpec {
        self.spec
    }

    pub fn root(&self) -> Vertex {
        (0, self.root_type)
    }

    pub fn comps(&self) -> &[Comp] {
        &self.comps
    }

    pub fn comp(&self, c: usize) -> &Comp {
        &self.comps[c]
    }

    pub fn is_center(&self, (c, t): Vertex) -> bool {
        self.comps[c].center == Some(t)
    }

    /// The child component hanging at a non-center vertex, created on demand.
    pub fn child(&mut self, (c, t): Vertex) -> usize {
        debug_assert!(!self.is_center((c, t)));
        if let Some(&k) = self.memo.get(&(c, t)) {
            return k;
        }
        let key = child_key(self.comps[c].key, t as u64);
        let mut rng = task_rng(self.seed, key);
        let side = usize::from(self.spec.side(t) == Side::Two);
        let center = *self.candidates[side].choose(&mut rng).expect("candidates");
        let id = self.comps.len();
        self.comps.push(Comp { center: Some(center), parent: Some((c, t)), depth: self.comps[c].depth + 1, key });
        self.memo.insert((c, t), id);
        id
    }

    /// The matched vertex across the long-range edge.
    pub fn partner(&mut self, v: Vertex) -> Vertex {
        if self.is_center(v) {
            self.comps[v.0].parent.expect("centers have parents")
        } else {
            let k = self.child(v);
            (k, self.comps[k].center.expect("child center"))
        }
    }

    /// Child already materialized at a vertex, if any.
    pub fn existing_child(&self, v: Vertex) -> Option<usize> {
        self.memo.get(&v).copied()
    }

    /// Types in a component: the forward reachable set of its anchor type.
    pub fn members(&mut self, c: usize) -> Vec<usize> {
        let anchor = self.comps[c].center.unwrap_or(self.root_type);
        let spec = self.spec;
        self.members.entry(anchor).or_insert_with(|| spec.reach(anchor)).clone()
    }

    pub fn label(&self, (c, t): Vertex) -> UlamLabel {
        let mut prefix = Vec::new();
        let mut cur = c;
        while let Some((p, d)) = self.comps[cur].parent {
            prefix.push(d);
            cur = p;
        }
        prefix.reverse();
        UlamLabel { prefix, tip: t }
    }

    /// Ancestor of `c` at depth `d <= depth(c)`.
    pub fn ancestor(&self, mut c: usize, d: usize) -> usize {
        while self.comps[c].depth > d {
            c = self.comps[c].parent.expect("non-root").0;
        }
        c
    }

    /// Materialize every component up to depth `d`.
    pub fn materialize_to_depth(&mut self, d: usize) {
        let mut frontier = vec![0usize];
        for _ in 0..d {
            let mut next = Vec::new();
            for c in frontier {
                for t in self.members(c) {
                    if !self.is_center((c, t)) {
                        next.push(self.child((c, t)));
                    }
                }
            }
            frontier = next;
        }
    }
}

/// Walker position and clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Walker {
    pub v: Vertex,
    pub tick: u64,
}

/// What a step did to the long-range position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Stay,
    /// Crossed into the child component hanging at the departure vertex.
    Down { from: Vertex, into: usize },
    /// Crossed back to the parent component.
    Up { from: usize },
}

/// One tick on the tree: even ticks take the matching half step, odd ticks a `P` step.
pub fn qt_step<R: Rng + ?Sized>(tree: &mut LazyQuasiTree<'_>, w: &mut Walker, rng: &mut R) -> Move {
    let u: f64 = rng.random();
    let mv = if w.tick % 2 == 0 {
        let partner = tree.partner(w.v);
        let stay = tree.spec.p(w.v.1, partner.1);
        if u < stay {
            Move::Stay
        } else if tree.is_center(w.v) {
            let from = w.v.0;
            w.v = partner;
            Move::Up { from }
        } else {
            let from = w.v;
            w.v = partner;
            Move::Down { from, into: partner.0 }
        }
    } else {
        let p = tree.spec.kernel();
        w.v.1 = sample_row(p.row_cols(w.v.1), p.row_vals(w.v.1), u);
        Move::Stay
    };
    w.tick += 1;
    mv
}

/// Estimate of the probability of jumping from the root at time 0 and not
/// crossing back within `horizon` time units.
pub fn estimate_escape_probability<R: Rng + ?Sized>(tree: &mut LazyQuasiTree<'_>, horizon: u64, trials: u64, rng: &mut R) -> Result<Proportion> {
    if trials == 0 {
        return Err(Error::Invalid("escape estimate needs at least one trial".into()));
    }
    let mut hits = 0;
    for _ in 0..trials {
        let mut w = Walker { v: tree.root(), tick: 0 };
        if !matches!(qt_step(tree, &mut w, rng), Move::Down { .. }) {
            continue;
        }
        let mut escaped = true;
        while w.tick < 2 * horizon {
            if let Move::Up { .. } = qt_step(tree, &mut w, rng) {
                if w.v.0 == 0 {
                    escaped = false;
                    break;
                }
            }
        }
        hits += u64::from(escaped);
    }
    Ok(Proportion::new(hits, trials))
}

/// A long-range edge crossed exactly once in the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegenerationRecord {
    pub k: usize,
    /// Type left by the crossing.
    pub y: usize,
    /// Time of arrival (tick / 2).
    pub t: f64,
    pub tick: u64,
    /// Long-range distance from the root after the crossing.
    pub l: usize,
    /// Component entered.
    pub comp: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegenRun {
    pub records: Vec<RegenerationRecord>,
    /// Long-range distance at time `t_max`.
    pub depth_at_t_max: usize,
    pub t_max: u64,
    pub lookahead: u64,
    pub empty: bool,
}

/// Walk from the root to `t_max + w` and keep the edges crossed exactly once
/// whose crossing happens by `t_max`.
pub fn run_regenerations<R: Rng + ?Sized>(tree: &mut LazyQuasiTree<'_>, t_max: u64, w: u64, rng: &mut R) -> RegenRun {
    let mut walker = Walker { v: tree.root(), tick: 0 };
    let mut count: HashMap<usize, (u32, u64, usize)> = HashMap::new();
    let mut depth_at_t_max = 0;
    while walker.tick < 2 * (t_max + w) {
        match qt_step(tree, &mut walker, rng) {
            Move::Down { from, into } => {
                let e = count.entry(into).or_insert((0, walker.tick, from.1));
                e.0 += 1;
            }
            Move::Up { from } => {
                count.get_mut(&from).expect("entered before").0 += 1;
            }
            Move::Stay => {}
        }
        if walker.tick == 2 * t_max {
            depth_at_t_max = tree.comp(walker.v.0).depth;
        }
    }
    let mut once: Vec<(u64, usize, usize)> = count
        .into_iter()
        .filter(|&(_, (c, tick, _))| c == 1 && tick <= 2 * t_max)
        .map(|(comp, (_, tick, y))| (tick, comp, y))
        .collect();
    once.sort_unstable();
    let records: Vec<RegenerationRecord> = once
        .into_iter()
        .enumerate()
        .map(|(k, (tick, comp, y))| RegenerationRecord { k: k + 1, y, t: tick as f64 / 2.0, tick, l: tree.comp(comp).depth, comp })
        .collect();
    let empty = records.is_empty();
    RegenRun { records, depth_at_t_max, t_max, lookahead: w, empty }
}

/// Fit of `P(X > m) ~ exp(-c m^alpha)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailFit {
    pub alpha: f64,
    pub c: f64,
    pub r2: f64,
    pub points: usize,
}

/// Regress `log(-log S(m))` on `log m` over the empirical survival of `xs`,
/// using `m` with at least `min_tail` samples beyond it.
pub fn stretched_exp_fit(xs: &[f64], min_tail: usize) -> Option<TailFit> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let m = v[i];
        let mut j = i;
        while j < v.len() && v[j] == m {
            j += 1;
        }
        let beyond = v.len() - j;
        if beyond < min_tail {
            break;
        }
        let s = beyond as f64 / n;
        if m > 0.0 && s < 1.0 {
            lx.push(m.ln());
            ly.push((-s.ln()).ln());
        }
        i = j;
    }
    if lx.len() < 3 {
        return None;
    }
    let f = linear_fit(&lx, &ly);
    Some(TailFit { alpha: f.slope, c: f.intercept.exp(), r2: f.r2, points: lx.len() })
}

/// Fit of `log P(X > m)` against `m`.
pub fn exponential_tail_fit(xs: &[f64], min_tail: usize) -> Option<LinearFit> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let (mut mx, mut my) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < v.len() {
        let m = v[i];
        let mut j = i;
        while j < v.len() && v[j] == m {
            j += 1;
        }
        let beyond = v.len() - j;
        if beyond < min_tail {
            break;
        }
        mx.push(m);
        my.push((beyond as f64 / n).ln());
        i = j;
    }
    (mx.len() >= 3).then(|| linear_fit(&mx, &my))
}

#[derive(Debug, Clone, Serialize)]
pub struct RenewalReport {
    pub runs: usize,
    pub records: usize,
    /// Mean of `T_{k+1} - T_k`.
    pub mean_increment: f64,
    /// `N_t / t` averaged over runs, at `t_probe`.
    pub t_probe: f64,
    pub rate: f64,
    /// `rate * mean_increment`, 1 under the renewal theorem.
    pub rate_ratio: f64,
    /// `(k, Var(T_k) / k)` over runs that reached `k`.
    pub var_over_k: Vec<(usize, f64)>,
    /// Largest over smallest `Var(T_k) / k`.
    pub var_flatness: f64,
    pub t_tail: Option<TailFit>,
    pub l_tail: Option<LinearFit>,
    /// Types with at least `min_hits` regeneration hits.
    pub y_types: usize,
    /// `max / min` empirical frequency over those types.
    pub y_spread: f64,
    /// Empirical kernel of consecutive regeneration types.
    pub q_transitions: usize,
    pub q_min_times_n: f64,
    pub q_max_times_n: f64,
}

/// Renewal diagnostics across independent runs.
pub fn renewal_statistics(runs: &[Vec<RegenerationRecord>], t_probe: f64, k_grid: &[usize], state_count: usize, min_hits: usize) -> Result<RenewalReport> {
    let total: usize = runs.iter().map(|r| r.len()).sum();
    if total < 100 {
        return Err(Error::Invalid(format!("renewal statistics need at least 100 records, got {total}")));
    }
    let mut inc = Vec::new();
    let mut linc = Vec::new();
    for r in runs {
        for w in r.windows(2) {
            inc.push(w[1].t - w[0].t);
            linc.push((w[1].l - w[0].l) as f64);
        }
    }
    let mean_increment = mean(&inc);
    let rates: Vec<f64> = runs.iter().map(|r| r.iter().filter(|x| x.t <= t_probe).count() as f64 / t_probe).collect();
    let rate = mean(&rates);
    let mut var_over_k = Vec::new();
    for &k in k_grid {
        let tk: Vec<f64> = runs.iter().filter(|r| r.len() >= k).map(|r| r[k - 1].t).collect();
        if tk.len() >= 2 {
            var_over_k.push((k, variance(&tk) / k as f64));
        }
    }
    let vmax = var_over_k.iter().map(|x| x.1).fold(f64::MIN, f64::max);
    let vmin = var_over_k.iter().map(|x| x.1).fold(f64::MAX, f64::min);
    let mut hits: HashMap<usize, usize> = HashMap::new();
    let mut trans: HashMap<(usize, usize), usize> = HashMap::new();
    let mut from_count: HashMap<usize, usize> = HashMap::new();
    for r in runs {
        for x in r {
            *hits.entry(x.y).or_default() += 1;
        }
        for w in r.windows(2) {
            *trans.entry((w[0].y, w[1].y)).or_default() += 1;
            *from_count.entry(w[0].y).or_default() += 1;
        }
    }
    let freq: Vec<f64> = hits.values().filter(|&&h| h >= min_hits).map(|&h| h as f64).collect();
    let y_spread = if freq.is_empty() {
        f64::NAN
    } else {
        freq.iter().copied().fold(f64::MIN, f64::max) / freq.iter().copied().fold(f64::MAX, f64::min)
    };
    let q: Vec<f64> = trans
        .iter()
        .filter(|((u, _), _)| from_count[u] >= min_hits)
        .map(|((u, _), &c)| c as f64 / from_count[u] as f64 * state_count as f64)
        .collect();
    Ok(RenewalReport {
        runs: runs.len(),
        records: total,
        mean_increment,
        t_probe,
        rate,
        rate_ratio: rate * mean_increment,
        var_over_k,
        var_flatness: vmax / vmin,
        t_tail: stretched_exp_fit(&inc, 20),
        l_tail: exponential_tail_fit(&linc, 20),
        y_types: freq.len(),
        y_spread,
        q_transitions: q.len(),
        q_min_times_n: q.iter().copied().fold(f64::INFINITY, f64::min),
        q_max_times_n: q.iter().copied().fold(0.0, f64::max),
    })
}

/// Settings for the drift and entropy estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EntropyConfig {
    pub runs: u64,
    pub t_max: u64,
    pub lookahead: u64,
    /// Walkers relaunched per edge.
    pub n_inner: u64,
    /// Levels below the launch component at which the first edge is read off.
    pub depth_horizon: usize,
    /// Tick cap per relaunched walker.
    pub max_ticks: u64,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { runs: 4, t_max: 2000, lookahead: 200, n_inner: 1000, depth_horizon: 6, max_ticks: 20_000, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftEntropyEstimate {
    pub d_hat: f64,
    pub d_direct: f64,
    pub h_prime_hat: f64,
    pub h_hat: f64,
    pub mean_increment: f64,
    pub d_ci: (f64, f64),
    pub h_ci: (f64, f64),
    pub runs_used: usize,
    pub runs_discarded: usize,
    pub factors: usize,
    pub config: EntropyConfig,
}

/// Per-run sums for the ratio estimators.
#[derive(Debug, Clone, Copy)]
struct RunSums {
    log_w: f64,
    t: f64,
    l: f64,
    regs: f64,
}

/// Probability that the loop-erased trace of a walker launched from
/// `launch` first leaves through the child `target`, given that it does not
/// cross back out of `launch`.
pub fn edge_factor<R: Rng + ?Sized>(
    tree: &mut LazyQuasiTree<'_>,
    launch: Walker,
    target: usize,
    cfg: &EntropyConfig,
    rng: &mut R,
) -> (u64, u64) {
    let base = tree.comp(launch.v.0).depth;
    let (mut hits, mut accepted) = (0, 0);
    for _ in 0..cfg.n_inner {
        let mut w = launch;
        loop {
            if w.tick - launch.tick > cfg.max_ticks {
                break;
            }
            qt_step(tree, &mut w, rng);
            let d = tree.comp(w.v.0).depth;
            if d < base {
                break;
            }
            if d >= base + cfg.depth_horizon {
                accepted += 1;
                hits += u64::from(tree.ancestor(w.v.0, base + 1) == target);
                break;
            }
        }
    }
    (hits, accepted)
}

/// Number of vertices in a component that hang a child.
fn forward_edges(tree: &mut LazyQuasiTree<'_>, c: usize) -> usize {
    let centered = usize::from(tree.comp(c).center.is_some());
    tree.members(c).len() - centered
}

/// Drift and entropy rate from regeneration runs on independent trees.
pub fn estimate_drift_entropy(spec: &MixtureSpec, cfg: &EntropyConfig) -> Result<DriftEntropyEstimate> {
    if cfg.runs == 0 {
        return Err(Error::Invalid("at least one run".into()));
    }
    let mut sums = Vec::new();
    let mut discarded = 0;
    let mut factors = 0;
    let mut direct = Vec::new();
    for run in 0..cfg.runs {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(run);
        let mut rng = task_rng(seed, 7);
        let root = rng.random_range(0..spec.size());
        let mut tree = LazyQuasiTree::new(spec, root, seed);
        let reg = run_regenerations(&mut tree, cfg.t_max, cfg.lookahead, &mut rng);
        direct.push(reg.depth_at_t_max as f64 / cfg.t_max as f64);
        let Some(last) = reg.records.last().copied() else {
            discarded += 1;
            continue;
        };
        let mut chain = Vec::new();
        let mut c = last.comp;
        while c != 0 {
            chain.push(c);
            c = tree.comp(c).parent.expect("non-root").0;
        }
        chain.reverse();
        let mut log_w = 0.0;
        let mut ok = true;
        for (i, &target) in chain.iter().enumerate() {
            let from = if i == 0 { 0 } else { chain[i - 1] };
            if forward_edges(&mut tree, from) == 1 {
                continue;
            }
            let launch = if i == 0 {
                Walker { v: tree.root(), tick: 0 }
            } else {
                Walker { v: (from, tree.comp(from).center.expect("center")), tick: 1 }
            };
            let (hits, accepted) = edge_factor(&mut tree, launch, target, cfg, &mut rng);
            factors += 1;
            if hits == 0 || accepted == 0 {
                ok = false;
                break;
            }
            log_w -= (hits as f64 / accepted as f64).ln();
        }
        if !ok {
            discarded += 1;
            continue;
        }
        sums.push(RunSums { log_w, t: last.t, l: last.l as f64, regs: reg.records.len() as f64 });
    }
    if sums.is_empty() {
        return Err(Error::Invalid("every run was discarded".into()));
    }
    let ratio = |s: &[RunSums], f: fn(&RunSums) -> f64| s.iter().map(f).sum::<f64>() / s.iter().map(|x| x.t).sum::<f64>();
    let d_hat = ratio(&sums, |x| x.l);
    let h_hat = ratio(&sums, |x| x.log_w);
    let regs: f64 = sums.iter().map(|x| x.regs).sum();
    let mean_increment = sums.iter().map(|x| x.t).sum::<f64>() / regs;
    let h_prime_hat = h_hat * mean_increment;
    let mut brng = task_rng(cfg.seed, 99);
    let (mut bd, mut bh) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let sample: Vec<RunSums> = (0..sums.len()).map(|_| sums[brng.random_range(0..sums.len())]).collect();
        bd.push(ratio(&sample, |x| x.l));
        bh.push(ratio(&sample, |x| x.log_w));
    }
    use crate::stats::quantile;
    Ok(DriftEntropyEstimate {
        d_hat,
        d_direct: mean(&direct),
        h_prime_hat,
        h_hat,
        mean_increment,
        d_ci: (quantile(&bd, 0.025), quantile(&bd, 0.975)),
        h_ci: (quantile(&bh, 0.025), quantile(&bh, 0.975)),
        runs_used: sums.len(),
        runs_discarded: discarded,
        factors,
        config: *cfg,
    })
}

/// Result of one coupled run.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingRun {
    /// Time of the first rejected draw, `None` when censored at `t_max`.
    pub t_coup: Option<f64>,
    /// Matchings revealed on the finite side.
    pub revealed: usize,
    /// States covered by explored small-range balls.
    pub covered: usize,
    /// `revealed^2 * degree^r / n`.
    pub bound: f64,
    /// Finite-side states along the run; equal to the tree types while coupled.
    pub finite_states: Vec<usize>,
}

/// Run the finite chain (matching revealed on demand, without replacement)
/// and the tree walker (with replacement) on shared draws. Before every
/// integer time the long-range ball of radius `l` around the walker is
/// explored; a tree draw is accepted on the finite side when the drawn
/// center is unmatched and its small-range ball of radius `r` avoids every
/// covered state.
pub fn coupled_generation(spec: &MixtureSpec, x0: usize, r: usize, l: usize, t_max: u64, seed: u64) -> Result<CouplingRun> {
    let p = spec.kernel();
    let degree = p.max_out_degree().max(p.max_in_degree()) + 1;
    let mut tree = LazyQuasiTree::new(spec, x0, seed);
    let mut rng = task_rng(seed, 3);
    let mut balls = SrBalls::new(p, r + 1);
    let mut covered: HashSet<usize> = balls.ball(x0).keys().copied().collect();
    let mut eta: HashMap<usize, usize> = HashMap::new();
    let mut processed = 1usize;
    let mut t_coup = None;
    let mut walker = Walker { v: tree.root(), tick: 0 };
    let mut x = x0;
    let mut finite_states = vec![x];
    let mut sr_restrict = SrBalls::new(p, r);
    'outer: while walker.tick < 2 * t_max {
        if walker.tick % 2 == 0 {
            explore_lr_ball(&mut tree, walker.v.0, l, &mut sr_restrict);
        }
        let mut half = walker;
        let move_seed: u64 = rng.random();
        let mut step_rng = task_rng(move_seed, 0);
        qt_step(&mut tree, &mut half, &mut step_rng);
        // Accept every component created so far, in creation order.
        while processed < tree.comps().len() {
            let c = &tree.comps()[processed];
            let (zeta, (_, a)) = (c.center.expect("child"), c.parent.expect("child"));
            let ball: Vec<usize> = balls.ball(zeta).keys().copied().collect();
            let clash = eta.contains_key(&a) || eta.contains_key(&zeta) || ball.iter().any(|s| covered.contains(s));
            if clash {
                t_coup = Some(walker.tick as f64 / 2.0);
                break 'outer;
            }
            eta.insert(a, zeta);
            eta.insert(zeta, a);
            covered.extend(ball);
            processed += 1;
        }
        // Finite side with the same draw.
        let mut frng = task_rng(move_seed, 0);
        let u: f64 = frng.random();
        x = if walker.tick % 2 == 0 {
            let partner = eta[&x];
            if u < spec.p(x, partner) {
                x
            } else {
                partner
            }
        } else {
            sample_row(p.row_cols(x), p.row_vals(x), u)
        };
        walker = half;
        if x != walker.v.1 {
            return Err(Error::Invalid("coupled walkers disagree".into()));
        }
        finite_states.push(x);
    }
    let m = eta.len() / 2;
    Ok(CouplingRun {
        t_coup,
        revealed: m,
        covered: covered.len(),
        bound: (m * m) as f64 * (degree as f64).powi(r as i32) / spec.n as f64,
        finite_states,
    })
}

/// Materialize the long-range ball of radius `l` around component `c`, with
/// small-range moves limited to distance below `r` from each center.
fn explore_lr_ball(tree: &mut LazyQuasiTree<'_>, c: usize, l: usize, balls: &mut SrBalls<'_>) {
    let mut frontier = vec![c];
    let mut seen = HashSet::from([c]);
    for _ in 0..l {
        let mut next = Vec::new();
        for comp in frontier {
            let anchor = tree.comp(comp).center.unwrap_or(tree.root().1);
            let mut members: Vec<usize> = balls.ball(anchor).keys().copied().collect();
            members.sort_unstable();
            for t in members {
                let nb = tree.partner((comp, t)).0;
                if seen.insert(nb) {
                    next.push(nb);
                }
            }
        }
        frontier = next;
    }
}
