//! Biased segment chains. Their matching can copy a periodic weighted tree
//! around some state; the walk then stays near that state for a time
//! exponential in the tree depth.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::StochasticMatrix;
use crate::mixing::{stationary_direct, tv_distance};
use crate::model::{model0_kernel, Environment, MixtureSpec, PTable};
use crate::rng::task_rng;
use crate::stats::Proportion;

/// Entry-wise tolerance of the tree isomorphism test.
pub const MATCH_TOL: f64 = 1e-12;

/// Largest sparse step count spent on one typical-start mixing time.
pub const TMIX_STEP_CAP: usize = 2_000_000;

/// Segment chains with bias `delta`: `2 copies` segments of length 3 on side
/// one and `3 copies` segments of length 2 on side two, so `n = 6 copies`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentChainSpec {
    pub delta: f64,
    pub copies: usize,
}

impl SegmentChainSpec {
    pub fn new(copies: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Invalid(format!("bias {delta} outside (0, 1)")));
        }
        if copies == 0 {
            return Err(Error::Invalid("at least one copy is required".into()));
        }
        Ok(Self { delta, copies })
    }

    pub fn n(&self) -> usize {
        6 * self.copies
    }

    pub fn build(&self) -> Result<MixtureSpec> {
        let (d, c) = (self.delta, self.copies);
        let q1 = segment_q1(d);
        let q2 = segment_q2(d);
        let mut t1 = Vec::new();
        for s in 0..2 * c {
            for (a, row) in q1.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    if v > 0.0 {
                        t1.push((3 * s + a, 3 * s + b, v));
                    }
                }
            }
        }
        let mut t2 = Vec::new();
        for s in 0..3 * c {
            for (a, row) in q2.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    if v > 0.0 {
                        t2.push((2 * s + a, 2 * s + b, v));
                    }
                }
            }
        }
        let n = self.n();
        let p1 = StochasticMatrix::from_triplets(n, t1)?;
        let p2 = StochasticMatrix::from_triplets(n, t2)?;
        let floor = d.min(1.0 - d).min(0.5);
        let spec = MixtureSpec::new(p1, p2, PTable::Constant(0.5), floor, 3)?;
        let degree = spec.kernel().max_out_degree().max(spec.kernel().max_in_degree()) + 1;
        assert!(degree <= 3, "segment chains have degree at most 3, found {degree}");
        Ok(spec)
    }

    pub fn tree(&self, l: usize) -> Result<TrapTree> {
        build_tree_t(l, self.delta)
    }
}

/// Length-3 segment: ends hold with `1 - delta` (left) or `delta` (right),
/// every move to the right has probability `delta`.
pub fn segment_q1(delta: f64) -> [[f64; 3]; 3] {
    [[1.0 - delta, delta, 0.0], [1.0 - delta, 0.0, delta], [0.0, 1.0 - delta, delta]]
}

/// Length-2 segment with the same bias.
pub fn segment_q2(delta: f64) -> [[f64; 2]; 2] {
    [[1.0 - delta, delta], [1.0 - delta, delta]]
}

/// Mixture of the segment chains with `p = 1/2`.
pub fn build_counterexample(copies: usize, delta: f64) -> Result<MixtureSpec> {
    SegmentChainSpec::new(copies, delta)?.build()
}

/// Position of a projected state in the two segment families. The root sits
/// at the left end of both segments; `A` is the middle of a length-3 segment,
/// `B` its right end and `C` the right end of a length-2 segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrapKind {
    Root,
    A,
    B,
    C,
}

impl TrapKind {
    pub fn self_loop(self, delta: f64) -> f64 {
        match self {
            TrapKind::Root => 1.0 - delta,
            TrapKind::A => (1.0 - delta) / 2.0,
            TrapKind::B | TrapKind::C => 0.5,
        }
    }

    /// Child kinds, with `true` when the edge comes from the length-3 segment.
    pub fn children(self) -> &'static [(TrapKind, bool)] {
        match self {
            TrapKind::Root => &[(TrapKind::A, true), (TrapKind::C, false)],
            TrapKind::A => &[(TrapKind::B, true), (TrapKind::C, false)],
            TrapKind::B => &[(TrapKind::C, false)],
            TrapKind::C => &[(TrapKind::A, true)],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrapNode {
    pub kind: TrapKind,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// The edge to the parent comes from the length-3 segment.
    pub via_q1: bool,
}

/// The projected chain seen from a state whose neighbourhood is a tree of
/// fresh segments, truncated at depth `l`.
#[derive(Debug, Clone, Serialize)]
pub struct TrapTree {
    pub l: usize,
    pub delta: f64,
    /// Breadth-first order, root first.
    pub nodes: Vec<TrapNode>,
    /// Probability of a step away from the root.
    pub outward: f64,
    /// Probability of a step toward the root.
    pub inward: f64,
    /// Inward over outward drift on a one-child level.
    pub rho: f64,
    /// `(2 delta / (1 - delta))^l`.
    pub r: f64,
    /// `r < 1`, equivalently `delta < 1/3`.
    pub trapping: bool,
}

impl TrapTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.l + 1];
        for node in &self.nodes {
            out[node.depth] += 1;
        }
        out
    }

    /// Dense kernel on the nodes; steps out of depth `l` are killed.
    pub fn killed_kernel(&self) -> Vec<Vec<f64>> {
        let m = self.nodes.len();
        let mut k = vec![vec![0.0; m]; m];
        for (i, node) in self.nodes.iter().enumerate() {
            k[i][i] = node.kind.self_loop(self.delta);
            if let Some(p) = node.parent {
                k[i][p] = self.inward;
            }
            for &c in &node.children {
                k[i][c] = self.outward;
            }
        }
        k
    }
}

/// The periodic tree truncated at depth `l`, with its escape quantities.
pub fn build_tree_t(l: usize, delta: f64) -> Result<TrapTree> {
    if l == 0 {
        return Err(Error::Invalid("tree depth must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("bias {delta} outside (0, 1)")));
    }
    let mut nodes = vec![TrapNode { kind: TrapKind::Root, depth: 0, parent: None, children: Vec::new(), via_q1: false }];
    let mut i = 0;
    while i < nodes.len() {
        if nodes[i].depth < l {
            for &(kind, via_q1) in nodes[i].kind.children() {
                let id = nodes.len();
                nodes.push(TrapNode { kind, depth: nodes[i].depth + 1, parent: Some(i), children: Vec::new(), via_q1 });
                nodes[i].children.push(id);
            }
        }
        i += 1;
    }
    let ratio = 2.0 * delta / (1.0 - delta);
    let r = ratio.powi(l as i32);
    Ok(TrapTree {
        l,
        delta,
        nodes,
        outward: delta / 2.0,
        inward: (1.0 - delta) / 2.0,
        rho: (1.0 - delta) / (2.0 * delta),
        r,
        trapping: ratio < 1.0 - 1e-12,
    })
}

/// Probability that the walk on `0..=l` stepping right with `delta` and left
/// with `(1 - delta)/2` reaches `l` before `0` from `1`.
pub fn gambler_ruin_probability(delta: f64, l: usize) -> f64 {
    if l <= 1 {
        return 1.0;
    }
    let rho = (1.0 - delta) / (2.0 * delta);
    if (rho - 1.0).abs() < 1e-12 {
        return 1.0 / l as f64;
    }
    (rho - 1.0) / (rho.powi(l as i32) - 1.0)
}

/// Monte Carlo estimate of [`gambler_ruin_probability`].
pub fn gambler_ruin_mc<R: Rng>(delta: f64, l: usize, trials: u64, rng: &mut R) -> Proportion {
    let left = (1.0 - delta) / 2.0;
    let mut hits = 0;
    for _ in 0..trials {
        let mut k = 1usize;
        while k > 0 && k < l {
            let u: f64 = rng.random();
            if u < delta {
                k += 1;
            } else if u < delta + left {
                k -= 1;
            }
        }
        if k >= l {
            hits += 1;
        }
    }
    Proportion::new(hits, trials)
}

/// Undirected neighbours and weights of the projected chain.
pub struct TrapMatcher<'a> {
    bar: &'a StochasticMatrix,
    preds: Vec<Vec<usize>>,
}

impl<'a> TrapMatcher<'a> {
    pub fn new(bar: &'a StochasticMatrix) -> Self {
        Self { bar, preds: bar.predecessors() }
    }

    pub fn neighbours(&self, b: usize) -> BTreeSet<usize> {
        self.bar.row_cols(b).iter().chain(&self.preds[b]).copied().filter(|&z| z != b).collect()
    }

    /// States within undirected distance `l` of `x`, with their distance.
    pub fn ball(&self, x: usize, l: usize) -> BTreeMap<usize, usize> {
        let mut dist = BTreeMap::from([(x, 0)]);
        let mut queue = VecDeque::from([x]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == l {
                continue;
            }
            for z in self.neighbours(u) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(z) {
                    e.insert(d + 1);
                    queue.push_back(z);
                }
            }
        }
        dist
    }

    /// Map from tree nodes to states when the ball of radius `tree.l` around
    /// `x` equals the tree with its weights.
    pub fn embed(&self, x: usize, tree: &TrapTree) -> Option<Vec<usize>> {
        let mut map = vec![usize::MAX; tree.len()];
        if !self.match_node(tree, 0, x, None, &mut map) {
            return None;
        }
        let owner: BTreeMap<usize, usize> = map.iter().enumerate().map(|(t, &b)| (b, t)).collect();
        for (t, &b) in map.iter().enumerate() {
            let node = &tree.nodes[t];
            for z in self.neighbours(b) {
                if let Some(&u) = owner.get(&z) {
                    if node.parent != Some(u) && !node.children.contains(&u) {
                        return None;
                    }
                }
            }
        }
        Some(map)
    }

    pub fn is_trap(&self, x: usize, tree: &TrapTree) -> bool {
        self.embed(x, tree).is_some()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= MATCH_TOL
    }

    fn match_node(&self, tree: &TrapTree, t: usize, b: usize, parent: Option<usize>, map: &mut Vec<usize>) -> bool {
        if map.contains(&b) {
            return false;
        }
        let node = &tree.nodes[t];
        if !Self::close(self.bar.get(b, b), node.kind.self_loop(tree.delta)) {
            return false;
        }
        if let Some(p) = parent {
            if !Self::close(self.bar.get(b, p), tree.inward) || !Self::close(self.bar.get(p, b), tree.outward) {
                return false;
            }
        }
        map[t] = b;
        if node.depth == tree.l {
            return true;
        }
        let nbrs: Vec<usize> = self.neighbours(b).into_iter().filter(|&z| Some(z) != parent).collect();
        if nbrs.len() != node.children.len() {
            map[t] = usize::MAX;
            return false;
        }
        let orders: Vec<Vec<usize>> = match nbrs.len() {
            0 => vec![vec![]],
            1 => vec![vec![nbrs[0]]],
            2 => vec![vec![nbrs[0], nbrs[1]], vec![nbrs[1], nbrs[0]]],
            _ => Vec::new(),
        };
        for order in orders {
            let saved = map.clone();
            if node.children.iter().zip(&order).all(|(&c, &z)| self.match_node(tree, c, z, Some(b), map)) {
                return true;
            }
            *map = saved;
        }
        map[t] = usize::MAX;
        false
    }

    /// Largest `d <= l` whose radius-`d` ball around `x` matches the tree.
    pub fn matched_depth(&self, x: usize, l: usize, delta: f64) -> Result<usize> {
        let mut best = 0;
        for d in 1..=l {
            if self.is_trap(x, &build_tree_t(d, delta)?) {
                best = d;
            } else {
                break;
            }
        }
        Ok(best)
    }
}

/// Whether the radius-`tree.l` ball of `bar` around `x` equals the tree.
pub fn is_trap(bar: &StochasticMatrix, x: usize, tree: &TrapTree) -> bool {
    TrapMatcher::new(bar).is_trap(x, tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrapMode {
    Found,
    Planted,
}

/// How to obtain a trap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrapSearch {
    /// Candidate centres scanned before giving up; 0 plants at once.
    pub budget: usize,
    pub plant_on_failure: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrapReport {
    pub center: usize,
    pub depth: usize,
    pub delta: f64,
    pub n: usize,
    pub mode: TrapMode,
    pub isomorphic: bool,
    /// Largest depth at which the neighbourhood matches the tree, over `depth`.
    pub match_score: f64,
    pub tree_size: usize,
    pub r: f64,
    pub trapping: bool,
    /// `depth / ln ln n`.
    pub beta: f64,
    pub scanned: usize,
    /// Scanned centres whose balls were pairwise disjoint.
    pub disjoint: usize,
    /// `1 - exp(-k 3^(-3^(depth+1)))` for `k` disjoint centres.
    pub predicted_success: f64,
}

/// Segment slots used by an embedding of the tree: each node is a side-one
/// state and a side-two state glued by the matching.
fn tree_layout(tree: &TrapTree) -> Vec<(usize, usize)> {
    let mut q1_next = 0usize;
    let mut q2_next = 0usize;
    let mut slots: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(tree.len());
    slots.push((0, 0, 0, 0));
    q1_next += 1;
    q2_next += 1;
    for (t, node) in tree.nodes.iter().enumerate().skip(1) {
        let (s1, p1, s2, p2) = slots[node.parent.expect("non-root")];
        debug_assert_eq!(t, slots.len());
        let slot = if node.via_q1 {
            q2_next += 1;
            (s1, p1 + 1, q2_next - 1, 0)
        } else {
            q1_next += 1;
            (q1_next - 1, 0, s2, p2 + 1)
        };
        slots.push(slot);
    }
    slots.into_iter().map(|(s1, p1, s2, p2)| (3 * s1 + p1, 2 * s2 + p2)).collect()
}

/// Segments of each length needed to plant the tree.
pub fn plant_requirements(tree: &TrapTree) -> (usize, usize) {
    let layout = tree_layout(tree);
    let q1 = layout.iter().map(|&(i, _)| i / 3).max().unwrap_or(0) + 1;
    let q2 = layout.iter().map(|&(_, j)| j / 2).max().unwrap_or(0) + 1;
    (q1, q2)
}

/// Environment whose matching realizes the tree around a centre. The tree
/// uses segments picked by `layout_seed`; the remaining pairs are a uniform
/// bijection drawn from `fill_seed`.
pub fn plant_trap(chain: &SegmentChainSpec, tree: &TrapTree, layout_seed: u64, fill_seed: u64) -> Result<(Environment, usize)> {
    let n = chain.n();
    let (need1, need2) = plant_requirements(tree);
    if need1 > 2 * chain.copies || need2 > 3 * chain.copies {
        return Err(Error::Invalid(format!(
            "depth {} needs {need1} + {need2} segments, only {} + {} exist",
            tree.l,
            2 * chain.copies,
            3 * chain.copies
        )));
    }
    let mut lrng = task_rng(layout_seed, 0);
    let mut seg1: Vec<usize> = (0..2 * chain.copies).collect();
    let mut seg2: Vec<usize> = (0..3 * chain.copies).collect();
    seg1.shuffle(&mut lrng);
    seg2.shuffle(&mut lrng);
    let mut sigma = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (i, j) in tree_layout(tree) {
        let state = 3 * seg1[i / 3] + i % 3;
        let target = 2 * seg2[j / 2] + j % 2;
        sigma[state] = n + target;
        used[target] = true;
    }
    let center = 3 * seg1[0];
    let mut free: Vec<usize> = (0..n).filter(|&j| !used[j]).map(|j| n + j).collect();
    free.shuffle(&mut task_rng(fill_seed, 1));
    let mut it = free.into_iter();
    for s in sigma.iter_mut().filter(|s| **s == usize::MAX) {
        *s = it.next().expect("free targets match free states");
    }
    Ok((Environment::from_sigma(n, sigma, fill_seed)?, center))
}

/// Scan left-end states of length-3 segments for a neighbourhood equal to the
/// tree. Returns the centre (if any), centres scanned and disjoint centres.
pub fn search_trap(bar: &StochasticMatrix, tree: &TrapTree, budget: usize) -> (Option<usize>, usize, usize) {
    let matcher = TrapMatcher::new(bar);
    let mut covered = BTreeSet::new();
    let mut disjoint = 0;
    let mut scanned = 0;
    for x in (0..bar.n()).step_by(3).take(budget) {
        scanned += 1;
        let ball = matcher.ball(x, tree.l);
        if ball.keys().all(|z| !covered.contains(z)) {
            disjoint += 1;
            covered.extend(ball.keys().copied());
        }
        if matcher.is_trap(x, tree) {
            return (Some(x), scanned, disjoint);
        }
    }
    (None, scanned, disjoint)
}

fn predicted_success(k: usize, l: usize) -> f64 {
    let exponent = 3f64.powi(l as i32 + 1);
    let p = 3f64.powf(-exponent);
    1.0 - (-(k as f64) * p).exp()
}

/// Search `env` (or a fresh uniform environment) for a trap of depth `l`;
/// plant one when the search fails and planting is allowed.
pub fn find_or_plant_trap(
    chain: &SegmentChainSpec,
    env: Option<&Environment>,
    l: usize,
    search: &TrapSearch,
) -> Result<(Environment, TrapReport)> {
    let tree = chain.tree(l)?;
    let spec = chain.build()?;
    let n = chain.n();
    let owned;
    let env = match env {
        Some(e) => e,
        None => {
            owned = Environment::sample(n, search.seed);
            &owned
        }
    };
    if env.n != n {
        return Err(Error::Dimension { expected: n, found: env.n });
    }
    let beta = l as f64 / (n as f64).ln().max(1.0 + 1e-9).ln().max(1e-9);
    let mut report = TrapReport {
        center: 0,
        depth: l,
        delta: chain.delta,
        n,
        mode: TrapMode::Found,
        isomorphic: false,
        match_score: 0.0,
        tree_size: tree.len(),
        r: tree.r,
        trapping: tree.trapping,
        beta,
        scanned: 0,
        disjoint: 0,
        predicted_success: 0.0,
    };
    if search.budget > 0 {
        let bar = model0_kernel(&spec, env)?;
        let (hit, scanned, disjoint) = search_trap(&bar, &tree, search.budget);
        report.scanned = scanned;
        report.disjoint = disjoint;
        report.predicted_success = predicted_success(disjoint, l);
        if let Some(x) = hit {
            report.center = x;
            report.isomorphic = true;
            report.match_score = 1.0;
            return Ok((env.clone(), report));
        }
        if !search.plant_on_failure {
            return Err(Error::Budget(format!("no depth-{l} trap among {scanned} centres")));
        }
    }
    let (planted, center) = plant_trap(chain, &tree, search.seed, search.seed)?;
    let bar = model0_kernel(&spec, &planted)?;
    let matcher = TrapMatcher::new(&bar);
    report.mode = TrapMode::Planted;
    report.center = center;
    report.isomorphic = matcher.is_trap(center, &tree);
    report.match_score = matcher.matched_depth(center, l, chain.delta)? as f64 / l as f64;
    Ok((planted, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct SlowdownConfig {
    /// Times at which the escape curve is reported.
    pub t_grid: Vec<u64>,
    pub typical_starts: usize,
    pub eps: f64,
    /// Steps between distance checks in the typical-start evolution.
    pub check_every: usize,
    /// Typical starts run on a fresh uniform environment with this seed;
    /// `None` uses the audited environment.
    pub typical_env_seed: Option<u64>,
    pub seed: u64,
}

impl Default for SlowdownConfig {
    fn default() -> Self {
        Self { t_grid: Vec::new(), typical_starts: 4, eps: 0.25, check_every: 16, typical_env_seed: None, seed: 0 }
    }
}

/// Escape from the ball of radius `l` (or from depth below `l`) around the
/// centre, computed exactly from the killed chain.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeCurve {
    pub radius: usize,
    pub ball_size: usize,
    /// `(t, P(no exit by t))`.
    pub survival: Vec<(u64, f64)>,
    /// First `t` with survival at most `1 - q`, for `q` in 0.1, 0.5, 0.9.
    pub quantiles: [(f64, u64); 3],
    /// `-ln(S(2m)/S(m)) / m` at the median `m`.
    pub hazard: f64,
    /// Hazard over `r`.
    pub c: f64,
    /// `P(exit by t) <= 1 - (1 - r)^t` on the grid.
    pub dominated: bool,
}

impl EscapeCurve {
    pub fn median(&self) -> u64 {
        self.quantiles[1].1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlowdownReport {
    pub center: usize,
    pub depth: usize,
    pub r: f64,
    /// Exit from the ball of radius `depth`.
    pub ball_exit: EscapeCurve,
    /// First visit at distance `depth`.
    pub level_hit: EscapeCurve,
    pub typical_starts: Vec<usize>,
    pub typical_tmix: Vec<usize>,
    pub tmix_mean: f64,
    /// Ball-exit median over mean typical mixing time.
    pub ratio: f64,
    /// Both hazard constants lie in `[0.1, 10]`.
    pub c_in_band: bool,
}

fn dense_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for (k, &aik) in a[i].iter().enumerate() {
            if aik != 0.0 {
                for (o, &bkj) in out[i].iter_mut().zip(&b[k]) {
                    *o += aik * bkj;
                }
            }
        }
    }
    out
}

fn vec_mul(v: &[f64], a: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &vi) in v.iter().enumerate() {
        if vi != 0.0 {
            for (o, &aij) in out.iter_mut().zip(&a[i]) {
                *o += vi * aij;
            }
        }
    }
    out
}

/// Survival of a killed chain at arbitrary times via binary powers.
struct Killed {
    powers: Vec<Vec<Vec<f64>>>,
    start: Vec<f64>,
}

impl Killed {
    fn new(k: Vec<Vec<f64>>, x: usize) -> Self {
        let mut start = vec![0.0; k.len()];
        start[x] = 1.0;
        Self { powers: vec![k], start }
    }

    fn power(&mut self, j: usize) -> &Vec<Vec<f64>> {
        while self.powers.len() <= j {
            let last = self.powers.last().expect("nonempty");
            let sq = dense_mul(last, last);
            self.powers.push(sq);
        }
        &self.powers[j]
    }

    fn survival(&mut self, t: u64) -> f64 {
        let mut v = self.start.clone();
        for j in 0..64 {
            if t >> j & 1 == 1 {
                v = vec_mul(&v, self.power(j));
            }
        }
        v.iter().sum()
    }

    /// First `t` with survival at most `s`.
    fn first_below(&mut self, s: f64) -> Result<u64> {
        let mut top = 0;
        loop {
            let start = self.start.clone();
            let v = vec_mul(&start, self.power(top));
            if v.iter().sum::<f64>() <= s {
                break;
            }
            top += 1;
            if top > 62 {
                return Err(Error::Budget("escape time beyond 2^62 steps".into()));
            }
        }
        let mut v = self.start.clone();
        if v.iter().sum::<f64>() <= s {
            return Ok(0);
        }
        let mut t = 0u64;
        for j in (0..top).rev() {
            let w = vec_mul(&v, self.power(j));
            if w.iter().sum::<f64>() > s {
                v = w;
                t += 1 << j;
            }
        }
        Ok(t + 1)
    }
}

fn escape_curve(matcher: &TrapMatcher, bar: &StochasticMatrix, x: usize, radius: usize, r: f64, grid: &[u64]) -> Result<EscapeCurve> {
    let ball = matcher.ball(x, radius);
    let states: Vec<usize> = ball.keys().copied().collect();
    let index: BTreeMap<usize, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let m = states.len();
    let mut k = vec![vec![0.0; m]; m];
    for (i, &s) in states.iter().enumerate() {
        for (z, v) in bar.row(s) {
            if let Some(&j) = index.get(&z) {
                k[i][j] += v;
            }
        }
    }
    let mut killed = Killed::new(k, index[&x]);
    let mut quantiles = [(0.1, 0), (0.5, 0), (0.9, 0)];
    for q in quantiles.iter_mut() {
        q.1 = killed.first_below(1.0 - q.0)?;
    }
    let med = quantiles[1].1.max(1);
    let s1 = killed.survival(med);
    let s2 = killed.survival(2 * med);
    let hazard = -(s2 / s1).ln() / med as f64;
    let survival: Vec<(u64, f64)> = grid.iter().map(|&t| (t, killed.survival(t))).collect();
    let dominated = r >= 1.0 || survival.iter().all(|&(t, s)| 1.0 - s <= 1.0 - (1.0 - r).powf(t as f64) + 1e-12);
    Ok(EscapeCurve { radius, ball_size: m, survival, quantiles, hazard, c: hazard / r, dominated })
}

/// First `t` with distance below `eps`, checking every `every` steps and
/// replaying the last block step by step.
pub fn typical_tmix(bar: &StochasticMatrix, pi: &[f64], x: usize, eps: f64, every: usize) -> Result<usize> {
    let n = bar.n();
    let every = every.max(1);
    let mut mu = vec![0.0; n];
    mu[x] = 1.0;
    let mut next = vec![0.0; n];
    if tv_distance(&mu, pi)? < eps {
        return Ok(0);
    }
    let mut t = 0;
    loop {
        let checkpoint = mu.clone();
        for _ in 0..every {
            bar.apply_left(&mu, &mut next);
            std::mem::swap(&mut mu, &mut next);
        }
        if tv_distance(&mu, pi)? < eps {
            mu = checkpoint;
            for s in 1..=every {
                bar.apply_left(&mu, &mut next);
                std::mem::swap(&mut mu, &mut next);
                if tv_distance(&mu, pi)? < eps {
                    return Ok(t + s);
                }
            }
            unreachable!("distance is non-increasing");
        }
        t += every;
        if t > TMIX_STEP_CAP {
            return Err(Error::Budget(format!("mixing time from {x} exceeds {TMIX_STEP_CAP} steps")));
        }
    }
}

/// Exact escape curves from the trap centre against mixing times from
/// uniformly drawn starts on the same environment.
pub fn slowdown_audit(
    spec: &MixtureSpec,
    env: &Environment,
    trap: &TrapReport,
    cfg: &SlowdownConfig,
) -> Result<SlowdownReport> {
    if trap.depth == 0 {
        return Err(Error::Invalid("trap depth must be at least 1".into()));
    }
    let bar = model0_kernel(spec, env)?;
    let matcher = TrapMatcher::new(&bar);
    let ball_exit = escape_curve(&matcher, &bar, trap.center, trap.depth, trap.r, &cfg.t_grid)?;
    let level_hit = escape_curve(&matcher, &bar, trap.center, trap.depth - 1, trap.r, &cfg.t_grid)?;
    let reference = match cfg.typical_env_seed {
        Some(s) => model0_kernel(spec, &Environment::sample(spec.n, s))?,
        None => bar.clone(),
    };
    let pi = stationary_direct(&reference)?;
    let mut rng = task_rng(cfg.seed, 2);
    let typical_starts: Vec<usize> = (0..cfg.typical_starts).map(|_| rng.random_range(0..reference.n())).collect();
    let typical_tmix = typical_starts
        .iter()
        .map(|&x| typical_tmix(&reference, &pi, x, cfg.eps, cfg.check_every))
        .collect::<Result<Vec<_>>>()?;
    let tmix_mean = if typical_tmix.is_empty() {
        f64::NAN
    } else {
        typical_tmix.iter().sum::<usize>() as f64 / typical_tmix.len() as f64
    };
    let band = |c: f64| (0.1..=10.0).contains(&c);
    Ok(SlowdownReport {
        center: trap.center,
        depth: trap.depth,
        r: trap.r,
        ratio: ball_exit.median() as f64 / tmix_mean,
        c_in_band: band(ball_exit.c) && band(level_hit.c),
        ball_exit,
        level_hit,
        typical_starts,
        typical_tmix,
        tmix_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_hypotheses;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn segment_entries() {
        let q1 = segment_q1(0.05);
        assert_eq!(q1[0][1], 0.05);
        assert_eq!(q1[0][0], 0.95);
        assert_eq!(q1[1][0], 0.95);
        assert_eq!(q1[1][2], 0.05);
        assert_eq!(q1[2][1], 0.95);
        assert_eq!(q1[2][2], 0.05);
        let spec = build_counterexample(3, 0.05).unwrap();
        assert_eq!(spec.n, 18);
        assert!(spec.kernel().row_sum_error() < 1e-15);
        assert_eq!(spec.p1.get(4, 5), 0.05);
        assert_eq!(spec.p2.get(3, 2), 0.95);
    }

    #[test]
    fn hypotheses_hold() {
        let spec = build_counterexample(4, 0.05).unwrap();
        let rep = validate_hypotheses(&spec, 1);
        assert!(rep.delta_ok && rep.degree_ok && rep.reach_ok, "{rep:?}");
        assert_eq!(rep.return_sets[0].1, spec.size());
    }

    #[test]
    fn bad_bias_refused() {
        assert!(build_counterexample(2, 0.0).is_err());
        assert!(build_counterexample(2, 1.0).is_err());
        assert!(build_tree_t(0, 0.1).is_err());
    }

    #[test]
    fn tree_quantities() {
        let t = build_tree_t(5, 0.05).unwrap();
        assert!((t.r - 1.293e-5).abs() < 1e-8, "{}", t.r);
        assert!(t.trapping);
        assert_eq!(t.level_sizes(), vec![1, 2, 3, 4, 5, 7]);
        assert_eq!(t.len(), 22);
        for row in t.killed_kernel().iter().take(15) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(!build_tree_t(3, 1.0 / 3.0).unwrap().trapping);
        assert!(!build_tree_t(3, 0.4).unwrap().trapping);
        assert!(build_tree_t(3, 0.33).unwrap().trapping);
    }

    #[test]
    fn gambler_ruin_closed_form() {
        assert!((gambler_ruin_probability(0.25, 2) - 0.4).abs() < 1e-15);
        let mut rng = task_rng(3, 0);
        let mc = gambler_ruin_mc(0.2, 3, 100_000, &mut rng);
        assert!((mc.estimate - gambler_ruin_probability(0.2, 3)).abs() < 3.0 * mc.sigma + 1e-3);
    }

    #[test]
    fn planted_trap_is_isomorphic() {
        let chain = SegmentChainSpec::new(16, 0.05).unwrap();
        for l in 1..=5 {
            let tree = chain.tree(l).unwrap();
            let (env, x) = plant_trap(&chain, &tree, 7, 11).unwrap();
            let bar = model0_kernel(&chain.build().unwrap(), &env).unwrap();
            let m = TrapMatcher::new(&bar);
            assert!(m.is_trap(x, &tree), "depth {l}");
            assert_eq!(m.ball(x, l).len(), tree.len());
            assert_eq!(m.matched_depth(x, l, 0.05).unwrap(), l);
        }
    }

    #[test]
    fn planting_needs_room() {
        let chain = SegmentChainSpec::new(1, 0.05).unwrap();
        let tree = chain.tree(5).unwrap();
        assert!(plant_trap(&chain, &tree, 0, 0).is_err());
        let (r1, r2) = plant_requirements(&tree);
        assert!(r1 > 2 && r2 > 3);
    }

    #[test]
    fn wrong_bias_is_not_a_trap() {
        let chain = SegmentChainSpec::new(8, 0.05).unwrap();
        let tree = chain.tree(3).unwrap();
        let (env, x) = plant_trap(&chain, &tree, 1, 2).unwrap();
        let bar = model0_kernel(&chain.build().unwrap(), &env).unwrap();
        assert!(!is_trap(&bar, x, &build_tree_t(3, 0.1).unwrap()));
        assert!(!is_trap(&bar, x + 1, &tree));
    }

    #[test]
    fn complement_is_uniform() {
        let chain = SegmentChainSpec::new(4, 0.05).unwrap();
        let tree = chain.tree(1).unwrap();
        let n = chain.n();
        let envs: Vec<Environment> = (0..8).map(|s| plant_trap(&chain, &tree, 5, s).unwrap().0).collect();
        let env0 = envs[0].clone();
        // The planted pairs are the ones shared by every fill.
        let fixed: BTreeSet<usize> = (0..n).filter(|&i| envs.iter().all(|e| e.eta(i) == env0.eta(i))).collect();
        assert_eq!(fixed.len(), tree.len());
        let probe = (0..n).find(|i| !fixed.contains(i)).unwrap();
        let plants = 4200;
        let mut counts = BTreeMap::new();
        for seed in 0..plants {
            let (env, _) = plant_trap(&chain, &tree, 5, seed).unwrap();
            assert!(fixed.iter().all(|&i| env.eta(i) == env0.eta(i)));
            *counts.entry(env.eta(probe)).or_insert(0u64) += 1;
        }
        let cells = n - tree.len();
        assert!(counts.len() <= cells);
        let expect = plants as f64 / cells as f64;
        let chi: f64 = counts.values().map(|&c| (c as f64 - expect).powi(2) / expect).sum::<f64>()
            + (cells - counts.len()) as f64 * expect;
        let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(chi < crit, "chi {chi} crit {crit}");
    }

    #[test]
    fn search_finds_shallow_traps() {
        let chain = SegmentChainSpec::new(256, 0.05).unwrap();
        let search = TrapSearch { budget: 2048, plant_on_failure: false, seed: 4 };
        let (env, rep) = find_or_plant_trap(&chain, None, 1, &search).unwrap();
        assert_eq!(rep.mode, TrapMode::Found);
        assert!(rep.isomorphic && rep.scanned >= 1 && rep.disjoint >= 1);
        let bar = model0_kernel(&chain.build().unwrap(), &env).unwrap();
        assert!(is_trap(&bar, rep.center, &chain.tree(1).unwrap()));
    }

    #[test]
    fn plant_mode_is_flagged() {
        let chain = SegmentChainSpec::new(32, 0.05).unwrap();
        let search = TrapSearch { budget: 0, plant_on_failure: true, seed: 9 };
        let (_, rep) = find_or_plant_trap(&chain, None, 4, &search).unwrap();
        assert_eq!(rep.mode, TrapMode::Planted);
        assert!(rep.isomorphic);
        assert_eq!(rep.match_score, 1.0);
        let fail = TrapSearch { budget: 4, plant_on_failure: false, seed: 9 };
        assert!(find_or_plant_trap(&chain, None, 5, &fail).unwrap_err().is_budget());
    }

    #[test]
    fn killed_survival_matches_direct_powers() {
        let t = build_tree_t(3, 0.1).unwrap();
        let k = t.killed_kernel();
        let mut killed = Killed::new(k.clone(), 0);
        let mut v = vec![0.0; k.len()];
        v[0] = 1.0;
        for step in 1..=200u64 {
            v = vec_mul(&v, &k);
            let s = killed.survival(step);
            assert!((s - v.iter().sum::<f64>()).abs() < 1e-12);
        }
        let med = killed.first_below(0.5).unwrap();
        assert!(killed.survival(med) <= 0.5 && killed.survival(med - 1) > 0.5);
    }

    #[test]
    fn unbiased_regime_has_no_slowdown() {
        let chain = SegmentChainSpec::new(16, 0.45).unwrap();
        let search = TrapSearch { budget: 0, plant_on_failure: true, seed: 2 };
        let (env, rep) = find_or_plant_trap(&chain, None, 2, &search).unwrap();
        let cfg = SlowdownConfig { t_grid: vec![1, 10, 100], typical_starts: 4, seed: 1, ..Default::default() };
        let audit = slowdown_audit(&chain.build().unwrap(), &env, &rep, &cfg).unwrap();
        assert!(audit.ratio < 1.0, "{}", audit.ratio);
        assert!(audit.typical_tmix.iter().all(|&t| t > 0));
    }

    #[test]
    fn biased_trap_holds_longer() {
        let chain = SegmentChainSpec::new(16, 0.05).unwrap();
        let search = TrapSearch { budget: 0, plant_on_failure: true, seed: 2 };
        let (env, rep) = find_or_plant_trap(&chain, None, 3, &search).unwrap();
        let cfg = SlowdownConfig { t_grid: vec![1, 100, 10_000], typical_starts: 2, seed: 1, ..Default::default() };
        let audit = slowdown_audit(&chain.build().unwrap(), &env, &rep, &cfg).unwrap();
        assert!(audit.ball_exit.median() > audit.level_hit.median());
        assert!(audit.ball_exit.dominated);
        let s: Vec<f64> = audit.ball_exit.survival.iter().map(|p| p.1).collect();
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn checkpointed_tmix_matches_stepwise() {
        let chain = SegmentChainSpec::new(4, 0.2).unwrap();
        let env = Environment::sample(chain.n(), 3);
        let bar = model0_kernel(&chain.build().unwrap(), &env).unwrap();
        let pi = stationary_direct(&bar).unwrap();
        for x in [0, 5, 17] {
            let prof = crate::mixing::mixing_profile(&bar, &pi, x, &[0.25], 100_000).unwrap();
            assert_eq!(typical_tmix(&bar, &pi, x, 0.25, 16).unwrap(), prof.tmix(0.25).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn rows_are_stochastic(copies in 1usize..6, delta in 0.01f64..0.99) {
            let spec = build_counterexample(copies, delta).unwrap();
            prop_assert!(spec.kernel().row_sum_error() < 1e-12);
            let env = Environment::sample(spec.n, copies as u64);
            let bar = model0_kernel(&spec, &env).unwrap();
            prop_assert!(bar.row_sum_error() < 1e-12);
        }

        #[test]
        fn gambler_ruin_solves_recursion(delta in 0.02f64..0.6, l in 2usize..8) {
            // h(k) = delta h(k+1) + left h(k-1) + (1 - delta - left) h(k), h(0)=0, h(l)=1.
            let rho = (1.0 - delta) / (2.0 * delta);
            let h = |k: usize| if (rho - 1.0).abs() < 1e-12 { k as f64 / l as f64 }
                else { (rho.powi(k as i32) - 1.0) / (rho.powi(l as i32) - 1.0) };
            let left = (1.0 - delta) / 2.0;
            for k in 1..l {
                let rhs = delta * h(k + 1) + left * h(k - 1) + (1.0 - delta - left) * h(k);
                prop_assert!((rhs - h(k)).abs() < 1e-9 * (1.0 + h(k)));
            }
            prop_assert!((gambler_ruin_probability(delta, l) - h(1)).abs() < 1e-12);
        }
    }
}
