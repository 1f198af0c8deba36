//! Chain data, random environment, and the lifted and projected kernels.
//!
//! States are 0-based. The lifted space is `V = 0..2n` with the first side
//! `0..n` and the second side `n..2n`. Time is counted in ticks: an even tick
//! is followed by the matching half step, an odd tick by a small-range step.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{sample_row, StochasticMatrix, ROW_TOL};
use crate::rng::task_rng;

/// Which block of the lifted space a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    One,
    Two,
}

/// Mixing probabilities `p(x, y)` for `x` on side one and `y` on side two.
#[derive(Debug, Clone, PartialEq)]
pub enum PTable {
    Constant(f64),
    /// Row-major `n * n`: entry `i * n + j` is `p(i, n + j)`.
    Table(Vec<f64>),
}

impl PTable {
    fn get(&self, n: usize, i: usize, j: usize) -> f64 {
        match self {
            PTable::Constant(c) => *c,
            PTable::Table(t) => t[i * n + j],
        }
    }
}

/// Deterministic chain data: the two blocks, the mixing table and declared bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub n: usize,
    pub p1: StochasticMatrix,
    pub p2: StochasticMatrix,
    pub p: PTable,
    pub delta_floor: f64,
    pub degree_bound: usize,
    kernel: StochasticMatrix,
}

impl MixtureSpec {
    pub fn new(
        p1: StochasticMatrix,
        p2: StochasticMatrix,
        p: PTable,
        delta_floor: f64,
        degree_bound: usize,
    ) -> Result<Self> {
        let n = p1.n();
        if n == 0 {
            return Err(Error::Invalid("side size must be at least 1".into()));
        }
        if p2.n() != n {
            return Err(Error::Dimension { expected: n, found: p2.n() });
        }
        p1.validate()?;
        p2.validate()?;
        match &p {
            PTable::Constant(c) => check_prob(*c, 0, 0)?,
            PTable::Table(t) => {
                if t.len() != n * n {
                    return Err(Error::Dimension { expected: n * n, found: t.len() });
                }
                for (k, &v) in t.iter().enumerate() {
                    check_prob(v, k / n, k % n)?;
                }
            }
        }
        if !(delta_floor > 0.0 && delta_floor <= 1.0) {
            return Err(Error::Invalid(format!("delta_floor {delta_floor} outside (0, 1]")));
        }
        let shifted = p2.triplets().into_iter().map(|(i, j, v)| (i + n, j + n, v));
        let kernel = StochasticMatrix::from_triplets(2 * n, p1.triplets().into_iter().chain(shifted))?;
        Ok(Self { n, p1, p2, p, delta_floor, degree_bound, kernel })
    }

    /// Number of lifted states `2n`.
    pub fn size(&self) -> usize {
        2 * self.n
    }

    pub fn side(&self, x: usize) -> Side {
        if x < self.n {
            Side::One
        } else {
            Side::Two
        }
    }

    /// `p(x, y)` for states on opposite sides; `p(y, x) = 1 - p(x, y)`.
    pub fn p(&self, x: usize, y: usize) -> f64 {
        debug_assert_ne!(self.side(x), self.side(y));
        if x < self.n {
            self.p.get(self.n, x, y - self.n)
        } else {
            1.0 - self.p.get(self.n, y, x - self.n)
        }
    }

    /// The block-diagonal kernel `P` on the lifted space.
    pub fn kernel(&self) -> &StochasticMatrix {
        &self.kernel
    }

    /// Forward reachable set of `x` under `P`.
    pub fn reach(&self, x: usize) -> Vec<usize> {
        self.kernel.reach(x)
    }

    pub fn to_toml(&self) -> String {
        let entries = |m: &StochasticMatrix| {
            m.triplets()
                .into_iter()
                .map(|(row, col, prob)| EntryFile { row, col, prob })
                .collect()
        };
        let p = match &self.p {
            PTable::Constant(c) => PFile { constant: Some(*c), table: None },
            PTable::Table(t) => PFile {
                constant: None,
                table: Some(t.chunks(self.n).map(|r| r.to_vec()).collect()),
            },
        };
        let file = SpecFile {
            n: self.n,
            delta_floor: self.delta_floor,
            degree_bound: self.degree_bound,
            p,
            p1: entries(&self.p1),
            p2: entries(&self.p2),
        };
        toml::to_string(&file).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: SpecFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let trip = |v: &[EntryFile]| v.iter().map(|e| (e.row, e.col, e.prob)).collect::<Vec<_>>();
        let p1 = StochasticMatrix::from_triplets(f.n, trip(&f.p1))?;
        let p2 = StochasticMatrix::from_triplets(f.n, trip(&f.p2))?;
        let p = match (f.p.constant, f.p.table) {
            (Some(c), None) => PTable::Constant(c),
            (None, Some(rows)) => {
                if rows.len() != f.n || rows.iter().any(|r| r.len() != f.n) {
                    return Err(Error::Parse(format!("p table must be {0} x {0}", f.n)));
                }
                PTable::Table(rows.concat())
            }
            _ => return Err(Error::Parse("p needs exactly one of `constant` or `table`".into())),
        };
        Self::new(p1, p2, p, f.delta_floor, f.degree_bound)
    }
}

fn check_prob(v: f64, row: usize, col: usize) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Entry { row, col, value: v })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    n: usize,
    delta_floor: f64,
    degree_bound: usize,
    p: PFile,
    #[serde(rename = "P1")]
    p1: Vec<EntryFile>,
    #[serde(rename = "P2")]
    p2: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    table: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    row: usize,
    col: usize,
    prob: f64,
}

/// The random matching: `sigma[i]` is the side-two partner of side-one state `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    pub n: usize,
    pub seed: u64,
    sigma: Vec<usize>,
    eta: Vec<usize>,
}

impl Environment {
    /// Build from an explicit bijection onto `n..2n`.
    pub fn from_sigma(n: usize, sigma: Vec<usize>, seed: u64) -> Result<Self> {
        if sigma.len() != n {
            return Err(Error::Dimension { expected: n, found: sigma.len() });
        }
        let mut eta = vec![usize::MAX; 2 * n];
        for (i, &s) in sigma.iter().enumerate() {
            if s < n || s >= 2 * n || eta[s] != usize::MAX {
                return Err(Error::Invalid(format!("sigma is not a bijection onto the second side at {i}")));
            }
            eta[i] = s;
            eta[s] = i;
        }
        Ok(Self { n, seed, sigma, eta })
    }

    /// Uniform bijection by a seeded Fisher-Yates shuffle.
    pub fn sample(n: usize, seed: u64) -> Self {
        let mut rng = task_rng(seed, 0);
        let mut sigma: Vec<usize> = (n..2 * n).collect();
        sigma.shuffle(&mut rng);
        Self::from_sigma(n, sigma, seed).expect("shuffle is a bijection")
    }

    /// The identity-like matching `i -> n + i`.
    pub fn aligned(n: usize) -> Self {
        Self::from_sigma(n, (n..2 * n).collect(), 0).expect("aligned matching")
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    /// Partner of any lifted state.
    #[inline]
    pub fn eta(&self, x: usize) -> usize {
        self.eta[x]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&EnvFile { n: self.n, seed: self.seed, sigma: self.sigma.clone() })
            .expect("environment serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: EnvFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_sigma(f.n, f.sigma, f.seed)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    n: usize,
    seed: u64,
    sigma: Vec<usize>,
}

/// The lifted chain on `V` together with its two half steps.
#[derive(Debug, Clone)]
pub struct LiftedKernel {
    pub scp: StochasticMatrix,
    /// `p(x, eta(x))` for every lifted state; the jump probability is its complement.
    pub stay: Vec<f64>,
    /// The small-range step `P`.
    pub second_half: StochasticMatrix,
    eta: Vec<usize>,
}

impl LiftedKernel {
    #[inline]
    pub fn eta(&self, x: usize) -> usize {
        self.eta[x]
    }

    pub fn size(&self) -> usize {
        self.eta.len()
    }

    /// Half-step matrix: stay with `p(x, eta(x))`, jump to `eta(x)` otherwise.
    pub fn half_step_matrix(&self) -> StochasticMatrix {
        let t = (0..self.size()).flat_map(|x| {
            [(x, x, self.stay[x]), (x, self.eta[x], 1.0 - self.stay[x])]
        });
        StochasticMatrix::from_triplets(self.size(), t).expect("half step is stochastic")
    }
}

pub fn build_lifted_kernel(spec: &MixtureSpec, env: &Environment) -> Result<LiftedKernel> {
    if env.n != spec.n {
        return Err(Error::Dimension { expected: spec.n, found: env.n });
    }
    let p = spec.kernel();
    let size = spec.size();
    let stay: Vec<f64> = (0..size).map(|x| spec.p(x, env.eta(x))).collect();
    let mut t = Vec::with_capacity(2 * p.nnz());
    for x in 0..size {
        let s = stay[x];
        for (y, v) in p.row(x) {
            t.push((x, y, s * v));
        }
        for (y, v) in p.row(env.eta(x)) {
            t.push((x, y, (1.0 - s) * v));
        }
    }
    let scp = StochasticMatrix::from_triplets(size, t)?;
    Ok(LiftedKernel { scp, stay, second_half: p.clone(), eta: (0..size).map(|x| env.eta(x)).collect() })
}

/// The chain on `[n]` obtained by identifying `x` with `eta(x)`.
#[derive(Debug, Clone)]
pub struct ProjectedKernel {
    pub bar: StochasticMatrix,
}

/// Entry-wise tolerance for the projection identity.
pub const IDENTITY_TOL: f64 = 1e-12;

/// Project the lifted kernel and check it against the direct mixture kernel.
pub fn project_kernel(spec: &MixtureSpec, lift: &LiftedKernel, env: &Environment) -> Result<ProjectedKernel> {
    let n = spec.n;
    let mut t = Vec::with_capacity(lift.scp.nnz());
    for x in 0..n {
        for (y, v) in lift.scp.row(x) {
            let j = if y < n { y } else { env.eta(y) };
            t.push((x, j, v));
        }
    }
    let bar = StochasticMatrix::from_triplets(n, t)?;
    let direct = model0_kernel(spec, env)?;
    let gap = max_entry_gap(&bar, &direct);
    if gap > IDENTITY_TOL {
        return Err(Error::Identity(format!("projection differs from the mixture kernel by {gap:e}")));
    }
    Ok(ProjectedKernel { bar })
}

/// The mixture kernel `p P1(x, y) + q P2(sigma x, sigma y)` built directly.
pub fn model0_kernel(spec: &MixtureSpec, env: &Environment) -> Result<StochasticMatrix> {
    let n = spec.n;
    let mut t = Vec::new();
    for x in 0..n {
        let sx = env.eta(x);
        let p = spec.p(x, sx);
        for (y, v) in spec.p1.row(x) {
            t.push((x, y, p * v));
        }
        for (k, v) in spec.p2.row(sx - n) {
            t.push((x, env.eta(n + k), (1.0 - p) * v));
        }
    }
    StochasticMatrix::from_triplets(n, t)
}

/// Largest absolute entry difference over the union of supports.
pub fn max_entry_gap(a: &StochasticMatrix, b: &StochasticMatrix) -> f64 {
    let mut gap: f64 = 0.0;
    for i in 0..a.n() {
        for (j, v) in a.row(i) {
            gap = gap.max((v - b.get(i, j)).abs());
        }
        for (j, v) in b.row(i) {
            gap = gap.max((v - a.get(i, j)).abs());
        }
    }
    gap
}

/// One tick of the lifted chain. Even ticks take the matching half step,
/// odd ticks take a `P` step.
#[inline]
pub fn step<R: Rng + ?Sized>(lift: &LiftedKernel, state: usize, tick: u64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if tick % 2 == 0 {
        if u < lift.stay[state] {
            state
        } else {
            lift.eta(state)
        }
    } else {
        let p = &lift.second_half;
        sample_row(p.row_cols(state), p.row_vals(state), u)
    }
}

/// Result of checking the structural hypotheses on a spec.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    /// Smallest nonzero entry among `P1`, `P2`, `p` and `q`.
    pub delta: f64,
    pub delta_ok: bool,
    /// Largest degree in the graph of `P` plus the matching edge.
    pub degree: usize,
    pub degree_ok: bool,
    pub reach_min_side_one: usize,
    pub reach_min_side_two: usize,
    pub reach_ok: bool,
    /// States whose reachable set is below the threshold (3 on side one, 2 on side two).
    pub reach_violations: Vec<usize>,
    /// `(l, |S(l)|, |S(l)| / 2n)` for `l = 1..=l_max`.
    pub return_sets: Vec<(usize, usize, f64)>,
    pub warnings: Vec<String>,
}

/// Check lower bounds on probabilities, degrees, reachable-set sizes and
/// short returns. `S(l)` collects states `x` such that every `y` with
/// `P(x, y) > 0` can come back to `x` within `l` steps.
pub fn validate_hypotheses(spec: &MixtureSpec, l_max: usize) -> HypothesisReport {
    let p = spec.kernel();
    let size = spec.size();
    let mut delta = p.min_positive();
    let mut probe = |v: f64| {
        if v > 0.0 {
            delta = delta.min(v);
        }
    };
    match &spec.p {
        PTable::Constant(c) => {
            probe(*c);
            probe(1.0 - c);
        }
        PTable::Table(t) => t.iter().for_each(|&v| {
            probe(v);
            probe(1.0 - v);
        }),
    }
    let degree = p.max_out_degree().max(p.max_in_degree()) + 1;
    let mut warnings = Vec::new();
    let delta_ok = delta + 1e-15 >= spec.delta_floor;
    if !delta_ok {
        warnings.push(format!("smallest probability {delta} below declared floor {}", spec.delta_floor));
    }
    let degree_ok = degree <= spec.degree_bound;
    if !degree_ok {
        warnings.push(format!("degree {degree} above declared bound {}", spec.degree_bound));
    }
    let mut reach_min = [usize::MAX; 2];
    let mut reach_violations = Vec::new();
    for x in 0..size {
        let r = p.reach(x).len();
        let (k, need) = if x < spec.n { (0, 3) } else { (1, 2) };
        reach_min[k] = reach_min[k].min(r);
        if r < need {
            reach_violations.push(x);
        }
    }
    if !reach_violations.is_empty() {
        warnings.push(format!("{} states reach too few states", reach_violations.len()));
    }
    let pred = p.predecessors();
    let return_sets = (1..=l_max)
        .map(|l| {
            let count = (0..size).filter(|&x| returns_within(&pred, p, x, l)).count();
            (l, count, count as f64 / size as f64)
        })
        .collect();
    HypothesisReport {
        delta,
        delta_ok,
        degree,
        degree_ok,
        reach_min_side_one: reach_min[0],
        reach_min_side_two: reach_min[1],
        reach_ok: reach_violations.is_empty(),
        reach_violations,
        return_sets,
        warnings,
    }
}

/// Every successor of `x` reaches `x` back within `l` steps.
fn returns_within(pred: &[Vec<usize>], p: &StochasticMatrix, x: usize, l: usize) -> bool {
    // Backward ball of x of radius l.
    let mut dist = std::collections::HashMap::new();
    dist.insert(x, 0usize);
    let mut frontier = vec![x];
    for d in 1..=l {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in &pred[u] {
                if !dist.contains_key(&w) {
                    dist.insert(w, d);
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    p.row_cols(x).iter().all(|y| dist.contains_key(y))
}

/// The demo family: on side one, blocks of three states each moving uniformly
/// to the other members of its block; on side two, lazy flip pairs. A leftover
/// state joins the last block. `p` is constant 1/2.
pub fn demo_spec(n: usize) -> Result<MixtureSpec> {
    if n < 3 {
        return Err(Error::Invalid("demo family needs n >= 3".into()));
    }
    let mut t1 = Vec::new();
    for (start, len) in blocks(n, 3) {
        for i in start..start + len {
            for j in start..start + len {
                if i != j {
                    t1.push((i, j, 1.0 / (len - 1) as f64));
                }
            }
        }
    }
    let mut t2 = Vec::new();
    for (start, len) in blocks(n, 2) {
        for i in start..start + len {
            for j in start..start + len {
                t2.push((i, j, 1.0 / len as f64));
            }
        }
    }
    let p1 = StochasticMatrix::from_triplets(n, t1)?;
    let p2 = StochasticMatrix::from_triplets(n, t2)?;
    let delta = p1.min_positive().min(p2.min_positive()).min(0.5);
    let degree = p1.max_out_degree().max(p2.max_out_degree()).max(p1.max_in_degree()).max(p2.max_in_degree()) + 1;
    MixtureSpec::new(p1, p2, PTable::Constant(0.5), delta, degree)
}

/// Split `0..n` into blocks of `size`, the last one absorbing the remainder.
fn blocks(n: usize, size: usize) -> Vec<(usize, usize)> {
    let count = (n / size).max(1);
    (0..count)
        .map(|b| {
            let start = b * size;
            let len = if b + 1 == count { n - start } else { size };
            (start, len)
        })
        .collect()
}

/// A random spec with sparse random rows and a random `p` table, for identity checks.
pub fn random_spec(n: usize, seed: u64) -> MixtureSpec {
    let mut rng = task_rng(seed, 1);
    let block = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = Vec::new();
        for i in 0..n {
            let k = rng.random_range(1..=3.min(n));
            let mut cols: Vec<usize> = (0..n).collect();
            cols.shuffle(rng);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            let mut acc = 0.0;
            for (m, &c) in cols[..k].iter().enumerate() {
                let v = if m + 1 == k { 1.0 - acc } else { w[m] / s };
                acc += v;
                t.push((i, c, v));
            }
        }
        StochasticMatrix::from_triplets(n, t).expect("random rows are stochastic")
    };
    let p1 = block(&mut rng);
    let p2 = block(&mut rng);
    let table: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.05..0.95)).collect();
    MixtureSpec::new(p1, p2, PTable::Table(table), 0.001, 4).expect("random spec is valid")
}

/// Check that two half steps compose to the lifted kernel (floating point).
pub fn half_step_gap(lift: &LiftedKernel) -> f64 {
    let h = lift.half_step_matrix();
    let mut t = Vec::new();
    for x in 0..lift.size() {
        for (m, a) in h.row(x) {
            for (y, b) in lift.second_half.row(m) {
                t.push((x, y, a * b));
            }
        }
    }
    let comp = StochasticMatrix::substochastic(lift.size(), t).expect("product");
    max_entry_gap(&comp, &lift.scp)
}

/// Rows of a matrix sum to 1 within tolerance.
pub fn rows_ok(m: &StochasticMatrix) -> bool {
    m.row_sum_error() <= ROW_TOL
}
