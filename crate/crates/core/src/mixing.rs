//! Exact distribution evolution, total variation, stationary laws, mixing
//! profiles and cutoff scans.

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::sparse_solve;
use crate::matrix::StochasticMatrix;
use crate::model::{build_lifted_kernel, project_kernel, Environment, MixtureSpec};
use crate::rng::task_rng;
use crate::stats::{linear_fit, mean};

/// `1/2 sum |mu - nu|`.
pub fn tv_distance(mu: &[f64], nu: &[f64]) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(Error::Dimension { expected: mu.len(), found: nu.len() });
    }
    Ok(0.5 * mu.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Strongly connected components that no edge leaves, each sorted.
pub fn recurrent_classes(k: &StochasticMatrix) -> Vec<Vec<usize>> {
    let comps = strong_components(k);
    let mut id = vec![0usize; k.n()];
    for (c, comp) in comps.iter().enumerate() {
        for &v in comp {
            id[v] = c;
        }
    }
    comps
        .into_iter()
        .enumerate()
        .filter(|(c, comp)| comp.iter().all(|&v| k.row_cols(v).iter().all(|&w| id[w] == *c)))
        .map(|(_, comp)| comp)
        .collect()
}

/// All strongly connected components, each sorted, in no particular order.
pub fn strong_components(k: &StochasticMatrix) -> Vec<Vec<usize>> {
    let mut g = DiGraph::<(), ()>::with_capacity(k.n(), k.nnz());
    let nodes: Vec<_> = (0..k.n()).map(|_| g.add_node(())).collect();
    for (i, j, _) in k.triplets() {
        g.add_edge(nodes[i], nodes[j], ());
    }
    tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

fn single_recurrent_class(k: &StochasticMatrix) -> Result<()> {
    let classes = recurrent_classes(k).len();
    if classes != 1 {
        return Err(Error::NotIrreducible { classes });
    }
    Ok(())
}

/// Power iteration on `(I + K) / 2` from the uniform law until `||pi K - pi||_1 <= tol`.
pub fn stationary_distribution(k: &StochasticMatrix, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    single_recurrent_class(k)?;
    let n = k.n();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..max_iter {
        k.apply_left(&pi, &mut next);
        let res: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        if res <= tol {
            return Ok(pi);
        }
        for (p, q) in pi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + q);
        }
    }
    Err(Error::Budget(format!("power iteration did not reach {tol:e} in {max_iter} steps")))
}

/// Stationary law by a sparse direct solve of `pi (I - K) = 0`, `sum pi = 1`.
pub fn stationary_direct(k: &StochasticMatrix) -> Result<Vec<f64>> {
    single_recurrent_class(k)?;
    let n = k.n();
    let mut t = Vec::with_capacity(k.nnz() + 2 * n);
    for (i, j, v) in k.triplets() {
        if j != 0 {
            t.push((j, i, -v));
        }
    }
    for i in 1..n {
        t.push((i, i, 1.0));
    }
    for j in 0..n {
        t.push((0, j, 1.0));
    }
    let mut b = vec![0.0; n];
    b[0] = 1.0;
    let mut pi = sparse_solve(n, &t, &[b])?.remove(0);
    for v in pi.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= s);
    Ok(pi)
}

/// `||pi K - pi||_1`.
pub fn stationarity_residual(k: &StochasticMatrix, pi: &[f64]) -> f64 {
    let mut out = vec![0.0; pi.len()];
    k.apply_left(pi, &mut out);
    out.iter().zip(pi).map(|(a, b)| (a - b).abs()).sum()
}

/// One row of the mixing-time table.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Tmix {
    pub eps: f64,
    /// First `t` with distance below `eps`, `None` when not reached by `t_max`.
    pub t: Option<usize>,
}

/// Distance to stationarity from one start, `tv_curve[t]` for `t = 0..`.
#[derive(Debug, Clone, Serialize)]
pub struct MixingProfile {
    pub start: usize,
    pub tv_curve: Vec<f64>,
    pub tmix: Vec<Tmix>,
    /// Some threshold was not reached by `t_max`; its `t` is a lower-bound flag.
    pub censored: bool,
}

impl MixingProfile {
    pub fn tmix(&self, eps: f64) -> Option<usize> {
        self.tmix.iter().find(|m| m.eps == eps).and_then(|m| m.t)
    }
}

/// Evolve `delta_x` exactly and record the distance to `pi` at every step
/// until every threshold is crossed or `t_max` is reached.
pub fn mixing_profile(k: &StochasticMatrix, pi: &[f64], x: usize, eps_list: &[f64], t_max: usize) -> Result<MixingProfile> {
    if pi.len() != k.n() {
        return Err(Error::Dimension { expected: k.n(), found: pi.len() });
    }
    if x >= k.n() {
        return Err(Error::Invalid(format!("start {x} outside 0..{}", k.n())));
    }
    let mut mu = vec![0.0; k.n()];
    mu[x] = 1.0;
    let mut next = vec![0.0; k.n()];
    let mut tmix: Vec<Tmix> = eps_list.iter().map(|&eps| Tmix { eps, t: None }).collect();
    let mut tv_curve = Vec::new();
    for t in 0..=t_max {
        let d = tv_distance(&mu, pi)?;
        tv_curve.push(d);
        for m in tmix.iter_mut().filter(|m| m.t.is_none()) {
            if d < m.eps {
                m.t = Some(t);
            }
        }
        if tmix.iter().all(|m| m.t.is_some()) {
            break;
        }
        k.apply_left(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
    }
    let censored = tmix.iter().any(|m| m.t.is_none());
    Ok(MixingProfile { start: x, tv_curve, tmix, censored })
}

/// Which chain a cutoff scan evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScanChain {
    Lifted,
    Projected,
}

/// Averages at one side size.
#[derive(Debug, Clone, Serialize)]
pub struct CutoffRecord {
    pub n: usize,
    pub environments: usize,
    pub skipped: usize,
    pub starts: usize,
    pub tmix_eps: f64,
    pub tmix_one_minus_eps: f64,
    /// Mean of `(t(eps) - t(1 - eps)) / t(eps)` over starts.
    pub window_ratio: f64,
    pub window: f64,
    pub window_over_sqrt_log: f64,
    /// `log n / t(eps)`.
    pub h_from_tmix: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffScanResult {
    pub eps: f64,
    pub chain: ScanChain,
    pub records: Vec<CutoffRecord>,
    /// `1 / slope` of `t(eps)` against `log n`.
    pub h_hat: f64,
    pub fit_r2: f64,
    /// Largest `window / sqrt(log n)` over the grid.
    pub window_constant: f64,
}

/// Settings for a cutoff scan.
#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub eps: f64,
    pub seeds: u64,
    pub starts: usize,
    pub t_max: usize,
    pub chain: ScanChain,
    pub seed: u64,
}

/// Mixing-time statistics across side sizes, typical starts drawn uniformly.
pub fn cutoff_scan<F>(family: F, n_grid: &[usize], cfg: &ScanConfig) -> Result<CutoffScanResult>
where
    F: Fn(usize) -> Result<MixtureSpec>,
{
    let lo = cfg.eps.min(1.0 - cfg.eps);
    let hi = cfg.eps.max(1.0 - cfg.eps);
    let mut records = Vec::new();
    for &n in n_grid {
        let spec = family(n)?;
        let (mut a, mut b, mut ratio) = (Vec::new(), Vec::new(), Vec::new());
        let (mut used, mut skipped) = (0, 0);
        for s in 0..cfg.seeds {
            let env_seed = cfg.seed.wrapping_add(s);
            let env = Environment::sample(n, env_seed);
            let lift = build_lifted_kernel(&spec, &env)?;
            let k = match cfg.chain {
                ScanChain::Lifted => lift.scp.clone(),
                ScanChain::Projected => project_kernel(&spec, &lift, &env)?.bar,
            };
            let pi = match stationary_distribution(&k, 1e-13, 1_000_000) {
                Ok(pi) => pi,
                Err(Error::NotIrreducible { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            used += 1;
            let mut rng = task_rng(env_seed, 1000 + n as u64);
            for _ in 0..cfg.starts {
                let x = rng.random_range(0..k.n());
                let prof = mixing_profile(&k, &pi, x, &[lo, hi], cfg.t_max)?;
                let (Some(t_lo), Some(t_hi)) = (prof.tmix(lo), prof.tmix(hi)) else {
                    return Err(Error::Budget(format!("mixing not reached by t_max = {} at n = {n}", cfg.t_max)));
                };
                a.push(t_lo as f64);
                b.push(t_hi as f64);
                ratio.push((t_lo as f64 - t_hi as f64) / t_lo as f64);
            }
        }
        let ln = (n as f64).ln();
        let window = mean(&a) - mean(&b);
        records.push(CutoffRecord {
            n,
            environments: used,
            skipped,
            starts: a.len(),
            tmix_eps: mean(&a),
            tmix_one_minus_eps: mean(&b),
            window_ratio: mean(&ratio),
            window,
            window_over_sqrt_log: window / ln.sqrt(),
            h_from_tmix: ln / mean(&a),
        });
    }
    let xs: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.tmix_eps).collect();
    let (h_hat, fit_r2) = if records.len() >= 2 {
        let f = linear_fit(&xs, &ys);
        (1.0 / f.slope, f.r2)
    } else {
        (f64::NAN, f64::NAN)
    };
    let window_constant = records.iter().map(|r| r.window_over_sqrt_log).fold(0.0, f64::max);
    Ok(CutoffScanResult { eps: cfg.eps, chain: cfg.chain, records, h_hat, fit_r2, window_constant })
}

/// Split of a stationary law at the level `(log n)^b / n`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Flatness {
    pub mass_small: f64,
    pub l2_small: f64,
    pub mass_large: f64,
}

pub fn l2_flatness(pi: &[f64], b: f64, n: usize) -> Flatness {
    let level = (n as f64).ln().powf(b) / n as f64;
    let mut f = Flatness { mass_small: 0.0, l2_small: 0.0, mass_large: 0.0 };
    for &v in pi {
        if v <= level {
            f.mass_small += v;
            f.l2_small += v * v;
        } else {
            f.mass_large += v;
        }
    }
    f
}
