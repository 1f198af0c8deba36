//! Invariant and quasi-stationary measures of `P` per communicating class,
//! the center weights, the multiplicative field on the matching tree, and
//! stationarity checks of the resulting tree measure.

use std::collections::{HashMap, HashSet, VecDeque};

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{rational, stationary_rational, EXACT_MAX_N};
use crate::matrix::StochasticMatrix;
use crate::mixing::{stationary_direct, strong_components};
use crate::model::MixtureSpec;
use crate::quasitree::LazyQuasiTree;

/// Measure of one communicating class of `P`, normalized to a probability.
#[derive(Debug, Clone, Serialize)]
pub struct ClassInfo {
    pub states: Vec<usize>,
    pub recurrent: bool,
    /// 1 for recurrent classes, the Perron root of the restricted block otherwise.
    pub lambda: f64,
    pub measure: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMeasure {
    pub classes: Vec<ClassInfo>,
    pub class_of: Vec<usize>,
    /// Per-state value of its class measure.
    pub pi: Vec<f64>,
}

impl ClassMeasure {
    /// Largest `|(mu Q_B)(y) - lambda mu(y)|` over every class.
    pub fn residual(&self, p: &StochasticMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for (c, info) in self.classes.iter().enumerate() {
            let mut out: HashMap<usize, f64> = HashMap::new();
            for (&x, &m) in info.states.iter().zip(&info.measure) {
                for (y, v) in p.row(x) {
                    if self.class_of[y] == c {
                        *out.entry(y).or_default() += m * v;
                    }
                }
            }
            for (&y, &m) in info.states.iter().zip(&info.measure) {
                let got = out.get(&y).copied().unwrap_or(0.0);
                worst = worst.max((got - info.lambda * m).abs());
            }
        }
        worst
    }

    pub fn recurrent_count(&self) -> usize {
        self.classes.iter().filter(|c| c.recurrent).count()
    }
}

/// Sort classes by smallest state so the output does not depend on the SCC order.
fn sorted_components(p: &StochasticMatrix) -> Vec<Vec<usize>> {
    let mut comps = strong_components(p);
    comps.sort_unstable_by_key(|c| c[0]);
    comps
}

/// Invariant probability on each recurrent class and Perron left eigenvector
/// on each transient class.
pub fn class_measures(p: &StochasticMatrix) -> Result<ClassMeasure> {
    let comps = sorted_components(p);
    let mut class_of = vec![0usize; p.n()];
    for (c, comp) in comps.iter().enumerate() {
        for &v in comp {
            class_of[v] = c;
        }
    }
    let mut pi = vec![0.0; p.n()];
    let mut classes = Vec::with_capacity(comps.len());
    for (c, states) in comps.into_iter().enumerate() {
        let local: HashMap<usize, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut block = Vec::new();
        let mut closed = true;
        for (i, &s) in states.iter().enumerate() {
            for (y, v) in p.row(s) {
                if class_of[y] == c {
                    block.push((i, local[&y], v));
                } else if v > 0.0 {
                    closed = false;
                }
            }
        }
        let k = states.len();
        let (measure, lambda) = if closed {
            let m = StochasticMatrix::from_triplets(k, block)?;
            (stationary_direct(&m)?, 1.0)
        } else {
            let m = StochasticMatrix::substochastic(k, block)?;
            perron_left(&m)?
        };
        for (&s, &v) in states.iter().zip(&measure) {
            pi[s] = v;
        }
        classes.push(ClassInfo { states, recurrent: closed, lambda, measure });
    }
    Ok(ClassMeasure { classes, class_of, pi })
}

/// Perron root and left eigenvector (a probability) of an irreducible
/// substochastic block, by power iteration on `Q + I`.
fn perron_left(q: &StochasticMatrix) -> Result<(Vec<f64>, f64)> {
    let k = q.n();
    let mut mu = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    for _ in 0..1_000_000 {
        q.apply_left(&mu, &mut next);
        for (a, b) in next.iter_mut().zip(&mu) {
            *a += b;
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let diff: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if diff < 1e-15 {
            q.apply_left(&mu, &mut next);
            let lambda = next.iter().sum::<f64>() / mu.iter().sum::<f64>();
            return Ok((mu, lambda));
        }
    }
    Err(Error::Budget("quasi-stationary iteration did not converge".into()))
}

/// Weight of a center of type `center` matched to a vertex of type `partner`:
/// the flow into the center across the edge over the flow out of it.
pub fn center_weight_a(spec: &MixtureSpec, pi: &[f64], center: usize, partner: usize) -> Result<f64> {
    let out = pi[center] * (1.0 - spec.p(center, partner));
    let inflow = pi[partner] * (1.0 - spec.p(partner, center));
    if pi[center] <= 0.0 || pi[partner] <= 0.0 {
        return Err(Error::Invalid(format!("zero measure at edge ({center}, {partner}); use a quasi-stationary extension")));
    }
    if out <= 0.0 || inflow <= 0.0 {
        return Err(Error::Invalid(format!("edge ({center}, {partner}) is never crossed in one direction")));
    }
    Ok(inflow / out)
}

/// Edge weight for a skeleton label `(u, v)`: `v` departs a component whose center is `u`.
pub fn label_weight(spec: &MixtureSpec, pi: &[f64], u: usize, u_partner: usize, v: usize, v_partner: usize) -> f64 {
    (pi[v] * (1.0 - spec.p(v, v_partner))) / (pi[u] * (1.0 - spec.p(u, u_partner)))
}

/// One vertex of a truncated tree with its field and measure.
#[derive(Debug, Clone, Serialize)]
pub struct NuVertex {
    pub comp: usize,
    pub depth: usize,
    pub label: Vec<usize>,
    pub ty: usize,
    pub center: bool,
    pub z: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NuReport {
    pub depth: usize,
    pub vertices: Vec<NuVertex>,
    /// Per component, indexed like the tree.
    pub z: Vec<f64>,
    pub interior: usize,
    pub excluded: usize,
    /// `max |sum_x nu(x) K(x, y) - nu(y)|` over interior `y`.
    pub residual_abs: f64,
    /// Same divided by `nu(y)`.
    pub residual_rel: f64,
    /// Largest relative gap between the field and the boundary factor times the reduced field.
    pub z_alternative_gap: f64,
}

/// Field value of every materialized component.
pub fn z_field(tree: &LazyQuasiTree<'_>, pi: &[f64]) -> Result<Vec<f64>> {
    let spec = tree.spec();
    let mut z = vec![1.0; tree.comps().len()];
    for (c, comp) in tree.comps().iter().enumerate().skip(1) {
        let (parent, dep) = comp.parent.expect("child");
        z[c] = z[parent] * center_weight_a(spec, pi, comp.center.expect("child"), dep)?;
    }
    Ok(z)
}

/// Reduced field: product of label weights between consecutive centers.
pub fn z_alternative(tree: &LazyQuasiTree<'_>, pi: &[f64], c: usize) -> f64 {
    let spec = tree.spec();
    let mut zp = 1.0;
    let mut cur = c;
    while let Some((parent, dep)) = tree.comp(cur).parent {
        if let Some(u) = tree.comp(parent).center {
            let u_partner = tree.comp(parent).parent.expect("centered").1;
            let v_partner = tree.comp(cur).center.expect("child");
            zp *= label_weight(spec, pi, u, u_partner, dep, v_partner);
        }
        cur = parent;
    }
    zp
}

/// Boundary factor linking the reduced field to the full one.
fn boundary_factor(tree: &LazyQuasiTree<'_>, pi: &[f64], c: usize) -> f64 {
    let spec = tree.spec();
    if c == 0 {
        return 1.0;
    }
    let first = tree.ancestor(c, 1);
    let x1 = tree.comp(first).center.expect("child");
    let e1 = tree.comp(first).parent.expect("child").1;
    let xk = tree.comp(c).center.expect("child");
    let ek = tree.comp(c).parent.expect("child").1;
    (pi[e1] * (1.0 - spec.p(e1, x1))) / (pi[xk] * (1.0 - spec.p(xk, ek)))
}

/// Materialize the tree to `depth`, build `nu = Z * pi` on every vertex and
/// check balance at every vertex whose component has depth below `depth`.
pub fn nu_measure(tree: &mut LazyQuasiTree<'_>, depth: usize, pi: &[f64]) -> Result<NuReport> {
    tree.materialize_to_depth(depth);
    let spec = tree.spec();
    let p = spec.kernel();
    let z = z_field(tree, pi)?;
    let n_comps = tree.comps().len();
    let mut nu: HashMap<(usize, usize), f64> = HashMap::new();
    let mut vertices = Vec::new();
    for c in 0..n_comps {
        let d = tree.comp(c).depth;
        let label = tree.label((c, 0)).prefix;
        for t in tree.members(c) {
            let v = z[c] * pi[t];
            nu.insert((c, t), v);
            vertices.push(NuVertex { comp: c, depth: d, label: label.clone(), ty: t, center: tree.is_center((c, t)), z: z[c], nu: v });
        }
    }
    let mut inflow: HashMap<(usize, usize), f64> = HashMap::new();
    for (&(c, t), &m) in &nu {
        let partner = if tree.is_center((c, t)) {
            tree.comp(c).parent
        } else {
            tree.existing_child((c, t)).map(|k| (k, tree.comp(k).center.expect("child")))
        };
        let Some((pc, pt)) = partner else { continue };
        let stay = spec.p(t, pt);
        for (y, v) in p.row(t) {
            *inflow.entry((c, y)).or_default() += m * stay * v;
        }
        for (y, v) in p.row(pt) {
            *inflow.entry((pc, y)).or_default() += m * (1.0 - stay) * v;
        }
    }
    let (mut residual_abs, mut residual_rel, mut interior, mut excluded): (f64, f64, usize, usize) = (0.0, 0.0, 0, 0);
    for (&(c, t), &m) in &nu {
        if tree.comp(c).depth >= depth {
            excluded += 1;
            continue;
        }
        interior += 1;
        let got = inflow.get(&(c, t)).copied().unwrap_or(0.0);
        residual_abs = residual_abs.max((got - m).abs());
        residual_rel = residual_rel.max((got - m).abs() / m);
    }
    let mut z_alternative_gap: f64 = 0.0;
    for c in 1..n_comps {
        let alt = boundary_factor(tree, pi, c) * z_alternative(tree, pi, c);
        z_alternative_gap = z_alternative_gap.max((alt / z[c] - 1.0).abs());
    }
    vertices.sort_by(|a, b| (a.comp, a.ty).cmp(&(b.comp, b.ty)));
    Ok(NuReport { depth, vertices, z, interior, excluded, residual_abs, residual_rel, z_alternative_gap })
}

/// Exact balance check of the tree measure on a truncation, with `P` rows and
/// `p` converted to rationals and each row renormalized to sum to one.
pub fn nu_residual_exact(tree: &mut LazyQuasiTree<'_>, depth: usize) -> Result<(usize, usize)> {
    tree.materialize_to_depth(depth);
    let spec = tree.spec();
    let p = spec.kernel();
    let row = |x: usize| -> Vec<(usize, BigRational)> {
        let r: Vec<(usize, BigRational)> = p.row(x).map(|(y, v)| (y, rational(v))).collect();
        let s: BigRational = r.iter().map(|(_, v)| v.clone()).fold(BigRational::zero(), |a, b| a + b);
        r.into_iter().map(|(y, v)| (y, v / &s)).collect()
    };
    let pr = |x: usize, y: usize| rational(spec.p(x, y));
    // Exact class measures of every type that appears.
    let mut pi: HashMap<usize, BigRational> = HashMap::new();
    let n_comps = tree.comps().len();
    for c in 0..n_comps {
        let members = tree.members(c);
        if pi.contains_key(&members[0]) {
            continue;
        }
        if members.len() > 2 * EXACT_MAX_N {
            return Err(Error::Budget(format!("class of size {} too large for exact mode", members.len())));
        }
        let local: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut k = vec![vec![BigRational::zero(); members.len()]; members.len()];
        for (i, &s) in members.iter().enumerate() {
            for (y, v) in row(s) {
                let j = *local.get(&y).ok_or_else(|| Error::Invalid("component is not a closed class".into()))?;
                k[i][j] = v;
            }
        }
        for (&s, v) in members.iter().zip(stationary_rational(&k)?) {
            pi.insert(s, v);
        }
    }
    let mut z = vec![BigRational::one(); n_comps];
    for c in 1..n_comps {
        let comp = tree.comp(c).clone();
        let (parent, s) = comp.parent.expect("child");
        let t = comp.center.expect("child");
        let one = BigRational::one();
        let a = (&pi[&s] * (&one - pr(s, t))) / (&pi[&t] * (&one - pr(t, s)));
        z[c] = &z[parent] * a;
    }
    let mut inflow: HashMap<(usize, usize), BigRational> = HashMap::new();
    let mut nodes = Vec::new();
    for c in 0..n_comps {
        for t in tree.members(c) {
            nodes.push((c, t));
            let m = &z[c] * &pi[&t];
            let partner = if tree.is_center((c, t)) {
                tree.comp(c).parent
            } else {
                tree.existing_child((c, t)).map(|k| (k, tree.comp(k).center.expect("child")))
            };
            let Some((pc, pt)) = partner else { continue };
            let stay = pr(t, pt);
            let jump = BigRational::one() - &stay;
            for (y, v) in row(t) {
                *inflow.entry((c, y)).or_insert_with(BigRational::zero) += &m * &stay * v;
            }
            for (y, v) in row(pt) {
                *inflow.entry((pc, y)).or_insert_with(BigRational::zero) += &m * &jump * v;
            }
        }
    }
    let mut checked = 0;
    let mut mismatches = 0;
    for (c, t) in nodes {
        if tree.comp(c).depth >= depth {
            continue;
        }
        checked += 1;
        let want = &z[c] * &pi[&t];
        if inflow.get(&(c, t)).cloned().unwrap_or_else(BigRational::zero) != want {
            mismatches += 1;
        }
    }
    Ok((checked, mismatches))
}

/// Classification of skeleton labels on a truncation.
#[derive(Debug, Clone, Serialize)]
pub struct BackboneReport {
    pub labels: usize,
    pub backbone: usize,
    pub backbone_fraction: f64,
    pub b_min: f64,
    /// Smallest weight among backbone labels.
    pub backbone_weight_min: f64,
    pub backbone_bound_ok: bool,
    /// Largest `|b(u, v) b(v, u) - 1|` over labels seen.
    pub inversion_gap: f64,
    /// Labels with positive and negative `log b`.
    pub positive: usize,
    pub negative: usize,
    /// Sign-test z score.
    pub sign_z: f64,
}

/// Small-range distance from `u` to `v`, capped at `cap + 1`.
pub fn sr_distance(p: &StochasticMatrix, u: usize, v: usize, cap: usize) -> usize {
    if u == v {
        return 0;
    }
    let mut seen = HashSet::from([u]);
    let mut q = VecDeque::from([(u, 0usize)]);
    while let Some((x, d)) = q.pop_front() {
        if d == cap {
            continue;
        }
        for &y in p.row_cols(x) {
            if y == v {
                return d + 1;
            }
            if seen.insert(y) {
                q.push_back((y, d + 1));
            }
        }
    }
    cap + 1
}

/// Label `(u, v)` of a skeleton edge: `u` is the center type of the upper
/// component and `v` the departure type. Backbone labels are within
/// small-range distance 2 in one direction.
pub fn backbone_diagnostic(tree: &LazyQuasiTree<'_>, pi: &[f64], delta: f64, l: usize) -> BackboneReport {
    let spec = tree.spec();
    let p = spec.kernel();
    let b_min = delta.powi(2 * l as i32 + 1);
    let (mut labels, mut backbone, mut positive, mut negative) = (0, 0, 0, 0);
    let mut backbone_weight_min = f64::INFINITY;
    let mut inversion_gap: f64 = 0.0;
    for comp in tree.comps().iter().skip(1) {
        let (parent, v) = comp.parent.expect("child");
        let Some(u) = tree.comp(parent).center else { continue };
        let u_partner = tree.comp(parent).parent.expect("centered").1;
        let v_partner = comp.center.expect("child");
        let b = label_weight(spec, pi, u, u_partner, v, v_partner);
        let b_rev = label_weight(spec, pi, v, v_partner, u, u_partner);
        inversion_gap = inversion_gap.max((b * b_rev - 1.0).abs());
        labels += 1;
        if b > 1.0 {
            positive += 1;
        } else if b < 1.0 {
            negative += 1;
        }
        if sr_distance(p, u, v, 2) <= 2 || sr_distance(p, v, u, 2) <= 2 {
            backbone += 1;
            backbone_weight_min = backbone_weight_min.min(b);
        }
    }
    let signed = (positive + negative) as f64;
    let sign_z = if signed > 0.0 { (positive as f64 - signed / 2.0) / (signed / 4.0).sqrt() } else { 0.0 };
    BackboneReport {
        labels,
        backbone,
        backbone_fraction: if labels == 0 { 1.0 } else { backbone as f64 / labels as f64 },
        b_min,
        backbone_weight_min,
        backbone_bound_ok: backbone_weight_min >= b_min,
        inversion_gap,
        positive,
        negative,
        sign_z,
    }
}
