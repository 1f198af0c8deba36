//! Exact rational arithmetic for small instances. Floating entries are
//! converted to the rational with the same binary value, so identities that
//! hold algebraically hold with zero error here.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::error::{Error, Result};
use crate::matrix::StochasticMatrix;
use crate::model::{Environment, MixtureSpec};

/// Largest side size accepted by the exact checks.
pub const EXACT_MAX_N: usize = 32;

pub type Sparse = BTreeMap<(usize, usize), BigRational>;

pub fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite probability")
}

fn to_sparse(m: &StochasticMatrix) -> Sparse {
    m.triplets().into_iter().map(|(i, j, v)| ((i, j), rational(v))).collect()
}

fn add(map: &mut Sparse, key: (usize, usize), v: BigRational) {
    let e = map.entry(key).or_insert_with(BigRational::zero);
    *e += v;
    if e.is_zero() {
        map.remove(&key);
    }
}

/// Outcome of an exact identity check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactCheck {
    pub entries: usize,
    pub mismatches: usize,
}

impl ExactCheck {
    pub fn holds(&self) -> bool {
        self.mismatches == 0
    }
}

fn compare(a: &Sparse, b: &Sparse) -> ExactCheck {
    let mut keys: Vec<_> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let zero = BigRational::zero();
    let mismatches = keys
        .iter()
        .filter(|k| a.get(k).unwrap_or(&zero) != b.get(k).unwrap_or(&zero))
        .count();
    ExactCheck { entries: keys.len(), mismatches }
}

fn guard(spec: &MixtureSpec) -> Result<()> {
    if spec.n > EXACT_MAX_N {
        return Err(Error::Budget(format!("exact mode supports n <= {EXACT_MAX_N}, got {}", spec.n)));
    }
    Ok(())
}

/// The lifted kernel evaluated entry by entry from its defining cases.
pub fn lifted_exact(spec: &MixtureSpec, env: &Environment) -> Result<Sparse> {
    guard(spec)?;
    let p = to_sparse(spec.kernel());
    let mut out = Sparse::new();
    for x in 0..spec.size() {
        let ex = env.eta(x);
        let stay = rational(spec.p(x, ex));
        let jump = BigRational::one() - &stay;
        for ((_, y), v) in p.range((x, 0)..(x + 1, 0)) {
            add(&mut out, (x, *y), &stay * v);
        }
        for ((_, y), v) in p.range((ex, 0)..(ex + 1, 0)) {
            add(&mut out, (x, *y), &jump * v);
        }
    }
    Ok(out)
}

/// Product of the half-step matrix with `P`, computed as a matrix product.
pub fn half_step_product_exact(spec: &MixtureSpec, env: &Environment) -> Result<Sparse> {
    guard(spec)?;
    let p = to_sparse(spec.kernel());
    let mut h = Sparse::new();
    for x in 0..spec.size() {
        let stay = rational(spec.p(x, env.eta(x)));
        add(&mut h, (x, env.eta(x)), BigRational::one() - &stay);
        add(&mut h, (x, x), stay);
    }
    let mut out = Sparse::new();
    for ((x, m), a) in &h {
        for ((_, y), b) in p.range((*m, 0)..(*m + 1, 0)) {
            add(&mut out, (*x, *y), a * b);
        }
    }
    Ok(out)
}

/// Two half steps compose to the lifted kernel with zero error.
pub fn half_step_identity(spec: &MixtureSpec, env: &Environment) -> Result<ExactCheck> {
    Ok(compare(&half_step_product_exact(spec, env)?, &lifted_exact(spec, env)?))
}

/// The projection of the lifted kernel equals the mixture kernel with zero error.
pub fn projection_identity(spec: &MixtureSpec, env: &Environment) -> Result<ExactCheck> {
    let n = spec.n;
    let lift = lifted_exact(spec, env)?;
    let mut bar = Sparse::new();
    for ((x, y), v) in lift.range((0, 0)..(n, 0)) {
        let j = if *y < n { *y } else { env.eta(*y) };
        add(&mut bar, (*x, j), v.clone());
    }
    let mut direct = Sparse::new();
    for x in 0..n {
        let sx = env.eta(x);
        let p = rational(spec.p(x, sx));
        let q = BigRational::one() - &p;
        for (y, v) in spec.p1.row(x) {
            add(&mut direct, (x, y), &p * rational(v));
        }
        for (k, v) in spec.p2.row(sx - n) {
            add(&mut direct, (x, env.eta(n + k)), &q * rational(v));
        }
    }
    Ok(compare(&bar, &direct))
}

/// Stationary law of an irreducible kernel given as rational rows, by
/// Gaussian elimination on `pi (K - I) = 0` with `sum pi = 1`.
pub fn stationary_rational(k: &[Vec<BigRational>]) -> Result<Vec<BigRational>> {
    let n = k.len();
    // Unknowns pi_0..pi_{n-1}; equation j: sum_i pi_i (K(i,j) - [i=j]) = 0,
    // with the last equation replaced by the normalization.
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|j| {
            let mut row: Vec<BigRational> = (0..n)
                .map(|i| {
                    let mut v = k[i][j].clone();
                    if i == j {
                        v -= BigRational::one();
                    }
                    v
                })
                .collect();
            row.push(BigRational::zero());
            row
        })
        .collect();
    if n == 0 {
        return Ok(Vec::new());
    }
    a[n - 1] = vec![BigRational::one(); n + 1];
    for col in 0..n {
        let piv = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .ok_or_else(|| Error::Invalid("singular system: kernel is not irreducible".into()))?;
        a.swap(col, piv);
        let inv = BigRational::one() / a[col][col].clone();
        for c in col..=n {
            a[col][c] = &a[col][c] * &inv;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for c in col..=n {
                    let sub = &f * &a[col][c];
                    a[r][c] -= sub;
                }
            }
        }
    }
    let pi: Vec<BigRational> = a.into_iter().map(|row| row[n].clone()).collect();
    if pi.iter().any(|v| v.is_negative()) {
        return Err(Error::Invalid("negative stationary mass".into()));
    }
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{demo_spec, random_spec};

    fn r(a: i64, b: i64) -> BigRational {
        BigRational::new(a.into(), b.into())
    }

    #[test]
    fn two_state_balance() {
        // 0.1 and 0.2 are not dyadic, so rows are completed exactly from the rounded entries.
        let a = rational(0.1);
        let b = rational(0.2);
        let one = BigRational::one();
        let k = vec![vec![&one - &a, a.clone()], vec![b.clone(), &one - &b]];
        let pi = stationary_rational(&k).unwrap();
        assert_eq!(pi[0], &b / (&a + &b));
        assert_eq!(pi[1], &a / (&a + &b));
    }

    #[test]
    fn segment_balance() {
        let d = r(1, 20);
        let e = r(19, 20);
        let z = BigRational::zero();
        let k = vec![
            vec![e.clone(), d.clone(), z.clone()],
            vec![e.clone(), z.clone(), d.clone()],
            vec![z, e, d],
        ];
        let pi = stationary_rational(&k).unwrap();
        assert_eq!(&pi[1] / &pi[0], r(1, 19));
        assert_eq!(&pi[2] / &pi[0], r(1, 361));
    }

    #[test]
    fn identities_hold_on_small_instances() {
        for seed in 0..5 {
            for spec in [demo_spec(7).unwrap(), random_spec(7, seed)] {
                let env = Environment::sample(7, seed);
                assert!(half_step_identity(&spec, &env).unwrap().holds());
                assert!(projection_identity(&spec, &env).unwrap().holds());
            }
        }
    }

    #[test]
    fn large_instances_refused() {
        let spec = demo_spec(40).unwrap();
        let env = Environment::sample(40, 0);
        assert!(half_step_identity(&spec, &env).unwrap_err().is_budget());
    }
}
