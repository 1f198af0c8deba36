//! Sparse direct solves backed by faer's LU factorization.

use std::collections::BTreeMap;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

/// Solve `A X = B` for a square sparse `A` given as triplets (duplicates are
/// summed). `rhs` holds the columns of `B`; the result holds the columns of `X`.
pub fn sparse_solve(n: usize, triplets: &[(usize, usize, f64)], rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Ok(rhs.iter().map(|_| Vec::new()).collect());
    }
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, v) in triplets {
        if i >= n || j >= n {
            return Err(Error::Dimension { expected: n, found: i.max(j) + 1 });
        }
        *acc.entry((i, j)).or_insert(0.0) += v;
    }
    let t: Vec<Triplet<usize, usize, f64>> = acc
        .into_iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|((i, j), v)| Triplet::new(i, j, v))
        .collect();
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &t)
        .map_err(|e| Error::Invalid(format!("sparse matrix: {e:?}")))?;
    let lu = a.sp_lu().map_err(|e| Error::Invalid(format!("sparse LU failed: {e:?}")))?;
    let mut b = Mat::<f64>::zeros(n, rhs.len());
    for (c, col) in rhs.iter().enumerate() {
        if col.len() != n {
            return Err(Error::Dimension { expected: n, found: col.len() });
        }
        for (r, &v) in col.iter().enumerate() {
            b[(r, c)] = v;
        }
    }
    let x = lu.solve(&b);
    let out: Vec<Vec<f64>> = (0..rhs.len()).map(|c| (0..n).map(|r| x[(r, c)]).collect()).collect();
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("singular system".into()));
    }
    Ok(out)
}
