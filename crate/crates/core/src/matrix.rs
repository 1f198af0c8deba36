//! Sparse row-major stochastic matrices.

use crate::error::{Error, Result};

/// Row-sum tolerance for stochastic rows.
pub const ROW_TOL: f64 = 1e-12;

/// Compressed sparse row matrix with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl StochasticMatrix {
    /// Build from (row, col, prob) triplets and check that every row sums to 1.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let m = Self::substochastic(n, triplets)?;
        m.validate()?;
        Ok(m)
    }

    /// Build from triplets allowing rows that sum to less than 1.
    /// Duplicate entries are summed, zeros are dropped.
    pub fn substochastic<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, v) in &t {
            if r >= n {
                return Err(Error::Dimension { expected: n, found: r + 1 });
            }
            if c >= n {
                return Err(Error::Dimension { expected: n, found: c + 1 });
            }
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(Error::Entry { row: r, col: c, value: v });
            }
        }
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            if v == 0.0 {
                continue;
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_vals(&self, i: usize) -> &[f64] {
        &self.vals[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_cols(i).iter().copied().zip(self.row_vals(i).iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = self.row_cols(i);
        match cols.binary_search(&j) {
            Ok(k) => self.row_vals(i)[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_vals(i).iter().sum()
    }

    /// Largest deviation of a row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.n).map(|i| (self.row_sum(i) - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            let s = self.row_sum(i);
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::RowSum { row: i, sum: s });
            }
        }
        Ok(())
    }

    /// `out = mu * K`.
    pub fn apply_left(&self, mu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                out[j] += m * v;
            }
        }
    }

    /// Largest number of nonzeros in a row.
    pub fn max_out_degree(&self) -> usize {
        (0..self.n).map(|i| self.row_cols(i).len()).max().unwrap_or(0)
    }

    /// Largest number of nonzeros in a column.
    pub fn max_in_degree(&self) -> usize {
        let mut c = vec![0usize; self.n];
        for &j in &self.cols {
            c[j] += 1;
        }
        c.into_iter().max().unwrap_or(0)
    }

    /// Smallest positive entry.
    pub fn min_positive(&self) -> f64 {
        self.vals.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Predecessor lists: `pred[j]` holds every `i` with `K(i, j) > 0`.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut pred = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for &j in self.row_cols(i) {
                pred[j].push(i);
            }
        }
        pred
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// Lazy version `(I + K) / 2`.
    pub fn lazy(&self) -> Self {
        let t = self
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (i, j, v / 2.0))
            .chain((0..self.n).map(|i| (i, i, 0.5)));
        Self::substochastic(self.n, t).expect("lazy version of a valid matrix")
    }

    /// Forward reachable set of `x` (including `x`).
    pub fn reach(&self, x: usize) -> Vec<usize> {
        let mut seen = vec![false; self.n];
        let mut stack = vec![x];
        seen[x] = true;
        let mut out = Vec::new();
        while let Some(u) = stack.pop() {
            out.push(u);
            for &v in self.row_cols(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Sample an index from a row given a uniform draw in [0, 1).
pub fn sample_row(cols: &[usize], vals: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &v) in vals.iter().enumerate() {
        acc += v;
        if u < acc {
            return cols[k];
        }
    }
    *cols.last().expect("empty row")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = StochasticMatrix::from_triplets(2, [(0, 1, 0.5), (0, 1, 0.5), (1, 0, 1.0)]).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(matches!(
            StochasticMatrix::from_triplets(2, [(0, 1, 0.5), (1, 0, 1.0)]),
            Err(Error::RowSum { row: 0, .. })
        ));
        assert!(matches!(
            StochasticMatrix::from_triplets(1, [(0, 0, 1.5)]),
            Err(Error::Entry { .. })
        ));
        assert!(matches!(
            StochasticMatrix::from_triplets(1, [(0, 3, 1.0)]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn apply_left_matches_dense() {
        let m = StochasticMatrix::from_triplets(2, [(0, 0, 0.9), (0, 1, 0.1), (1, 0, 0.2), (1, 1, 0.8)])
            .unwrap();
        let mut out = vec![0.0; 2];
        m.apply_left(&[0.5, 0.5], &mut out);
        assert!((out[0] - 0.55).abs() < 1e-15);
        assert!((out[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn reach_and_degrees() {
        let m = StochasticMatrix::from_triplets(3, [(0, 1, 1.0), (1, 1, 1.0), (2, 0, 0.5), (2, 1, 0.5)])
            .unwrap();
        assert_eq!(m.reach(0), vec![0, 1]);
        assert_eq!(m.reach(2), vec![0, 1, 2]);
        assert_eq!(m.max_out_degree(), 2);
        assert_eq!(m.max_in_degree(), 3);
    }
}
