//! Compressed sparse column storage and a prefactored sparse Cholesky solver.
//!
//! The factorization is the classic up-looking `LLᵀ` (row-by-row via the
//! elimination tree) applied after a reverse Cuthill–McKee permutation.
//! Right-hand sides are `n × 3` position blocks, solved in one sweep.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("matrix must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Sparse matrix in compressed-column form with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CscMatrix<T> {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(_, c, _) in triplets {
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![T::zero(); triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(counts[c]..counts[c + 1]);
            order.sort_by_key(|&p| rows[p]);
            for &p in &order {
                if row_idx.len() > *col_ptr.last().unwrap() && *row_idx.last().unwrap() == rows[p] {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    row_idx.push(rows[p]);
                    values.push(vals[p]);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(row, value)` pairs of column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(k) => self.values[range.start + k],
            Err(_) => T::zero(),
        }
    }

    /// `self · x` for a dense block `x`.
    pub fn mul_dense(&self, x: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(x.nrows(), self.ncols, "dimension mismatch");
        let mut y = DMatrix::zeros(self.nrows, x.ncols());
        for k in 0..x.ncols() {
            for c in 0..self.ncols {
                let xc = x[(c, k)];
                if xc == T::zero() {
                    continue;
                }
                for (r, v) in self.column(c) {
                    y[(r, k)] += v * xc;
                }
            }
        }
        y
    }

    /// Keeps the exact nonzeros of `d`.
    pub fn from_dense(d: &DMatrix<T>) -> Self {
        let (nrows, ncols) = d.shape();
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for c in 0..ncols {
            for (r, &v) in d.column(c).iter().enumerate() {
                if v != T::zero() {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `selfᵀ · x` for a dense block `x`.
    pub fn tr_mul_dense(&self, x: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(x.nrows(), self.nrows, "dimension mismatch");
        let mut y = DMatrix::zeros(self.ncols, x.ncols());
        for k in 0..x.ncols() {
            let xs = x.column(k);
            for c in 0..self.ncols {
                let mut acc = T::zero();
                for (r, v) in self.column(c) {
                    acc += v * xs[r];
                }
                y[(c, k)] = acc;
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                d[(r, c)] += v;
            }
        }
        d
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }
}

/// Reverse Cuthill–McKee ordering of a structurally symmetric matrix.
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee<T: Real>(a: &CscMatrix<T>) -> Vec<usize> {
    let n = a.ncols();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|c| a.column(c).map(|(r, _)| r).filter(|&r| r != c).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(&adj, &degree, seed);
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut root = seed;
    let mut depth = 0usize;
    let mut level = vec![usize::MAX; adj.len()];
    let mut touched = Vec::new();
    for _ in 0..8 {
        for &t in &touched {
            level[t] = usize::MAX;
        }
        touched.clear();
        let mut queue = VecDeque::from([root]);
        level[root] = 0;
        touched.push(root);
        let mut last = root;
        while let Some(u) = queue.pop_front() {
            last = u;
            for &w in &adj[u] {
                if level[w] == usize::MAX {
                    level[w] = level[u] + 1;
                    touched.push(w);
                    queue.push_back(w);
                }
            }
        }
        let ecc = level[last];
        // among the deepest level, take the lowest degree vertex
        let candidate = touched
            .iter()
            .copied()
            .filter(|&v| level[v] == ecc)
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(last);
        if ecc <= depth {
            break;
        }
        depth = ecc;
        root = candidate;
    }
    for &t in &touched {
        level[t] = usize::MAX;
    }
    root
}

/// Prefactored symmetric positive definite matrix `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SparseCholesky<T> {
    n: usize,
    perm: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<T>,
}

const NONE: usize = usize::MAX;

impl<T: Real> SparseCholesky<T> {
    /// Factorizes a symmetric matrix given with both triangles stored.
    pub fn factor(a: &CscMatrix<T>) -> Result<Self, FactorError> {
        let perm = reverse_cuthill_mckee(a);
        Self::factor_with_ordering(a, perm)
    }

    pub fn factor_with_ordering(a: &CscMatrix<T>, perm: Vec<usize>) -> Result<Self, FactorError> {
        if a.nrows() != a.ncols() {
            return Err(FactorError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let n = a.ncols();
        let mut pinv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        // upper triangle of the permuted matrix
        let mut trip = Vec::with_capacity(a.nnz() / 2 + n);
        for c in 0..n {
            for (r, v) in a.column(c) {
                let (i, j) = (pinv[r], pinv[c]);
                if i <= j {
                    trip.push((i, j, v));
                }
            }
        }
        let c = CscMatrix::from_triplets(n, n, &trip);

        let parent = etree(&c);
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];

        // symbolic: column counts from the row patterns
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_ptr[k + 1] = l_ptr[k] + counts[k];
        }
        let nnz = l_ptr[n];
        let mut l_idx = vec![0usize; nnz];
        let mut l_val = vec![T::zero(); nnz];
        let mut fill: Vec<usize> = l_ptr[..n].to_vec();
        let mut x = vec![T::zero(); n];

        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut mark);
            x[k] = T::zero();
            for (i, v) in c.column(k) {
                if i <= k {
                    x[i] = v;
                }
            }
            let mut d = x[k];
            x[k] = T::zero();
            for &i in &stack[top..] {
                let lki = x[i] / l_val[l_ptr[i]];
                x[i] = T::zero();
                for p in l_ptr[i] + 1..fill[i] {
                    x[l_idx[p]] -= l_val[p] * lki;
                }
                d -= lki * lki;
                let p = fill[i];
                fill[i] += 1;
                l_idx[p] = k;
                l_val[p] = lki;
            }
            if !(d > T::zero()) {
                return Err(FactorError::NotPositiveDefinite {
                    column: perm[k],
                    pivot: d.to_f64_lossy(),
                });
            }
            let p = fill[k];
            fill[k] += 1;
            l_idx[p] = k;
            l_val[p] = d.sqrt();
        }
        Ok(Self {
            n,
            perm,
            l_ptr,
            l_idx,
            l_val,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Nonzeros in the triangular factor.
    pub fn factor_nnz(&self) -> usize {
        self.l_val.len()
    }

    /// Solves `A X = B` column-block-wise for `B` with three columns.
    pub fn solve3(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut work = vec![[T::zero(); 3]; self.n];
        let mut out = DMatrix::zeros(self.n, 3);
        self.solve3_into(b, &mut work, &mut out);
        out
    }

    /// Allocation-free variant of [`solve3`](Self::solve3); `work` must hold `n` entries.
    pub fn solve3_into(&self, b: &DMatrix<T>, work: &mut [[T; 3]], out: &mut DMatrix<T>) {
        assert_eq!(b.nrows(), self.n);
        assert_eq!(b.ncols(), 3);
        for (new, &old) in self.perm.iter().enumerate() {
            work[new] = [b[(old, 0)], b[(old, 1)], b[(old, 2)]];
        }
        // L y = b
        for j in 0..self.n {
            let start = self.l_ptr[j];
            let d = self.l_val[start];
            let yj = [work[j][0] / d, work[j][1] / d, work[j][2] / d];
            work[j] = yj;
            for p in start + 1..self.l_ptr[j + 1] {
                let (i, l) = (self.l_idx[p], self.l_val[p]);
                let w = &mut work[i];
                w[0] -= l * yj[0];
                w[1] -= l * yj[1];
                w[2] -= l * yj[2];
            }
        }
        // Lᵀ x = y
        for j in (0..self.n).rev() {
            let start = self.l_ptr[j];
            let mut acc = work[j];
            for p in start + 1..self.l_ptr[j + 1] {
                let (i, l) = (self.l_idx[p], self.l_val[p]);
                let w = work[i];
                acc[0] -= l * w[0];
                acc[1] -= l * w[1];
                acc[2] -= l * w[2];
            }
            let d = self.l_val[start];
            work[j] = [acc[0] / d, acc[1] / d, acc[2] / d];
        }
        for (new, &old) in self.perm.iter().enumerate() {
            for c in 0..3 {
                out[(old, c)] = work[new][c];
            }
        }
    }
}

/// Elimination tree of a matrix given by its upper triangle.
fn etree<T: Real>(a: &CscMatrix<T>) -> Vec<usize> {
    let n = a.ncols();
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for (row, _) in a.column(k) {
            let mut i = row;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
/// `stack[top..]` in topological order. Returns `top`.
fn ereach<T: Real>(
    a: &CscMatrix<T>,
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [bool],
) -> usize {
    let n = a.ncols();
    let mut top = n;
    mark[k] = true;
    for (row, _) in a.column(k) {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while !mark[i] {
            stack[len] = i;
            len += 1;
            mark[i] = true;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    for &i in &stack[top..n] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_plus_diag(n: usize, shift: f64) -> CscMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian_plus_diag(17, 0.1);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn solves_tridiagonal() {
        let a = laplacian_plus_diag(50, 0.01);
        let chol = SparseCholesky::factor(&a).unwrap();
        let b = DMatrix::from_fn(50, 3, |r, c| (r as f64 * 0.3 + c as f64).sin());
        let x = chol.solve3(&b);
        let r = a.mul_dense(&x) - &b;
        assert!(r.amax() < 1e-12 * b.amax());
    }

    #[test]
    fn rejects_indefinite() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(matches!(
            SparseCholesky::factor(&a),
            Err(FactorError::NotPositiveDefinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn random_spd_solve(seed in 0u64..1000, n in 2usize..40) {
            // diagonally dominant random sparse matrix
            let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let mut rnd = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) as f64) / (1u64 << 31) as f64 - 0.5 };
            let mut t = Vec::new();
            let mut diag = vec![1.0; n];
            for i in 0..n {
                for j in 0..i {
                    if rnd() > 0.2 {
                        let v = rnd();
                        t.push((i, j, v));
                        t.push((j, i, v));
                        diag[i] += v.abs();
                        diag[j] += v.abs();
                    }
                }
            }
            for (i, d) in diag.iter().enumerate() {
                t.push((i, i, *d));
            }
            let a = CscMatrix::from_triplets(n, n, &t);
            let chol = SparseCholesky::factor(&a).unwrap();
            let b = DMatrix::from_fn(n, 3, |_, _| rnd());
            let x = chol.solve3(&b);
            let r = a.mul_dense(&x) - &b;
            prop_assert!(r.amax() < 1e-10 * (1.0 + b.amax()));
        }
    }
}
