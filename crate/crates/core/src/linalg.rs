//! Row-blocked dense products spread over the rayon pool.
//!
//! Blocks are fixed-size and partial results are combined in block order, so
//! the output does not depend on the number of threads.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::scalar::Real;

const BLOCK: usize = 1024;

fn blocks(n: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(move |i| (i * BLOCK, BLOCK.min(n - i * BLOCK)))
}

/// `Aᵀ B` for tall `A`, `B` with equal row counts.
pub(crate) fn tr_mul<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    assert_eq!(a.nrows(), b.nrows());
    let parts: Vec<DMatrix<T>> = blocks(a.nrows())
        .map(|(s, len)| a.rows(s, len).tr_mul(&b.rows(s, len)))
        .collect();
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for p in parts {
        out += p;
    }
    out
}

/// `A B` for tall `A`.
pub(crate) fn mul<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    assert_eq!(a.ncols(), b.nrows());
    let parts: Vec<DMatrix<T>> = blocks(a.nrows()).map(|(s, len)| a.rows(s, len) * b).collect();
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for (i, p) in parts.into_iter().enumerate() {
        out.rows_mut(i * BLOCK, p.nrows()).copy_from(&p);
    }
    out
}
