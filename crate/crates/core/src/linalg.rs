//! Compressed sparse row matrices and sparse factorisation wrappers.
//!
//! Factorisations are delegated to `faer`. A CSR matrix is handed to `faer`
//! as the CSC storage of its transpose, so `A x = b` is solved with the
//! transposed solve of that factorisation and no format conversion is needed.

use std::cell::RefCell;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::prelude::*;
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, LdltRef, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Side};

use crate::error::{Error, Result};

/// Row-compressed sparse matrix with sorted column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

/// Map from the position of each input triplet to its storage slot, so that
/// a matrix with a fixed pattern can be refilled without re-sorting.
#[derive(Clone, Debug)]
pub struct TripletMap {
    slots: Vec<usize>,
}

impl TripletMap {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    /// Explicit zeros are kept so that the pattern only depends on the input
    /// positions.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        Self::from_triplets_mapped(nrows, ncols, triplets).0
    }

    pub fn from_triplets_mapped(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> (Self, TripletMap) {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut slots = vec![0usize; triplets.len()];
        let mut last: Option<(usize, usize)> = None;
        for &t in &order {
            let (r, c, v) = triplets[t];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
            slots[t] = vals.len() - 1;
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        (Self { nrows, ncols, row_ptr, col_idx, vals }, TripletMap { slots })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Overwrites the values using triplets in the order used to build `map`.
    pub fn refill(&mut self, map: &TripletMap, values: &[f64]) {
        assert_eq!(map.slots.len(), values.len());
        self.vals.iter_mut().for_each(|v| *v = 0.0);
        for (&s, &v) in map.slots.iter().zip(values) {
            self.vals[s] += v;
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    /// Iterates over `(col, value)` of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    /// `y += s A x`
    pub fn mul_vec_add(&self, s: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            *yr += s * acc;
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        SparseMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows).map(|r| self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn as_transposed_csc(&self) -> SparseColMatRef<'_, usize, f64> {
        let symbolic =
            SymbolicSparseColMatRef::new_checked(self.ncols, self.nrows, &self.row_ptr, None, &self.col_idx);
        SparseColMatRef::new(symbolic, &self.vals)
    }
}

/// Sparse LU factorisation of a square [`SparseMatrix`].
pub struct SparseLu {
    symbolic: SymbolicLu<usize>,
    lu: Lu<usize, f64>,
    matrix: SparseMatrix,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu").field("n", &self.matrix.nrows).field("nnz", &self.matrix.nnz()).finish()
    }
}

impl SparseLu {
    pub fn new(matrix: SparseMatrix) -> Result<Self> {
        if matrix.nrows != matrix.ncols {
            return Err(Error::Solver(format!("matrix is {}x{}, not square", matrix.nrows, matrix.ncols)));
        }
        let at = matrix.as_transposed_csc();
        let symbolic = SymbolicLu::try_new(at.symbolic()).map_err(|e| Error::Solver(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), at).map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(Self { symbolic, lu, matrix })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows
    }

    /// Refactorises with new values on the same sparsity pattern.
    pub fn refactor(&mut self, values: &[f64]) -> Result<()> {
        assert_eq!(values.len(), self.matrix.nnz(), "pattern mismatch on refactorisation");
        self.matrix.vals.copy_from_slice(values);
        let at = self.matrix.as_transposed_csc();
        self.lu = Lu::try_new_with_symbolic(self.symbolic.clone(), at).map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(())
    }

    /// Solves `A x = b` in place (`rhs` holds `b` on entry, `x` on exit).
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.dim());
        let n = rhs.len();
        let mat = faer::MatMut::from_column_major_slice_mut(rhs, n, 1);
        self.lu.solve_transpose_in_place(mat);
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves with iterative refinement until `‖b − A x‖ ≤ tol ‖b‖` or
    /// `max_iter` corrections have been applied. Returns the solution and the
    /// final relative residual.
    pub fn solve_refined(&self, rhs: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
        refine(&self.matrix, |x| self.solve_in_place(x), rhs, tol, max_iter)
    }
}

/// Sparse `L D Lᵀ` factorisation of a symmetric quasi-definite matrix with
/// AMD ordering. Pivots that come out smaller than `1e-13 max|A|` or with
/// the wrong sign are replaced by `±1e-11 max|A|`, so the factorisation is of
/// a slightly perturbed matrix and solves should be refined against the
/// exact one ([`SparseLdlt::solve_refined`]).
pub struct SparseLdlt {
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
    scratch: RefCell<MemBuffer>,
    matrix: SparseMatrix,
}

impl std::fmt::Debug for SparseLdlt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLdlt").field("n", &self.matrix.nrows).field("factor_nnz", &self.values.len()).finish()
    }
}

impl SparseLdlt {
    /// `matrix` must be symmetric and stored in full; only its lower
    /// triangle is read. `signs[i]` is the expected sign of pivot `i`.
    pub fn new(matrix: SparseMatrix, signs: &[i8]) -> Result<Self> {
        if matrix.nrows != matrix.ncols || signs.len() != matrix.nrows {
            return Err(Error::Solver(format!("matrix is {}x{} with {} signs", matrix.nrows, matrix.ncols, signs.len())));
        }
        // The CSR arrays of a symmetric matrix are also its CSC arrays.
        let a = matrix.as_transposed_csc();
        let symbolic = factorize_symbolic_cholesky(a.symbolic(), Side::Lower, SymmetricOrdering::Amd, Default::default())
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let mut values = vec![0.0; symbolic.len_val()];
        let req = symbolic
            .factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default())
            .or(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        let mut mem = MemBuffer::new(req);
        let scale = matrix.max_abs();
        let reg = LdltRegularization {
            dynamic_regularization_signs: Some(signs),
            dynamic_regularization_delta: 1e-11 * scale,
            dynamic_regularization_epsilon: 1e-13 * scale,
        };
        symbolic
            .factorize_numeric_ldlt(&mut values, a, Side::Lower, reg, Par::Seq, MemStack::new(&mut mem), Default::default())
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(Self { symbolic, values, scratch: RefCell::new(mem), matrix })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Stored entries of the factor.
    pub fn factor_nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let f = LdltRef::new(&self.symbolic, &self.values);
        let mat = faer::MatMut::from_column_major_slice_mut(rhs, n, 1);
        let mut mem = self.scratch.borrow_mut();
        f.solve_in_place_with_conj(Conj::No, mat, Par::Seq, MemStack::new(&mut mem));
    }

    /// Iterative refinement as in [`SparseLu::solve_refined`].
    pub fn solve_refined(&self, rhs: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
        refine(&self.matrix, |x| self.solve_in_place(x), rhs, tol, max_iter)
    }
}

/// Iterative refinement until the relative residual reaches `tol`, stops
/// improving, or `max_iter` corrections have been applied.
fn refine(a: &SparseMatrix, solve: impl Fn(&mut [f64]), rhs: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return (vec![0.0; rhs.len()], 0.0);
    }
    let mut x = rhs.to_vec();
    solve(&mut x);
    let mut r = vec![0.0; rhs.len()];
    let mut rel = f64::INFINITY;
    for it in 0..=max_iter {
        a.mul_vec_into(&x, &mut r);
        r.iter_mut().zip(rhs).for_each(|(ri, bi)| *ri = bi - *ri);
        let prev = rel;
        rel = norm(&r) / bnorm;
        // At the rounding floor further corrections only shuffle noise.
        if rel <= tol || it == max_iter || rel > 0.5 * prev {
            break;
        }
        solve(&mut r);
        x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
    }
    (x, rel)
}

/// Normwise backward error `‖r‖∞ / (‖A‖∞ ‖x‖∞ + ‖b‖∞)` of an approximate
/// solution `x` of `A x = b` with residual `r = b − A x`.
pub fn backward_error(a_norm: f64, x: &[f64], r: &[f64], b: &[f64]) -> f64 {
    let den = a_norm * max_abs(x) + max_abs(b);
    if den == 0.0 {
        0.0
    } else {
        max_abs(r) / den
    }
}

/// Conjugate gradients for `A x = b` with `A` self-adjoint and positive
/// semidefinite in the inner product `ip`, started from `x`. On a
/// consistent singular system the iterates stay in `x + range(A)`.
/// Returns the relative residual `‖b − A x‖ / ‖b‖` and the iteration count.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    ip: impl Fn(&[f64], &[f64]) -> f64,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> (f64, usize) {
    let bn = ip(b, b).sqrt();
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return (0.0, 0);
    }
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    let mut p = r.clone();
    let mut rr = ip(&r, &r);
    for it in 0..max_iter {
        if rr.sqrt() <= tol * bn {
            return (rr.sqrt() / bn, it);
        }
        let ap = apply(&p);
        let pap = ip(&p, &ap);
        if !(pap > 0.0) {
            return (rr.sqrt() / bn, it);
        }
        let a = rr / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += a * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, qi)| *ri -= a * qi);
        let next = ip(&r, &r);
        let beta = next / rr;
        rr = next;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
    }
    (rr.sqrt() / bn, max_iter)
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    #[test]
    fn cg_on_a_consistent_singular_system() {
        // diag(2, 1, 0): b has no kernel component, so the kernel part of
        // the start survives untouched.
        let apply = |x: &[f64]| vec![2.0 * x[0], x[1], 0.0];
        let mut x = vec![0.0, 0.0, 5.0];
        let (rel, its) = conjugate_gradient(apply, dot, &[4.0, -1.0, 0.0], &mut x, 1e-14, 10);
        assert!(rel < 1e-14 && its <= 2, "{rel} {its}");
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] + 1.0).abs() < 1e-14);
        assert_eq!(x[2], 5.0);
    }

    #[test]
    fn triplets_sum_duplicates_and_refill() {
        let t = [(0, 1, 2.0), (1, 0, 1.0), (0, 1, 3.0), (1, 1, 4.0), (0, 0, 0.0)];
        let (mut m, map) = SparseMatrix::from_triplets_mapped(2, 2, &t);
        assert_eq!(m.nnz(), 4);
        assert_eq!(m.get(0, 1), 5.0);
        assert_eq!(m.get(0, 0), 0.0);
        m.refill(&map, &[1.0, 1.0, 1.0, 1.0, 7.0]);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(0, 0), 7.0);
    }

    #[test]
    fn lu_solves_nonsymmetric_system() {
        let dense = vec![
            vec![4.0, 1.0, 0.0, 0.5],
            vec![-1.0, 3.0, 2.0, 0.0],
            vec![0.0, 0.0, 5.0, 1.0],
            vec![2.0, 0.0, -1.0, 6.0],
        ];
        let mut t = Vec::new();
        for (r, row) in dense.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        }
        let m = SparseMatrix::from_triplets(4, 4, &t);
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let b = dense_mul(&dense, &x_true);
        let lu = SparseLu::new(m).unwrap();
        let (x, rel) = lu.solve_refined(&b, 1e-14, 3);
        assert!(rel < 1e-14);
        for (a, e) in x.iter().zip(x_true) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn backward_error_of_scaled_residual() {
        let (m, _) = SparseMatrix::from_triplets_mapped(2, 2, &[(0, 0, 2.0), (0, 1, -1.0), (1, 1, 4.0)]);
        assert_eq!(m.norm_inf(), 4.0);
        let x = [1.0, 0.5];
        let b = m.mul_vec(&x);
        assert_eq!(backward_error(m.norm_inf(), &x, &[0.0, 0.0], &b), 0.0);
        // ‖r‖∞ / (‖A‖∞‖x‖∞ + ‖b‖∞) = 1e-3 / (4 + 2)
        let e = backward_error(m.norm_inf(), &x, &[1e-3, 0.0], &b);
        assert!((e - 1e-3 / 6.0).abs() < 1e-18);
    }

    #[test]
    fn refactor_matches_fresh_factorisation() {
        let t = [(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)];
        let (m, _) = SparseMatrix::from_triplets_mapped(2, 2, &t);
        let mut lu = SparseLu::new(m).unwrap();
        lu.refactor(&[5.0, -1.0, 2.0, 1.0]).unwrap();
        let x = lu.solve(&[4.0, 3.0]);
        // [[5, -1], [2, 1]] x = [4, 3] -> x = (1, 1)
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn transpose_round_trip() {
        let t = [(0, 2, 1.0), (1, 0, 2.0), (2, 1, 3.0), (2, 2, 4.0)];
        let m = SparseMatrix::from_triplets(3, 3, &t);
        let mt = m.transpose();
        assert_eq!(mt.get(2, 0), 1.0);
        assert_eq!(mt.get(1, 2), 3.0);
        assert_eq!(mt.transpose(), m);
    }
}
