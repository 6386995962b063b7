//! Sparse symmetric linear algebra: CSR matrices, Jacobi-preconditioned
//! conjugate gradients, and small constrained (saddle-point) solves used by
//! the local basis problems.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Row-parallel matvec only pays off for large systems.
const PARALLEL_MATVEC_THRESHOLD: usize = 20_000;

/// Anything CG can iterate on.
pub trait LinOp: Sync {
    fn n(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// Symmetric sparse matrix in CSR layout (full storage, symmetric values).
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &mut Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut row_of: Vec<usize> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets.iter() {
            debug_assert!(r < n && c < n);
            if row_of.last() == Some(&r) && col_idx.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                row_of.push(r);
                col_idx.push(c);
                values.push(v);
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &r in &row_of {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseSym { n, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Maximum absolute asymmetry `max |A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let (tcols, tvals) = self.row(c);
                let vt = match tcols.binary_search(&r) {
                    Ok(pos) => tvals[pos],
                    Err(_) => 0.0,
                };
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }
}

impl LinOp for SparseSym {
    fn n(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let row = |r: usize| {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            acc
        };
        if self.n >= PARALLEL_MATVEC_THRESHOLD {
            y.par_iter_mut().enumerate().for_each(|(r, out)| *out = row(r));
        } else {
            for (r, out) in y.iter_mut().enumerate() {
                *out = row(r);
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.n];
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            if let Ok(pos) = cols.binary_search(&r) {
                diag[r] = vals[pos];
            }
        }
        diag
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a CG run that was not cut short by an error.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub relative_residual: f64,
    pub iterations: usize,
}

/// Jacobi-preconditioned conjugate gradients down to
/// `||Ax - b|| <= tol * ||b||`. Always returns the final iterate.
pub fn cg_iterate(a: &dyn LinOp, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome {
    let n = a.n();
    debug_assert_eq!(b.len(), n);
    let norm_b = norm2(b);
    if norm_b == 0.0 {
        return CgOutcome { x: vec![0.0; n], relative_residual: 0.0, iterations: 0 };
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let target = tol * norm_b;

    let mut iterations = 0;
    let mut res = norm2(&r);
    while res > target && iterations < max_iter {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // Not positive definite along p; bail out with the current iterate.
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        res = norm2(&r);
    }
    CgOutcome { x, relative_residual: res / norm_b, iterations }
}

/// Solve `A x = b` with CG; errors out if the tolerance was not reached.
pub fn cg_solve(a: &SparseSym, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    cg_solve_op(a, b, tol, max_iter)
}

pub fn cg_solve_op(a: &dyn LinOp, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let out = cg_iterate(a, b, tol, max_iter);
    if out.relative_residual > tol {
        return Err(Error::SolverFailure {
            iterations: out.iterations,
            residual: out.relative_residual,
        });
    }
    Ok(out.x)
}

/// Sparse linear functional `sum_k w_k x_{i_k}`, e.g. an edge-average rule.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub entries: Vec<(usize, f64)>,
}

impl ConstraintRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, w)| w * x[i]).sum()
    }

    fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum()
    }
}

/// `K + rho * C^T C`. The augmentation makes the operator definite even when
/// `K` is only semi-definite (pure-Neumann local problems); on the constraint
/// manifold the minimizer and the multipliers are unchanged.
struct AugmentedOp<'a> {
    k: &'a SparseSym,
    constraints: &'a [ConstraintRow],
    rho: f64,
}

impl LinOp for AugmentedOp<'_> {
    fn n(&self) -> usize {
        self.k.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.k.apply(x, y);
        for c in self.constraints {
            let cx = c.dot(x);
            let scale = self.rho * cx;
            for &(i, w) in &c.entries {
                y[i] += scale * w;
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut diag = self.k.diagonal();
        for c in self.constraints {
            for &(i, w) in &c.entries {
                diag[i] += self.rho * w * w;
            }
        }
        diag
    }
}

/// Dense LU solve with partial pivoting for small systems (Schur complements,
/// 1D Galerkin matrices). Errors out on (numerically) singular input.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let k = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    for col in 0..k {
        let (pivot_row, pivot) = (col..k)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot <= 1e-12 * scale {
            return Err(Error::Degenerate(
                "constraint rows are (numerically) linearly dependent".to_string(),
            ));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in col + 1..k {
            let factor = a[r][col] / a[col][col];
            for c in col..k {
                a[r][c] -= factor * a[col][c];
            }
            b[r] -= factor * b[col];
        }
    }
    for col in (0..k).rev() {
        b[col] /= a[col][col];
        for r in 0..col {
            b[r] -= a[r][col] * b[col];
        }
    }
    Ok(b)
}

/// Minimize `1/2 x^T K x - f^T x` subject to `C x = g`, for a handful of
/// constraint rows. The Schur complement over the multipliers is formed once,
/// so one factorization serves many right-hand sides.
pub struct SaddleSolver<'a> {
    constraints: &'a [ConstraintRow],
    aug: AugmentedOp<'a>,
    /// `A_aug^{-1} c_i` per constraint.
    schur_columns: Vec<Vec<f64>>,
    /// Dense `C A_aug^{-1} C^T`.
    schur: Vec<Vec<f64>>,
    tol: f64,
    max_iter: usize,
}

impl<'a> SaddleSolver<'a> {
    pub fn new(
        k: &'a SparseSym,
        constraints: &'a [ConstraintRow],
        tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let diag_max = k.diagonal().iter().fold(0.0f64, |a, &d| a.max(d.abs())).max(1.0);
        let c_norm = constraints.iter().map(|c| c.norm_sq()).fold(0.0f64, f64::max).max(1e-300);
        let rho = diag_max / c_norm;
        let aug = AugmentedOp { k, constraints, rho };
        let mut schur_columns = Vec::with_capacity(constraints.len());
        for c in constraints {
            let mut rhs = vec![0.0; k.n()];
            for &(i, w) in &c.entries {
                rhs[i] += w;
            }
            schur_columns.push(cg_solve_op(&aug, &rhs, tol, max_iter)?);
        }
        let kdim = constraints.len();
        let mut schur = vec![vec![0.0; kdim]; kdim];
        for i in 0..kdim {
            for j in 0..kdim {
                schur[i][j] = constraints[i].dot(&schur_columns[j]);
            }
        }
        Ok(SaddleSolver { constraints, aug, schur_columns, schur, tol, max_iter })
    }

    /// Solve for one right-hand side pair, returning the minimizer and the
    /// multipliers of `K x + C^T lambda = f`.
    pub fn solve(&self, f: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.aug.n();
        let kdim = self.constraints.len();
        debug_assert_eq!(g.len(), kdim);
        // The augmented right-hand side is f + rho C^T g; its constraint part
        // maps through the precomputed Schur columns, so only f needs a CG
        // solve: u0 = A_aug^{-1} f + rho sum_i g_i y_i.
        let mut u0 = if f.iter().all(|&v| v == 0.0) {
            vec![0.0; n]
        } else {
            cg_solve_op(&self.aug, f, self.tol, self.max_iter)?
        };
        for (col, &gi) in self.schur_columns.iter().zip(g) {
            if gi != 0.0 {
                let scale = self.aug.rho * gi;
                for i in 0..n {
                    u0[i] += scale * col[i];
                }
            }
        }
        let rhs: Vec<f64> = self
            .constraints
            .iter()
            .zip(g)
            .map(|(c, &gi)| c.dot(&u0) - gi)
            .collect();
        let lambda = dense_solve(self.schur.clone(), rhs)?;
        let mut x = u0;
        for (col, &l) in self.schur_columns.iter().zip(&lambda) {
            for i in 0..n {
                x[i] -= l * col[i];
            }
        }
        Ok((x, lambda))
    }
}

/// One-shot constrained minimization (see [`SaddleSolver`]).
pub fn saddle_solve(
    k: &SparseSym,
    constraints: &[ConstraintRow],
    f: &[f64],
    g: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    SaddleSolver::new(k, constraints, tol, max_iter)?.solve(f, g)
}
