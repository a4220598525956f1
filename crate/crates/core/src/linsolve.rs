//! Sparse symmetric storage, SPD solves and the scaled condition number.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{NefemError, Result};

/// Compressed sparse rows with sorted column indices. Symmetric matrices are
/// stored in full.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix with the given per-row sorted column lists.
    pub fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self { nrows: rows.len(), row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    /// Sums duplicate entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut pattern = Vec::with_capacity(n);
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
            let mut cols: Vec<usize> = r.iter().map(|e| e.0).collect();
            cols.dedup();
            pattern.push(cols);
        }
        let mut m = Self::from_pattern(&pattern);
        for (i, r) in rows.iter().enumerate() {
            for &(j, v) in r {
                m.add(i, j, v);
            }
        }
        m
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let trips: Vec<(usize, usize, f64)> = a
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, v)| (i, j, *v)))
            .collect();
        Self::from_triplets(a.len(), &trips)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].binary_search(&j).ok().map(|k| r.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds into an existing pattern entry.
    ///
    /// # Panics
    /// If `(i, j)` is not in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.position(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) outside the sparsity pattern"));
        self.values[k] += v;
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let (c, v) = self.row(i);
            *yi = c.iter().zip(v).map(|(&j, a)| a * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest `|a_ij − a_ji|` relative to the larger magnitude of the pair.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let b = self.get(j, i);
                let s = a.abs().max(b.abs());
                if s > 0.0 {
                    worst = worst.max((a - b).abs() / s);
                }
            }
        }
        worst
    }

    /// Principal submatrix on `keep` (sorted indices).
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.nrows];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &i in keep {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(a);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows: keep.len(), row_ptr, col_idx, values }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.nrows);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j)] = a;
            }
        }
        m
    }

    fn lower_faer(&self, scale: Option<&[f64]>) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.nnz() / 2 + self.nrows);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if j <= i {
                    let a = scale.map_or(a, |d| d[i] * a * d[j]);
                    trips.push(Triplet::new(i, j, a));
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.nrows, &trips).map_err(|e| NefemError::NotPositiveDefinite(format!("{e:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Direct,
    Cg,
    /// Direct up to `direct_limit` unknowns, CG beyond.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub direct_limit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: SolverMethod::Auto, tolerance: 1e-10, max_iterations: 20_000, direct_limit: 200_000 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(NefemError::InvalidConfig("solver tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(NefemError::InvalidConfig("solver max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub relative_residual: f64,
    pub iterations: usize,
    pub method: SolverMethod,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let nb = norm(b);
    if nb == 0.0 {
        r
    } else {
        r / nb
    }
}

pub fn solve_spd(a: &CsrMatrix, b: &[f64], config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    if b.len() != a.nrows() {
        return Err(NefemError::ShapeMismatch(format!("matrix {} rows, rhs {}", a.nrows(), b.len())));
    }
    let method = match config.method {
        SolverMethod::Auto if a.nrows() <= config.direct_limit => SolverMethod::Direct,
        SolverMethod::Auto => SolverMethod::Cg,
        m => m,
    };
    if a.nrows() == 0 {
        return Ok(Solution { x: Vec::new(), relative_residual: 0.0, iterations: 0, method });
    }
    match method {
        SolverMethod::Direct => solve_direct(a, b, config.tolerance),
        _ => solve_cg(a, b, config),
    }
}

fn solve_direct(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<Solution> {
    let lower = a.lower_faer(None)?;
    let llt = lower.as_ref().sp_cholesky(Side::Lower).map_err(|e| NefemError::NotPositiveDefinite(format!("{e:?}")))?;
    let rhs = Col::from_fn(b.len(), |i| b[i]);
    let mut x: Vec<f64> = {
        let sol = llt.solve(&rhs);
        (0..b.len()).map(|i| sol[i]).collect()
    };
    let mut res = relative_residual(a, &x, b);
    // One step of iterative refinement if the factorization lost accuracy.
    if res > tol {
        let ax = a.mul(&x);
        let r = Col::from_fn(b.len(), |i| b[i] - ax[i]);
        let dx = llt.solve(&r);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += dx[i];
        }
        res = relative_residual(a, &x, b);
    }
    if !res.is_finite() || res > tol {
        return Err(NefemError::NotConverged { residual: res, iterations: 1 });
    }
    Ok(Solution { x, relative_residual: res, iterations: 1, method: SolverMethod::Direct })
}

fn solve_cg(a: &CsrMatrix, b: &[f64], config: &SolverConfig) -> Result<Solution> {
    let n = b.len();
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| d <= 0.0) {
        return Err(NefemError::NotPositiveDefinite(format!("non-positive diagonal at row {i}")));
    }
    let nb = norm(b);
    let mut x = vec![0.0; n];
    if nb == 0.0 {
        return Ok(Solution { x, relative_residual: 0.0, iterations: 0, method: SolverMethod::Cg });
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 1..=config.max_iterations {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(NefemError::NotPositiveDefinite(format!("CG curvature {pap:e} at iteration {it}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) / nb <= config.tolerance {
            let res = relative_residual(a, &x, b);
            if res <= config.tolerance {
                return Ok(Solution { x, relative_residual: res, iterations: it, method: SolverMethod::Cg });
            }
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(NefemError::NotConverged { residual: relative_residual(a, &x, b), iterations: config.max_iterations })
}

/// Dimension up to which the scaled condition number uses a dense eigensolve.
pub const DENSE_EIGEN_LIMIT: usize = 4000;

/// `κ₂(DAD)` with `D = diag(A)^{-1/2}`.
pub fn scaled_condition_number(a: &CsrMatrix) -> Result<f64> {
    let n = a.nrows();
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| d == 0.0) {
        return Err(NefemError::ZeroDiagonal(i));
    }
    if let Some(i) = diag.iter().position(|&d| d < 0.0) {
        return Err(NefemError::NotPositiveDefinite(format!("negative diagonal at row {i}")));
    }
    let d: Vec<f64> = diag.iter().map(|x| 1.0 / x.sqrt()).collect();
    if n <= DENSE_EIGEN_LIMIT {
        let mut h = a.to_dense();
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        let ev = h.self_adjoint_eigenvalues(Side::Lower).map_err(|e| NefemError::NotPositiveDefinite(format!("{e:?}")))?;
        let (lo, hi) = (ev[0], ev[n - 1]);
        if lo <= 0.0 {
            return Err(NefemError::NotPositiveDefinite(format!("smallest eigenvalue {lo:e}")));
        }
        return Ok(hi / lo);
    }
    extremal_ratio(a, &d)
}

/// Power iteration for `λ_max(H)` and inverse iteration (sparse Cholesky) for
/// `λ_min(H)`, both to 1e-6 relative change.
fn extremal_ratio(a: &CsrMatrix, d: &[f64]) -> Result<f64> {
    let n = a.nrows();
    let h_mul = |x: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a * b).collect();
        a.mul(&y).iter().zip(d).map(|(a, b)| a * b).collect()
    };
    let start = |k: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919 + k) % 101) as f64 / 101.0).collect();
        let s = norm(&v);
        v.into_iter().map(|x| x / s).collect()
    };
    let iterate = |apply: &dyn Fn(&[f64]) -> Result<Vec<f64>>| -> Result<f64> {
        let mut v = start(1);
        let mut est = 0.0;
        for _ in 0..10_000 {
            let w = apply(&v)?;
            let nw = norm(&w);
            let new: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            v = w.into_iter().map(|x| x / nw).collect();
            if (new - est).abs() <= 1e-6 * new.abs() {
                return Ok(new);
            }
            est = new;
        }
        Err(NefemError::NotConverged { residual: f64::NAN, iterations: 10_000 })
    };
    let hi = iterate(&|v| Ok(h_mul(v)))?;
    let lower = a.lower_faer(Some(d))?;
    let llt = lower.as_ref().sp_cholesky(Side::Lower).map_err(|e| NefemError::NotPositiveDefinite(format!("{e:?}")))?;
    let inv = iterate(&|v| {
        let sol = llt.solve(&Col::from_fn(n, |i| v[i]));
        Ok((0..n).map(|i| sol[i]).collect())
    })?;
    Ok(hi * inv)
}
