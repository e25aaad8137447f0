//! Dense linear-algebra kernels.
//!
//! Everything here is row-major `f64` and sized for two regimes: block-sized
//! factorizations (at most `d x d`) inside the solvers, and desk-scale
//! whole-matrix analysis (eigenvalues, spectral norms, condition numbers) for
//! the rate-bound calculators and test oracles.

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Numerical tolerances shared by the kernels and their tests.
pub mod tol {
    /// Symmetry check: `|a_ij - a_ji| <= SYMMETRY * max(1, |a_ij|)`.
    pub const SYMMETRY: f64 = 1e-12;
    /// Cholesky pivots must exceed this times the largest diagonal entry.
    pub const CHOLESKY_PIVOT: f64 = 1e-13;
    /// Relative change in the singular value estimate that stops power iteration.
    pub const POWER_ITERATION: f64 = 1e-9;
    pub const POWER_RESTARTS: usize = 5;
    pub const POWER_SEED: u64 = 0x5eed_0f_90e7;
    /// Jacobi stops once the off-diagonal mass falls below this times `||a||_F`.
    pub const JACOBI_OFF_DIAGONAL: f64 = 1e-15;
    pub const JACOBI_MAX_SWEEPS: usize = 100;
    /// Reconstruction residual promised by the eigensolver, relative to `||a||_F`.
    pub const JACOBI_RECONSTRUCTION: f64 = 1e-9;
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵗ · y`, accumulated row by row so only one row is touched at a time.
    pub fn matvec_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in self.row(i).iter().enumerate() {
                if aik != 0.0 {
                    axpy(aik, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Extracts `self[rows, cols]` in the listed order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            let src = self.row(i);
            for (b, &j) in cols.iter().enumerate() {
                out.data[a * cols.len() + b] = src[j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let a = self.get(i, j);
                let b = self.get(j, i);
                if (a - b).abs() > tol::SYMMETRY * a.abs().max(1.0) {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(())
    }
}

/// A matrix that passed both the symmetry check and a Cholesky factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DenseMatrix);

impl SpdMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        cholesky(&m)?;
        Ok(Self(m))
    }

    /// Skips validation; for generators that construct SPD matrices by design.
    pub fn new_unchecked(m: DenseMatrix) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }
}

impl Deref for SpdMatrix {
    type Target = DenseMatrix;

    fn deref(&self) -> &DenseMatrix {
        &self.0
    }
}

/// Cholesky factor `L` with `L·Lᵗ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    l: DenseMatrix,
}

impl LowerTriangular {
    pub fn factor(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `L y = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let s = dot(&row[..i], &y[..i]);
            y[i] = (y[i] - s) / row[i];
        }
        y
    }

    /// Solves `Lᵗ x = y`.
    pub fn backward_solve(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * x[k];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }

    /// Solves `A x = b` for the factored `A`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.len(),
            });
        }
        Ok(self.backward_solve(&self.forward_solve(b)))
    }
}

pub fn cholesky(a: &DenseMatrix) -> Result<LowerTriangular> {
    a.check_symmetric()?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::InvalidShape("empty matrix".into()));
    }
    let max_diag = a.diagonal().into_iter().fold(0.0, f64::max);
    let threshold = tol::CHOLESKY_PIVOT * max_diag;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let pivot = a.get(j, j) - dot(lj, lj);
        if !(pivot > threshold) || pivot <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let ljj = pivot.sqrt();
        l.data[j * n + j] = ljj;
        for i in (j + 1)..n {
            let s = dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
            l.data[i * n + j] = (a.get(i, j) - s) / ljj;
        }
    }
    Ok(LowerTriangular { l })
}

/// Inverse of an SPD matrix through its Cholesky factor, each column refined
/// once; the result is exactly symmetric.
pub fn spd_invert(a: &DenseMatrix) -> Result<DenseMatrix> {
    let chol = cholesky(a)?;
    let n = a.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let mut col = chol.solve(&e)?;
        let resid = sub(&e, &a.matvec(&col)?);
        axpy(1.0, &chol.solve(&resid)?, &mut col);
        for i in 0..n {
            inv.data[i * n + j] = col[i];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, avg);
            inv.set(j, i, avg);
        }
    }
    Ok(inv)
}

/// `xᵗ P x`, the squared P-norm.
pub fn p_norm_sq(x: &[f64], p: &DenseMatrix) -> Result<f64> {
    if p.rows() != x.len() || p.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: p.rows(),
            got: x.len(),
        });
    }
    let v: f64 = (0..x.len())
        .filter(|&i| x[i] != 0.0)
        .map(|i| x[i] * dot(p.row(i), x))
        .sum();
    Ok(v.max(0.0))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as the columns of the second matrix.
pub fn sym_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let (vals, vecs) = jacobi(a, true)?;
    let vecs = vecs.expect("vectors requested");
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let sorted_vals = order.iter().map(|&i| vals[i]).collect();
    let mut sorted_vecs = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            sorted_vecs.set(r, new_col, vecs.get(r, old_col));
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigvals(a: &DenseMatrix) -> Result<Vec<f64>> {
    let (mut vals, _) = jacobi(a, false)?;
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

fn jacobi(a: &DenseMatrix, want_vectors: bool) -> Result<(Vec<f64>, Option<DenseMatrix>)> {
    a.check_symmetric()?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = want_vectors.then(|| DenseMatrix::identity(n));
    let fro = a.frobenius_norm();
    if fro == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let stop = tol::JACOBI_OFF_DIAGONAL * fro;

    for _sweep in 0..tol::JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| 2.0 * m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + tau.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut m, p, q, c, s);
                if let Some(v) = v.as_mut() {
                    rotate_columns(v, p, q, c, s);
                }
            }
        }
    }
    Ok((m.diagonal(), v))
}

/// `m <- Jᵗ m J` for the plane rotation `J` acting on indices `p`, `q`.
fn rotate(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    rotate_columns(m, p, q, c, s);
    let n = m.cols;
    for k in 0..n {
        let mpk = m.data[p * n + k];
        let mqk = m.data[q * n + k];
        m.data[p * n + k] = c * mpk - s * mqk;
        m.data[q * n + k] = s * mpk + c * mqk;
    }
}

fn rotate_columns(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.cols;
    for k in 0..m.rows {
        let mkp = m.data[k * n + p];
        let mkq = m.data[k * n + q];
        m.data[k * n + p] = c * mkp - s * mkq;
        m.data[k * n + q] = s * mkp + c * mkq;
    }
}

/// Largest singular value by power iteration on `aᵗa`, best of several
/// seeded restarts.
pub fn spectral_norm(a: &DenseMatrix) -> f64 {
    if a.data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let dim = a.rows.max(a.cols);
    let cap = 10 * dim;
    let mut rng = ChaCha8Rng::seed_from_u64(tol::POWER_SEED);
    let mut best = 0.0_f64;
    for _ in 0..tol::POWER_RESTARTS {
        let mut v: Vec<f64> = (0..a.cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nv = norm2(&v);
        if nv == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut sigma = 0.0;
        for _ in 0..cap {
            let w = a.matvec(&v).expect("shape checked");
            let next = norm2(&w);
            let u = a.matvec_transpose(&w).expect("shape checked");
            let nu = norm2(&u);
            let converged = (next - sigma).abs() <= tol::POWER_ITERATION * next;
            sigma = next;
            if nu == 0.0 || converged {
                break;
            }
            v = u.into_iter().map(|x| x / nu).collect();
        }
        best = best.max(sigma);
    }
    best
}

/// `(κ, κ̃) = (λ_max / λ_min, ||P||_F / λ_min)`.
pub fn condition_numbers(p: &DenseMatrix) -> Result<(f64, f64)> {
    let vals = sym_eigvals(p)?;
    let lo = vals[0];
    let hi = *vals.last().expect("nonempty");
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite { pivot: 0, value: lo });
    }
    Ok((hi / lo, p.frobenius_norm() / lo))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows)
    }

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = DenseMatrix::new(n, n, v).unwrap();
        let mut p = v.transpose().matmul(&v).unwrap();
        for i in 0..n {
            p.set(i, i, p.get(i, i) + n as f64);
        }
        p
    }

    #[test]
    fn cholesky_diagonal() {
        let l = cholesky(&m(&[&[4.0, 0.0], &[0.0, 9.0]])).unwrap();
        assert_eq!(l.factor(), &m(&[&[2.0, 0.0], &[0.0, 3.0]]));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = m(&[&[4.0, 2.0], &[2.0, 2.0]]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l.factor(), &m(&[&[2.0, 0.0], &[1.0, 1.0]]));
        let llt = l.factor().matmul(&l.factor().transpose()).unwrap();
        assert_eq!(llt, a);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let err = cholesky(&m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { pivot: 1, .. }));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let err = cholesky(&m(&[&[1.0, 0.5], &[0.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(spd_invert(&DenseMatrix::identity(3)).unwrap(), DenseMatrix::identity(3));
        assert_eq!(
            spd_invert(&m(&[&[2.0, 0.0], &[0.0, 4.0]])).unwrap(),
            m(&[&[0.5, 0.0], &[0.0, 0.25]])
        );
        let inv = spd_invert(&m(&[&[4.0, 2.0], &[2.0, 2.0]])).unwrap();
        assert!(inv.max_abs_diff(&m(&[&[0.5, -0.5], &[-0.5, 1.0]])) < 1e-15);
    }

    #[test]
    fn p_norm_examples() {
        let p = m(&[&[2.0, 0.0], &[0.0, 4.0]]);
        assert_eq!(p_norm_sq(&[0.0, 0.0], &p).unwrap(), 0.0);
        assert_eq!(p_norm_sq(&[1.0, 0.0], &p).unwrap(), 2.0);
        assert_eq!(p_norm_sq(&[1.0, 1.0], &p).unwrap(), 6.0);
        assert!(matches!(
            p_norm_sq(&[1.0], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eigvals_examples() {
        let d = DenseMatrix::from_diag(&[3.0, 1.0, 2.0]);
        assert_eq!(sym_eigvals(&d).unwrap(), vec![1.0, 2.0, 3.0]);
        let v = sym_eigvals(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14);
        let v = sym_eigvals(&m(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 3.0).abs() < 1e-14);
        assert!(matches!(
            sym_eigvals(&m(&[&[0.0, 1.0], &[0.0, 0.0]])),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigen_reconstruction() {
        for seed in 0..4 {
            let a = random_spd(40, seed);
            let (vals, vecs) = sym_eigen(&a).unwrap();
            let scaled = {
                let mut s = vecs.clone();
                for r in 0..40 {
                    for c in 0..40 {
                        s.set(r, c, s.get(r, c) * vals[c]);
                    }
                }
                s
            };
            let recon = scaled.matmul(&vecs.transpose()).unwrap();
            let resid = recon.sub(&a).unwrap().frobenius_norm();
            assert!(resid <= tol::JACOBI_RECONSTRUCTION * a.frobenius_norm(), "{resid}");
        }
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 3)), 0.0);
        assert!((spectral_norm(&DenseMatrix::from_diag(&[1.0, -5.0])) - 5.0).abs() < 1e-9);
        assert!((spectral_norm(&m(&[&[0.0, 2.0], &[0.0, 0.0]])) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_eigenvalues_for_symmetric() {
        for seed in 0..5 {
            let mut a = random_spd(24, 100 + seed);
            // shift to make it indefinite
            for i in 0..24 {
                a.set(i, i, a.get(i, i) - 40.0);
            }
            let vals = sym_eigvals(&a).unwrap();
            let expected = vals[0].abs().max(vals[23].abs());
            let got = spectral_norm(&a);
            assert!((got - expected).abs() <= 1e-8 * expected, "{got} vs {expected}");
        }
    }

    #[test]
    fn condition_number_examples() {
        let (k, kt) = condition_numbers(&DenseMatrix::identity(4)).unwrap();
        assert_eq!((k, kt), (1.0, 2.0));
        let (k, kt) = condition_numbers(&DenseMatrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(k, 4.0);
        assert!((kt - 17f64.sqrt()).abs() < 1e-15);
        let (k, kt) = condition_numbers(&DenseMatrix::from_diag(&[2.0, 2.0])).unwrap();
        assert_eq!(k, 1.0);
        assert!((kt - 8f64.sqrt() / 2.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn inverse_times_matrix_is_identity(n in 1usize..=64, seed in any::<u64>()) {
            let a = random_spd(n, seed);
            let inv = spd_invert(&a).unwrap();
            let prod = inv.matmul(&a).unwrap();
            prop_assert!(prod.max_abs_diff(&DenseMatrix::identity(n)) <= 1e-10);
        }

        #[test]
        fn p_norm_positive_off_zero(n in 1usize..=16, seed in any::<u64>()) {
            let a = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            prop_assert!(p_norm_sq(&x, &a).unwrap() > 0.0);
        }
    }
}
