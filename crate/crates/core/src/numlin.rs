//! Dense complex linear algebra kernels.
//!
//! Everything here operates on small dense matrices (N ≤ 64). Matrices are
//! stored row-major with `Complex64` entries; real problems simply carry
//! zero imaginary parts. Factorizations are delegated to `nalgebra`, while
//! the Lyapunov solve (Kronecker vectorization) and the matrix exponential
//! (Padé scaling-and-squaring) are written out here.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Relative symmetry tolerance accepted by [`HermitianMatrix::new`].
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Default relative rank threshold.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Absolute floor for the rank threshold, so that the zero matrix has rank 0.
pub const RANK_ABS_FLOOR: f64 = 1e-12;

const LYAP_MAX_DIM: usize = 32;
const PIVOT_RTOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumlinError {
    #[error("matrix is not Hermitian (symmetry residual {residual:.3e})")]
    NotHermitian { residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("no unique solution: {0}")]
    NoUniqueSolution(String),
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.6e})")]
    NotPsd { eigenvalue: f64 },
    #[error("matrix is indefinite or singular (smallest eigenvalue {min_eigenvalue:.6e})")]
    IndefiniteOrSingular { min_eigenvalue: f64 },
    #[error("magnitude overflow in matrix exponential")]
    MagnitudeOverflow,
}

pub type Result<T> = std::result::Result<T, NumlinError>;

/// Row-major dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a real matrix from row-major values.
    pub fn from_real(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols, "value count does not match shape");
        Self::from_fn(rows, cols, |i, j| C64::new(values[i * cols + j], 0.0))
    }

    /// Builds a real matrix from a list of rows. Panics on ragged input.
    pub fn from_real_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| C64::new(rows[i][j], 0.0))
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(NumlinError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.cols {
            return Err(NumlinError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![C64::new(0.0, 0.0); self.rows];
        mul_vec_into(self, v, &mut out);
        Ok(out)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumlinError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn norm_max(&self) -> f64 {
        self.data.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|a| a.im == 0.0)
    }

    /// Real parts in row-major order.
    pub fn real_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].re).collect())
            .collect()
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<C64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn to_real_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)].re)
    }
}

/// `out = m * v` without allocating. Lengths must already agree.
pub(crate) fn mul_vec_into(m: &DenseMatrix, v: &[C64], out: &mut [C64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m.data[i * m.cols..(i + 1) * m.cols];
        *o = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self[(i, j)];
                if z.im == 0.0 {
                    write!(f, "{:>12.6} ", z.re)?;
                } else {
                    write!(f, "{:>12.6}{:+.6}i ", z.re, z.im)?;
                }
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// A square matrix verified to be Hermitian within [`HERMITIAN_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(DenseMatrix);

impl HermitianMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(NumlinError::NotSquare {
                rows: m.rows,
                cols: m.cols,
            });
        }
        if !m.is_finite() {
            return Err(NumlinError::NonFinite("Hermitian candidate"));
        }
        let residual = m.sub(&m.adjoint())?.norm_max();
        if residual > HERMITIAN_TOL * m.norm_max().max(1.0) {
            return Err(NumlinError::NotHermitian { residual });
        }
        Ok(Self(m))
    }

    /// Returns `(M + Mᴴ)/2`; never fails on square input.
    pub fn symmetrize(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(NumlinError::NotSquare {
                rows: m.rows,
                cols: m.cols,
            });
        }
        Ok(Self(m.add(&m.adjoint())?.scale(0.5)))
    }

    pub fn identity(n: usize) -> Self {
        Self(DenseMatrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DenseMatrix::zeros(n, n))
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        Self(DenseMatrix::from_real_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    /// `hᴴ M h`, real for Hermitian M.
    pub fn quadratic_form(&self, h: &[C64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = C64::new(0.0, 0.0);
            for j in 0..n {
                row += self.0[(i, j)] * h[j];
            }
            acc += (h[i].conj() * row).re;
        }
        acc
    }
}

impl Index<(usize, usize)> for HermitianMatrix {
    type Output = C64;
    fn index(&self, idx: (usize, usize)) -> &C64 {
        &self.0[idx]
    }
}

#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    /// `V diag(λ) Vᴴ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let v = &self.vectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| v[(i, k)] * self.values[k] * v[(j, k)].conj())
                .sum()
        })
    }
}

/// Full eigendecomposition of a Hermitian matrix.
///
/// Eigenvalues are sorted descending. Each eigenvector is phase-normalized so
/// that its first non-negligible entry is real and positive, and eigenvalues
/// that tie (within round-off) are ordered by lexicographically descending
/// eigenvector entries.
pub fn sym_eigen(m: &HermitianMatrix) -> EigenDecomposition {
    let n = m.dim();
    let eig = nalgebra::SymmetricEigen::new(m.as_matrix().to_nalgebra());
    let mut pairs: Vec<(f64, Vec<C64>)> = (0..n)
        .map(|k| {
            let mut v: Vec<C64> = eig.eigenvectors.column(k).iter().copied().collect();
            normalize_phase(&mut v);
            (eig.eigenvalues[k], v)
        })
        .collect();

    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tie_tol = 1e-12 * m.as_matrix().norm_max().max(1.0);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (pairs[end - 1].0 - pairs[end].0).abs() <= tie_tol {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| lex_cmp(&b.1, &a.1));
        }
        start = end;
    }

    let values = pairs.iter().map(|p| p.0).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, k| pairs[k].1[i]);
    EigenDecomposition { values, vectors }
}

fn normalize_phase(v: &mut [C64]) {
    let scale = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if let Some(pivot) = v.iter().find(|z| z.norm() > 1e-8 * scale).copied() {
        let phase = pivot.conj() / pivot.norm();
        for z in v.iter_mut() {
            *z *= phase;
        }
    }
}

fn lex_cmp(a: &[C64], b: &[C64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    std::cmp::Ordering::Equal
}

/// Largest eigenvalue of a Hermitian matrix.
pub fn lambda_max(m: &HermitianMatrix) -> f64 {
    sym_eigen(m).max()
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn lambda_min(m: &HermitianMatrix) -> f64 {
    sym_eigen(m).min()
}

/// Solves the continuous Lyapunov equation `AᴴQ + QA = −W`.
///
/// The equation is vectorized (column-major) into the N²×N² system
/// `(I ⊗ Aᴴ + Aᵀ ⊗ I) vec(Q) = −vec(W)` and solved densely with one step of
/// iterative refinement. An indefinite solution is returned as-is.
pub fn lyapunov_solve(a: &DenseMatrix, w: &HermitianMatrix) -> Result<HermitianMatrix> {
    if !a.is_square() {
        return Err(NumlinError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    if w.dim() != n {
        return Err(NumlinError::DimensionMismatch(format!(
            "A is {n}x{n} but W is {0}x{0}",
            w.dim()
        )));
    }
    if n > LYAP_MAX_DIM {
        return Err(NumlinError::DimensionMismatch(format!(
            "Lyapunov dimension {n} exceeds {LYAP_MAX_DIM}"
        )));
    }
    if !a.is_finite() {
        return Err(NumlinError::NonFinite("A"));
    }

    let nn = n * n;
    let vec_idx = |i: usize, j: usize| i + j * n;
    let mut k = DMatrix::<C64>::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            let row = vec_idx(i, j);
            for l in 0..n {
                // (AᴴQ)_{ij} = Σ_l conj(A_{li}) Q_{lj}
                k[(row, vec_idx(l, j))] += a[(l, i)].conj();
                // (QA)_{ij} = Σ_l Q_{il} A_{lj}
                k[(row, vec_idx(i, l))] += a[(l, j)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_fn(nn, |r, _| -w[(r % n, r / n)]);

    let lu = k.clone().lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..nn).map(|i| u[(i, i)].norm()).collect();
    let pmax = pivots.iter().copied().fold(0.0, f64::max);
    let pmin = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    if pmax == 0.0 || pmin <= PIVOT_RTOL * pmax {
        return Err(NumlinError::NoUniqueSolution(format!(
            "Kronecker system singular (pivot ratio {:.3e}); A and -Aᴴ share an eigenvalue",
            if pmax == 0.0 { 0.0 } else { pmin / pmax }
        )));
    }
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| NumlinError::NoUniqueSolution("LU solve failed".into()))?;
    let r = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }

    let q = DenseMatrix::from_fn(n, n, |i, j| x[vec_idx(i, j)]);
    if !q.is_finite() {
        return Err(NumlinError::NoUniqueSolution("non-finite solution".into()));
    }
    let q = HermitianMatrix::symmetrize(&q)?;
    let res = lyapunov_residual(a, &q, w)?;
    let bound = 1e-8 * w.as_matrix().norm_fro().max(1.0);
    if res > bound {
        return Err(NumlinError::NoUniqueSolution(format!(
            "residual {res:.3e} exceeds {bound:.3e}; system is ill-conditioned"
        )));
    }
    Ok(q)
}

/// Frobenius norm of `AᴴQ + QA + W`.
pub fn lyapunov_residual(a: &DenseMatrix, q: &HermitianMatrix, w: &HermitianMatrix) -> Result<f64> {
    let aq = a.adjoint().matmul(q.as_matrix())?;
    let qa = q.as_matrix().matmul(a)?;
    Ok(aq.add(&qa)?.add(w.as_matrix())?.norm_fro())
}

#[derive(Clone, Debug)]
pub struct RankInfo {
    pub rank: usize,
    /// Orthonormal basis of the numerical kernel, one column per direction.
    /// `None` when the kernel is trivial.
    pub kernel: Option<DenseMatrix>,
}

impl RankInfo {
    pub fn kernel_vectors(&self) -> Vec<Vec<C64>> {
        match &self.kernel {
            Some(k) => (0..k.cols()).map(|j| k.column(j)).collect(),
            None => Vec::new(),
        }
    }
}

/// Numerical rank and kernel of a PSD matrix.
///
/// Counts eigenvalues above `tol · max(λ_max, 1e-12)`; the kernel is spanned
/// by the remaining eigenvectors.
pub fn rank_with_tol(m: &HermitianMatrix, tol: f64) -> Result<RankInfo> {
    let eig = sym_eigen(m);
    let threshold = tol * eig.max().max(RANK_ABS_FLOOR);
    if eig.min() < -threshold {
        return Err(NumlinError::NotPsd {
            eigenvalue: eig.min(),
        });
    }
    let n = m.dim();
    let rank = eig.values.iter().filter(|&&l| l > threshold).count();
    let kernel = (rank < n).then(|| {
        DenseMatrix::from_fn(n, n - rank, |i, j| eig.vectors[(i, rank + j)])
    });
    Ok(RankInfo { rank, kernel })
}

/// Spectral condition number `λ_max / λ_min` of a positive definite matrix.
pub fn cond_number(m: &HermitianMatrix) -> Result<f64> {
    let eig = sym_eigen(m);
    if eig.min() <= 0.0 {
        return Err(NumlinError::IndefiniteOrSingular {
            min_eigenvalue: eig.min(),
        });
    }
    Ok(eig.max() / eig.min())
}

/// `P ⪰ Q` in the Loewner order, i.e. `λ_min(P − Q) ≥ −tol`.
pub fn loewner_geq(p: &HermitianMatrix, q: &HermitianMatrix, tol: f64) -> Result<bool> {
    Ok(loewner_gap(p, q)? >= -tol)
}

/// `λ_min(P − Q)`.
pub fn loewner_gap(p: &HermitianMatrix, q: &HermitianMatrix) -> Result<f64> {
    let diff = HermitianMatrix::symmetrize(&p.as_matrix().sub(q.as_matrix())?)?;
    Ok(lambda_min(&diff))
}

/// Spectral norm `‖M‖₂` of an arbitrary matrix.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    let gram = m.adjoint().matmul(m).expect("conformal by construction");
    let gram = HermitianMatrix::symmetrize(&gram).expect("square");
    lambda_max(&gram).max(0.0).sqrt()
}

/// Eigenvalues of a general square matrix, sorted by descending real part.
pub fn eigenvalues(a: &DenseMatrix) -> Result<Vec<C64>> {
    if !a.is_square() {
        return Err(NumlinError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let mut ev: Vec<C64> = if a.is_real() {
        a.to_real_nalgebra().complex_eigenvalues().iter().copied().collect()
    } else {
        let schur = nalgebra::Schur::new(a.to_nalgebra());
        let (_, t) = schur.unpack();
        (0..a.rows).map(|i| t[(i, i)]).collect()
    };
    ev.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    Ok(ev)
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &DenseMatrix) -> Result<f64> {
    Ok(eigenvalues(a)?[0].re)
}

// Padé(6,6) coefficients c_k = (12-k)! 6! / (12! k! (6-k)!).
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// `exp(A t)` by Padé(6,6) scaling and squaring.
pub fn expm(a: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(NumlinError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if !t.is_finite() || !a.is_finite() {
        return Err(NumlinError::NonFinite("expm argument"));
    }
    let n = a.rows;
    let x = a.to_nalgebra() * C64::new(t, 0.0);
    let norm = a.norm_one() * t.abs();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    if squarings > 1000 {
        return Err(NumlinError::MagnitudeOverflow);
    }
    let x = x * C64::new(0.5f64.powi(squarings), 0.0);

    let id = DMatrix::<C64>::identity(n, n);
    let mut num = id.clone() * C64::new(PADE6[0], 0.0);
    let mut den = num.clone();
    let mut power = id;
    for (k, &c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &x;
        let term = &power * C64::new(c, 0.0);
        num += &term;
        if k % 2 == 0 {
            den += &term;
        } else {
            den -= &term;
        }
    }
    let mut r = den
        .lu()
        .solve(&num)
        .ok_or(NumlinError::MagnitudeOverflow)?;
    for _ in 0..squarings {
        r = &r * &r;
        if r.iter().any(|z| !z.re.is_finite() || !z.im.is_finite() || z.norm() > 1e300) {
            return Err(NumlinError::MagnitudeOverflow);
        }
    }
    Ok(DenseMatrix::from_nalgebra(&r))
}

/// `exp(A t) v`.
pub fn expm_apply(a: &DenseMatrix, t: f64, v: &[C64]) -> Result<Vec<C64>> {
    if v.len() != a.cols {
        return Err(NumlinError::DimensionMismatch(format!(
            "state of length {} for {}x{} matrix",
            v.len(),
            a.rows,
            a.cols
        )));
    }
    let out = expm(a, t)?.mul_vec(v)?;
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NumlinError::MagnitudeOverflow);
    }
    Ok(out)
}

/// Euclidean norm of a complex vector.
pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn real_vec(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), 0.0))
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
        let m = DenseMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        HermitianMatrix::symmetrize(&m).unwrap()
    }

    #[test]
    fn eigen_identity_and_diagonal() {
        let e = sym_eigen(&HermitianMatrix::identity(3));
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert!(e.vectors.sub(&DenseMatrix::identity(3)).unwrap().norm_max() < 1e-15);

        let d = HermitianMatrix::from_real_diag(&[-0.4, -0.2, -0.3]);
        let e = sym_eigen(&d);
        for (got, want) in e.values.iter().zip([-0.2, -0.3, -0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn eigen_reconstructs_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let m = random_hermitian(8, &mut rng);
            let e = sym_eigen(&m);
            let err = e.reconstruct().sub(m.as_matrix()).unwrap().norm_max();
            assert!(err < 1e-9 * m.as_matrix().norm_fro(), "err {err}");
            let gram = e.vectors.adjoint().matmul(&e.vectors).unwrap();
            assert!(gram.sub(&DenseMatrix::identity(8)).unwrap().norm_max() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn non_hermitian_rejected_with_residual() {
        let m = DenseMatrix::from_real(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        match HermitianMatrix::new(m) {
            Err(NumlinError::NotHermitian { residual }) => assert_eq!(residual, 2.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lyapunov_diagonal_closed_forms() {
        let a = DenseMatrix::from_real_diag(&[-0.2, -0.3, -0.4]);
        let q = lyapunov_solve(&a, &HermitianMatrix::identity(3)).unwrap();
        let want = DenseMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 1.25]);
        assert!(q.as_matrix().sub(&want).unwrap().norm_max() < 1e-12);

        let a = DenseMatrix::identity(2).scale(-1.0);
        let q = lyapunov_solve(&a, &HermitianMatrix::identity(2)).unwrap();
        let want = DenseMatrix::identity(2).scale(0.5);
        assert!(q.as_matrix().sub(&want).unwrap().norm_max() < 1e-14);
    }

    #[test]
    fn lyapunov_random_stable_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_real(8, &mut rng);
        let shift = spectral_abscissa(&a).unwrap() + 0.5;
        let a = a.sub(&DenseMatrix::identity(8).scale(shift)).unwrap();
        let w = HermitianMatrix::identity(8);
        let q = lyapunov_solve(&a, &w).unwrap();
        assert!(lyapunov_residual(&a, &q, &w).unwrap() <= 1e-8);
        assert!(lambda_min(&q) > 0.0);
    }

    #[test]
    fn lyapunov_complex_input() {
        let a = DenseMatrix::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => C64::new(-1.0, 2.0),
            (0, 1) => C64::new(0.3, -0.1),
            (1, 1) => C64::new(-0.5, -1.0),
            _ => C64::new(0.0, 0.0),
        });
        let w = HermitianMatrix::identity(2);
        let q = lyapunov_solve(&a, &w).unwrap();
        assert!(lyapunov_residual(&a, &q, &w).unwrap() < 1e-12);
    }

    #[test]
    fn lyapunov_singular_kronecker() {
        let a = DenseMatrix::from_real_diag(&[0.0, -1.0]);
        let err = lyapunov_solve(&a, &HermitianMatrix::identity(2)).unwrap_err();
        assert!(matches!(err, NumlinError::NoUniqueSolution(_)), "{err:?}");
    }

    #[test]
    fn lyapunov_unstable_returns_indefinite() {
        let a = DenseMatrix::from_real_diag(&[0.5, -1.0]);
        let q = lyapunov_solve(&a, &HermitianMatrix::identity(2)).unwrap();
        assert!(lambda_min(&q) < 0.0);
    }

    #[test]
    fn rank_examples() {
        let q = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 0.0]);
        let r = rank_with_tol(&q, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.rank, 2);
        let k = r.kernel_vectors();
        assert_eq!(k.len(), 1);
        assert!((k[0][2].norm() - 1.0).abs() < 1e-14);

        let r = rank_with_tol(&HermitianMatrix::zeros(3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.rank, 0);
        assert_eq!(r.kernel.unwrap().cols(), 3);

        let r = rank_with_tol(&HermitianMatrix::identity(3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.rank, 3);
        assert!(r.kernel.is_none());
    }

    #[test]
    fn rank_rejects_negative_eigenvalue() {
        let q = HermitianMatrix::from_real_diag(&[1.0, -0.1]);
        match rank_with_tol(&q, DEFAULT_RANK_TOL) {
            Err(NumlinError::NotPsd { eigenvalue }) => assert!((eigenvalue + 0.1).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cond_examples() {
        assert_eq!(cond_number(&HermitianMatrix::identity(4)).unwrap(), 1.0);
        let q = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 1.25]);
        assert!((cond_number(&q).unwrap() - 2.0).abs() < 1e-14);
        let q = HermitianMatrix::from_real_diag(&[1.0, 0.0]);
        assert!(matches!(
            cond_number(&q),
            Err(NumlinError::IndefiniteOrSingular { .. })
        ));
    }

    #[test]
    fn loewner_examples() {
        let i = HermitianMatrix::identity(3);
        let z = HermitianMatrix::zeros(3);
        assert!(loewner_geq(&i, &z, 0.0).unwrap());
        assert!(!loewner_geq(&z, &i, 0.0).unwrap());
        let q1 = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 1.25]);
        let q2 = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 0.0]);
        assert!(loewner_geq(&q1, &q2, 1e-9).unwrap());
        assert!(!loewner_geq(&q2, &q1, 1e-9).unwrap());
    }

    #[test]
    fn expm_trivial_cases() {
        let v = real_vec(&[1.0, -2.0, 3.0]);
        let out = expm_apply(&DenseMatrix::zeros(3, 3), 4.0, &v).unwrap();
        assert_eq!(out, v);

        let a = DenseMatrix::identity(2).scale(-1.0);
        let out = expm_apply(&a, 1.0, &real_vec(&[1.0, 0.0])).unwrap();
        assert!((out[0].re - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(out[1].norm(), 0.0);
    }

    // Independent oracle: plain truncated Taylor series.
    fn taylor_apply(a: &DenseMatrix, t: f64, v: &[C64], terms: usize) -> Vec<C64> {
        let mut term = v.to_vec();
        let mut acc = v.to_vec();
        for k in 1..terms {
            term = a.mul_vec(&term).unwrap();
            for z in term.iter_mut() {
                *z *= t / k as f64;
            }
            for (s, z) in acc.iter_mut().zip(&term) {
                *s += z;
            }
        }
        acc
    }

    #[test]
    fn expm_matches_taylor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_real(8, &mut rng);
            let v: Vec<C64> = (0..8).map(|_| C64::new(rng.random_range(-1.0..1.0), 0.0)).collect();
            let got = expm_apply(&a, 0.5, &v).unwrap();
            let want = taylor_apply(&a, 0.5, &v, 60);
            let err: Vec<C64> = got.iter().zip(&want).map(|(a, b)| a - b).collect();
            assert!(vec_norm(&err) <= 1e-10 * vec_norm(&want));
        }
    }

    #[test]
    fn expm_large_argument_matches_diagonal() {
        let a = DenseMatrix::from_real_diag(&[-3.0, 0.5]);
        let out = expm_apply(&a, 20.0, &real_vec(&[1.0, 1.0])).unwrap();
        assert!((out[0].re - (-60.0f64).exp()).abs() < 1e-12 * (-60.0f64).exp() + 1e-300);
        assert!((out[1].re / 10.0f64.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expm_overflow_detected() {
        let a = DenseMatrix::identity(2).scale(50.0);
        assert_eq!(
            expm_apply(&a, 100.0, &real_vec(&[1.0, 1.0])).unwrap_err(),
            NumlinError::MagnitudeOverflow
        );
    }

    #[test]
    fn general_eigenvalues_of_rotation_block() {
        let a = DenseMatrix::from_real(2, 2, &[-0.1, 2.0, -0.5, -0.1]);
        let ev = eigenvalues(&a).unwrap();
        assert!((ev[0].re + 0.1).abs() < 1e-14);
        assert!((ev[0].im.abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let m = DenseMatrix::from_real(2, 3, &[3.0, 0.0, 0.0, 0.0, -4.0, 0.0]);
        assert!((spectral_norm(&m) - 4.0).abs() < 1e-14);
    }
}
