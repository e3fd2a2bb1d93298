//! Dense symmetric-matrix kernels.
//!
//! Everything downstream works in an eigenbasis: the matrix exponential and
//! logarithm are spectral maps, and their Fréchet derivatives are entrywise
//! products with a table of first divided differences (Daleckiĭ–Kreĭn).
//! Matrices are dense `f64`; every returned symmetric matrix is exactly
//! symmetric entrywise.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative gap below which divided differences switch to the series branch.
pub const DD_SWITCH: f64 = 1e-7;

/// Iteration cap handed to the implicit QR eigensolver.
const EIG_MAX_ITER: usize = 100_000;
/// Cap on Jacobi sweeps used to refine the QR eigenpairs.
const JACOBI_SWEEPS: usize = 10;

/// Positive-definiteness floor relative to the spectral scale.
pub fn eig_floor(lambda_max: f64) -> f64 {
    1e-12 * lambda_max.max(1.0)
}

/// Real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Builds a symmetric matrix from a square, finite matrix, replacing it
    /// with `(A + Aᵀ)/2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidMatrix(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidMatrix("empty matrix".into()));
        }
        if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
            let n = m.nrows();
            return Err(Error::InvalidMatrix(format!(
                "non-finite entry at ({}, {})",
                pos % n,
                pos / n
            )));
        }
        Ok(Self::symmetrized(m))
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, n, f))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &DVector<f64>) -> Self {
        Self(DMatrix::from_diagonal(d))
    }

    /// Symmetrizes without validating shape or finiteness.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    /// Wraps a matrix the caller knows to be exactly symmetric.
    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    pub fn row_sums(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.0.row(i).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self(&self.0 * a)
    }

    /// `a·self + b·other`
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut out = self.0.clone();
        out.zip_apply(&other.0, |x, y| *x = a * *x + b * y);
        Self(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }
}

impl Add for &SymmetricMatrix {
    type Output = SymmetricMatrix;
    fn add(self, rhs: &SymmetricMatrix) -> SymmetricMatrix {
        SymmetricMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &SymmetricMatrix {
    type Output = SymmetricMatrix;
    fn sub(self, rhs: &SymmetricMatrix) -> SymmetricMatrix {
        SymmetricMatrix(&self.0 - &rhs.0)
    }
}

impl Mul<f64> for &SymmetricMatrix {
    type Output = SymmetricMatrix;
    fn mul(self, rhs: f64) -> SymmetricMatrix {
        self.scale(rhs)
    }
}

/// Symmetric matrix whose eigenvalues all exceed [`eig_floor`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(SymmetricMatrix);

impl SpdMatrix {
    pub fn new(m: SymmetricMatrix) -> Result<Self> {
        let values = m.0.clone().symmetric_eigenvalues();
        check_floor(values.min(), values.max())?;
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: SymmetricMatrix) -> Self {
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(SymmetricMatrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0 .0
    }

    pub fn into_symmetric(self) -> SymmetricMatrix {
        self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0 .0.clone().symmetric_eigenvalues().min()
    }
}

pub(crate) fn check_floor(min: f64, max: f64) -> Result<()> {
    let floor = eig_floor(max);
    if !(min > floor) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min,
            floor,
        });
    }
    Ok(())
}

/// Diagonal matrix stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMatrix(DVector<f64>);

impl DiagonalMatrix {
    pub fn new(d: DVector<f64>) -> Self {
        Self(d)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.0)
    }

    pub fn to_symmetric(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_diagonal(&self.0)
    }
}

/// Diagonal matrix with strictly positive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveDiagonal(DiagonalMatrix);

impl PositiveDiagonal {
    pub fn new(d: DVector<f64>) -> Result<Self> {
        if let Some(i) = d.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidMatrix(format!(
                "diagonal entry {i} = {} is not positive",
                d[i]
            )));
        }
        Ok(Self(DiagonalMatrix(d)))
    }

    pub fn identity(n: usize) -> Self {
        Self(DiagonalMatrix(DVector::from_element(n, 1.0)))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        self.0.as_vector()
    }

    pub fn as_diagonal(&self) -> &DiagonalMatrix {
        &self.0
    }

    /// `D A D`
    pub fn congruence(&self, a: &SymmetricMatrix) -> SymmetricMatrix {
        let d = self.as_vector();
        let mut m = a.as_matrix().clone();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                m[(i, j)] *= d[i] * d[j];
            }
        }
        SymmetricMatrix::symmetrized(m)
    }
}

/// Eigendecomposition `A = P Δ Pᵀ` with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `P f(Δ) Pᵀ`
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        SymmetricMatrix::symmetrized(scaled * self.vectors.transpose())
    }

    pub fn reconstruct(&self) -> SymmetricMatrix {
        self.spectral_map(|x| x)
    }
}

pub fn sym_eig(a: &SymmetricMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if !a.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(a.as_matrix().clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or(Error::NonConvergence { dim: n })?;
    let mut vectors = eig.eigenvectors;
    let values = jacobi_refine(a.as_matrix(), &mut vectors);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let sorted = DVector::from_fn(n, |k, _| values[order[k]]);
    let vectors = DMatrix::from_fn(n, n, |i, k| vectors[(i, order[k])]);
    Ok(EigenDecomposition { vectors, values: sorted })
}

/// Cyclic Jacobi sweeps on `VᵀAV`, accumulated into `v`; returns the diagonal.
///
/// The QR iteration alone can leave off-diagonal residue near `1e-6` on
/// matrices with a wide spread of eigenvalues.
fn jacobi_refine(a: &DMatrix<f64>, v: &mut DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut b = v.transpose() * a * &*v;
    b = (&b + b.transpose()) * 0.5;
    for _ in 0..JACOBI_SWEEPS {
        let scale = b.diagonal().amax();
        let mut off = 0.0_f64;
        for q in 1..n {
            for p in 0..q {
                off = off.max(b[(p, q)].abs());
            }
        }
        if off <= n as f64 * f64::EPSILON * scale {
            break;
        }
        for q in 1..n {
            for p in 0..q {
                let bpq = b[(p, q)];
                if bpq == 0.0 {
                    continue;
                }
                let tau = (b[(q, q)] - b[(p, p)]) / (2.0 * bpq);
                let t = tau.signum() / (tau.abs() + tau.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in (0..n).filter(|&k| k != p && k != q) {
                    let (bkp, bkq) = (b[(k, p)], b[(k, q)]);
                    b[(k, p)] = c * bkp - s * bkq;
                    b[(k, q)] = s * bkp + c * bkq;
                }
                let (bpp, bqq) = (b[(p, p)], b[(q, q)]);
                b[(p, p)] = bpp - t * bpq;
                b[(q, q)] = bqq + t * bpq;
                b[(p, q)] = 0.0;
                b[(q, p)] = 0.0;
                for k in (0..n).filter(|&k| k != p && k != q) {
                    b[(p, k)] = b[(k, p)];
                    b[(q, k)] = b[(k, q)];
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    b.diagonal()
}

pub fn mat_exp(a: &SymmetricMatrix) -> Result<SpdMatrix> {
    let eig = sym_eig(a)?;
    exp_from_eig(&eig)
}

pub(crate) fn exp_from_eig(eig: &EigenDecomposition) -> Result<SpdMatrix> {
    check_floor(eig.min().exp(), eig.max().exp())?;
    Ok(SpdMatrix(eig.spectral_map(f64::exp)))
}

pub fn mat_log(a: &SpdMatrix) -> Result<SymmetricMatrix> {
    let eig = sym_eig(a.as_symmetric())?;
    check_floor(eig.min(), eig.max())?;
    Ok(eig.spectral_map(f64::ln))
}

/// First divided difference of `exp`: `(eᵃ − eᵇ)/(a − b)`, extended by `eᵃ`
/// on the diagonal.
///
/// Evaluated as `e^m · sinh(t)/t` with `m = (a+b)/2`, `t = (a−b)/2`; below
/// [`DD_SWITCH`] the `sinh(t)/t` factor uses its series `1 + t²/6 + t⁴/120`.
pub fn divided_difference_exp(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let t = 0.5 * (a - b);
    if (a - b).abs() < DD_SWITCH {
        let t2 = t * t;
        m.exp() * (1.0 + t2 / 6.0 + t2 * t2 / 120.0)
    } else {
        m.exp() * (t.sinh() / t)
    }
}

/// First divided difference of `ln` on positive reals:
/// `(ln a − ln b)/(a − b)`, extended by `1/a` on the diagonal.
///
/// Uses `ln(a/b) = 2 artanh(z)`, `z = (a−b)/(a+b)`, which stays accurate for
/// nearly equal arguments.
pub fn divided_difference_log(a: f64, b: f64) -> f64 {
    let s = a + b;
    let z = ((a - b) / s).abs();
    let ratio = if z.abs() < 1e-4 {
        let z2 = z * z;
        1.0 + z2 / 3.0 + z2 * z2 / 5.0
    } else {
        z.atanh() / z
    };
    2.0 * ratio / s
}

/// Fréchet derivative of a spectral matrix function at a fixed base point:
/// `X ↦ P[(PᵀXP) ∘ F]Pᵀ` with `F` the divided-difference table.
#[derive(Debug, Clone)]
pub struct FrechetKernel {
    basis: DMatrix<f64>,
    table: DMatrix<f64>,
}

impl FrechetKernel {
    /// Derivative of `exp` at `P Δ Pᵀ`.
    pub fn exp_at(eig: &EigenDecomposition) -> Self {
        let d = &eig.values;
        let n = d.len();
        let table = DMatrix::from_fn(n, n, |i, j| divided_difference_exp(d[i], d[j]));
        Self {
            basis: eig.vectors.clone(),
            table,
        }
    }

    /// Derivative of `log` at the SPD matrix `P Λ Pᵀ`.
    pub fn log_at(eig: &EigenDecomposition) -> Result<Self> {
        check_floor(eig.min(), eig.max())?;
        let l = &eig.values;
        let n = l.len();
        let table = DMatrix::from_fn(n, n, |i, j| divided_difference_log(l[i], l[j]));
        Ok(Self {
            basis: eig.vectors.clone(),
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn apply(&self, x: &SymmetricMatrix) -> Result<SymmetricMatrix> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.dim(),
            });
        }
        let p = &self.basis;
        let mut inner = p.transpose() * x.as_matrix() * p;
        inner.component_mul_assign(&self.table);
        Ok(SymmetricMatrix::symmetrized(p * inner * p.transpose()))
    }
}

/// Directional derivative of `exp` at `at` in direction `x`.
pub fn dexp(at: &SymmetricMatrix, x: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    at.check_same_dim(x)?;
    FrechetKernel::exp_at(&sym_eig(at)?).apply(x)
}

/// Directional derivative of `log` at the SPD matrix `at` in direction `x`.
pub fn dlog(at: &SpdMatrix, x: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    at.as_symmetric().check_same_dim(x)?;
    FrechetKernel::log_at(&sym_eig(at.as_symmetric())?)?.apply(x)
}
