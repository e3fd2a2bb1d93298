//! The off-log chart `Cor⁺(n) → Hol(n)`: matrix logarithm with the diagonal
//! zeroed, its inverse `S ↦ exp(D(S) + S)` where `D(S)` is the unique diagonal
//! making the exponential unit-diagonal, the differentials of both, and the
//! permutation-invariant metrics pulled back through it.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::chart::FlatChart;
use crate::error::{Error, Result};
use crate::space::{FlatCoordinate, QuadraticForm, SpaceElement, SpaceTag};
use crate::symkernel::{
    check_floor, dlog, mat_log, sym_eig, DiagonalMatrix, EigenDecomposition, FrechetKernel, SpdMatrix,
    SymmetricMatrix,
};

/// Residual up to which producers snap a diagonal to its exact target value.
pub(crate) const SNAP_TOL: f64 = 1e-8;

/// Full-rank correlation matrix: SPD with exactly unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(SpdMatrix);

impl CorrelationMatrix {
    pub fn new(m: SymmetricMatrix) -> Result<Self> {
        let n = m.dim();
        let mut a = m.into_matrix();
        for i in 0..n {
            let d = a[(i, i)];
            if (d - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidMatrix(format!("diagonal entry {i} = {d} is not 1")));
            }
            a[(i, i)] = 1.0;
        }
        for j in 0..n {
            for i in 0..n {
                let v = a[(i, j)];
                if v.abs() > 1.0 + 1e-12 {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({i}, {j}) = {v} lies outside [-1, 1]"
                    )));
                }
                a[(i, j)] = v.clamp(-1.0, 1.0);
            }
        }
        let sym = SymmetricMatrix::from_symmetric_unchecked(a);
        Ok(Self(SpdMatrix::new(sym)?))
    }

    /// Snaps the diagonal of a matrix known to be unit-diagonal up to
    /// [`SNAP_TOL`] and whose spectrum lies in `[lower, upper]`.
    pub(crate) fn from_near_unit_diagonal(mut a: DMatrix<f64>, lower: f64, upper: f64) -> Result<Self> {
        let n = a.nrows();
        for i in 0..n {
            let d = a[(i, i)];
            if !((d - 1.0).abs() <= SNAP_TOL) {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal entry {i} = {d} is not within {SNAP_TOL:e} of 1"
                )));
            }
            a[(i, i)] = 1.0;
        }
        a.apply(|v| *v = v.clamp(-1.0, 1.0));
        let sym = SymmetricMatrix::symmetrized(a);
        // Snapping moves eigenvalues by at most the snapped residual.
        if check_floor(lower - n as f64 * SNAP_TOL, upper).is_ok() {
            Ok(Self(SpdMatrix::new_unchecked(sym)))
        } else {
            Ok(Self(SpdMatrix::new(sym)?))
        }
    }

    pub fn identity(n: usize) -> Self {
        Self(SpdMatrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_spd(&self) -> &SpdMatrix {
        &self.0
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        self.0.as_symmetric()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.as_symmetric().get(i, j)
    }

    /// `Kᵀ C K` for the permutation matrix `K` with `K[perm[i], i] = 1`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(SpdMatrix::new_unchecked(permute(self.as_symmetric(), perm)))
    }
}

impl SpaceElement for CorrelationMatrix {
    const TAG: SpaceTag = SpaceTag::Correlation;

    fn as_symmetric(&self) -> &SymmetricMatrix {
        CorrelationMatrix::as_symmetric(self)
    }

    fn from_symmetric(m: SymmetricMatrix) -> Result<Self> {
        CorrelationMatrix::new(m)
    }

    fn into_symmetric(self) -> SymmetricMatrix {
        self.0.into_symmetric()
    }
}

/// `(Kᵀ A K)[i, j] = A[perm[i], perm[j]]`
pub fn permute(a: &SymmetricMatrix, perm: &[usize]) -> SymmetricMatrix {
    let n = a.dim();
    let m = a.as_matrix();
    SymmetricMatrix::from_symmetric_unchecked(DMatrix::from_fn(n, n, |i, j| m[(perm[i], perm[j])]))
}

/// Symmetric matrix with identically zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HollowMatrix(SymmetricMatrix);

impl HollowMatrix {
    pub fn new(m: SymmetricMatrix) -> Result<Self> {
        if let Some(i) = (0..m.dim()).find(|&i| m.get(i, i) != 0.0) {
            return Err(Error::InvalidMatrix(format!(
                "hollow matrix has nonzero diagonal entry {i} = {}",
                m.get(i, i)
            )));
        }
        Ok(Self(m))
    }

    /// The `Off` operator: zeroes the diagonal.
    pub fn off(m: SymmetricMatrix) -> Self {
        let mut a = m.into_matrix();
        a.fill_diagonal(0.0);
        Self(SymmetricMatrix::from_symmetric_unchecked(a))
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Ok(Self::off(SymmetricMatrix::from_fn(n, f)?))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(permute(&self.0, perm))
    }
}

impl SpaceElement for HollowMatrix {
    const TAG: SpaceTag = SpaceTag::Hollow;

    fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    fn from_symmetric(m: SymmetricMatrix) -> Result<Self> {
        HollowMatrix::new(m)
    }

    fn into_symmetric(self) -> SymmetricMatrix {
        self.0
    }
}

impl FlatCoordinate for HollowMatrix {
    fn from_linear(m: SymmetricMatrix) -> Result<Self> {
        snap_hollow(m)
    }

    fn zeros(n: usize) -> Self {
        Self(SymmetricMatrix::zeros(n))
    }
}

pub(crate) fn snap_hollow(m: SymmetricMatrix) -> Result<HollowMatrix> {
    let scale = m.max_abs().max(1.0);
    let residual = m.diagonal().amax();
    if !(residual <= SNAP_TOL * scale) {
        return Err(Error::InvalidMatrix(format!(
            "diagonal residual {residual:e} too large for a hollow matrix"
        )));
    }
    Ok(HollowMatrix::off(m))
}

/// Permutation-invariant quadratic form on `Hol(n)`:
/// `q(X) = α tr(X²) + β 𝟙ᵀX²𝟙 + γ (𝟙ᵀX𝟙)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolQuadraticForm {
    alpha: f64,
    beta: f64,
    gamma: f64,
    n: usize,
}

impl HolQuadraticForm {
    /// Rejects coefficients that do not give an inner product on `Hol(n)`.
    /// For `n = 3` the form needs `α = 0`; for `n = 2`, `α = β = 0`.
    pub fn new(alpha: f64, beta: f64, gamma: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        let checks = [
            (2.0 * alpha + (nf - 2.0) * beta > 0.0, "2α + (n−2)β > 0"),
            (alpha + (nf - 1.0) * (beta + nf * gamma) > 0.0, "α + (n−1)(β + nγ) > 0"),
        ];
        validate_form(alpha, beta, gamma, n, &checks)?;
        Ok(Self { alpha, beta, gamma, n })
    }

    /// Frobenius form for `n ≥ 4`, and the simplest admissible member below.
    pub fn default_for(n: usize) -> Result<Self> {
        match n {
            2 => Self::new(0.0, 0.0, 1.0, n),
            3 => Self::new(0.0, 1.0, 0.0, n),
            _ => Self::new(1.0, 0.0, 0.0, n),
        }
    }

    pub fn coefficients(&self) -> (f64, f64, f64) {
        (self.alpha, self.beta, self.gamma)
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

pub(crate) fn validate_form(
    alpha: f64,
    beta: f64,
    gamma: f64,
    n: usize,
    checks: &[(bool, &str)],
) -> Result<()> {
    if ![alpha, beta, gamma].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidForm("non-finite coefficient".into()));
    }
    match n {
        0 | 1 => return Err(Error::InvalidForm(format!("no inner product needed for n = {n}"))),
        2 if alpha != 0.0 || beta != 0.0 => {
            return Err(Error::InvalidForm("n = 2 requires α = β = 0".into()))
        }
        3 if alpha != 0.0 => return Err(Error::InvalidForm("n = 3 requires α = 0".into())),
        4.. if !(alpha > 0.0) => return Err(Error::InvalidForm("α > 0 required".into())),
        _ => {}
    }
    // With α = β = 0 forced, only the last (γ) constraint is informative at n = 2.
    let active = if n == 2 { &checks[checks.len() - 1..] } else { checks };
    for (ok, what) in active {
        if !ok {
            return Err(Error::InvalidForm(format!("constraint {what} violated")));
        }
    }
    Ok(())
}

fn check_form_dim(n: usize, x: usize) {
    assert_eq!(n, x, "quadratic form dimension does not match the matrix");
}

pub fn q_eval(form: &HolQuadraticForm, x: &HollowMatrix) -> f64 {
    form.eval(x)
}

pub fn inner(form: &HolQuadraticForm, x: &HollowMatrix, y: &HollowMatrix) -> f64 {
    form.inner(x, y)
}

impl QuadraticForm<HollowMatrix> for HolQuadraticForm {
    fn eval(&self, x: &HollowMatrix) -> f64 {
        self.inner(x, x)
    }

    fn inner(&self, x: &HollowMatrix, y: &HollowMatrix) -> f64 {
        check_form_dim(self.n, x.dim());
        check_form_dim(self.n, y.dim());
        let (xm, ym) = (x.as_matrix(), y.as_matrix());
        let xr = x.as_symmetric().row_sums();
        let yr = y.as_symmetric().row_sums();
        self.alpha * xm.dot(ym) + self.beta * xr.dot(&yr) + self.gamma * xr.sum() * yr.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagSolverOptions {
    /// Stop once the next fixed-point step has Euclidean norm at most this.
    pub eps: f64,
    pub max_iter: usize,
    /// Number of previous residuals used by Anderson mixing; 0 runs the
    /// plain fixed-point iteration.
    pub anderson_depth: usize,
    /// Fixed-point iterations run before switching to Newton's method on
    /// `tr exp(D + S) − tr D`; `None` never switches.
    pub newton_after: Option<usize>,
}

impl Default for DiagSolverOptions {
    fn default() -> Self {
        Self {
            eps: 1e-12,
            max_iter: 10_000,
            anderson_depth: 5,
            newton_after: Some(0),
        }
    }
}

impl DiagSolverOptions {
    /// The unaccelerated iteration `D_{k+1} = D_k − log Diag(exp(D_k + S))`.
    pub fn plain() -> Self {
        Self {
            anderson_depth: 0,
            newton_after: None,
            ..Self::default()
        }
    }
}

/// Converged diagonal together with the eigendecomposition of `D + S`.
#[derive(Debug, Clone)]
pub struct DiagSolution {
    pub diag: DiagonalMatrix,
    pub eig: EigenDecomposition,
    pub iterations: usize,
    /// Norm of the fixed-point step at the returned iterate.
    pub last_step: f64,
}

/// Unique diagonal `D` with `exp(D + S)` unit-diagonal. The fixed-point map
/// is `G(D) = D − log Diag(exp(D + S))`, started at `D = 0`; the iterate is
/// returned once `‖G(D) − D‖ ≤ eps`.
pub fn solve_diag(s: &HollowMatrix, opts: &DiagSolverOptions) -> Result<DiagonalMatrix> {
    Ok(solve_diag_from(s, None, opts)?.diag)
}

/// Eigendecomposition of `D + S` and the fixed-point step `−log Diag(exp(D + S))`.
fn step_at(a: &mut DMatrix<f64>, d: &DVector<f64>) -> Result<(EigenDecomposition, DVector<f64>)> {
    a.set_diagonal(d);
    let eig = sym_eig(&SymmetricMatrix::from_symmetric_unchecked(a.clone()))?;
    let f = -exp_diagonal(&eig).map(f64::ln);
    Ok((eig, f))
}

/// [`solve_diag`] from an arbitrary starting diagonal. The fixed point is
/// unique, so the start only changes the iteration count.
///
/// With `anderson_depth > 0` the next iterate mixes the last few images of
/// `G` to minimize the linearized residual; the history restarts whenever the
/// residual grows. The fixed point is also the minimizer of the strictly
/// convex `F(D) = tr exp(D + S) − tr D`, whose Hessian is `H⁰`; after
/// `newton_after` iterations the solver continues with damped Newton steps
/// on `F` from the best iterate so far.
pub fn solve_diag_from(
    s: &HollowMatrix,
    init: Option<&DVector<f64>>,
    opts: &DiagSolverOptions,
) -> Result<DiagSolution> {
    let n = s.dim();
    let mut d = match init {
        Some(v) if v.len() != n => return Err(Error::DimensionMismatch { expected: n, found: v.len() }),
        Some(v) => v.clone(),
        None => DVector::zeros(n),
    };
    let mut a = s.as_matrix().clone();
    let mut last_step = f64::INFINITY;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let fixed_point_iters = opts.newton_after.map_or(opts.max_iter, |k| k.min(opts.max_iter));
    for k in 0..fixed_point_iters {
        let (eig, f) = step_at(&mut a, &d)?;
        let norm = f.norm();
        if !norm.is_finite() {
            last_step = norm;
            break;
        }
        if norm <= opts.eps {
            return Ok(DiagSolution { diag: DiagonalMatrix::new(d), eig, iterations: k, last_step: norm });
        }
        if best.as_ref().is_none_or(|(b, _)| norm < *b) {
            best = Some((norm, d.clone()));
        }
        if norm > last_step {
            history.clear();
        }
        last_step = norm;
        let g = &d + &f;
        d = if opts.anderson_depth == 0 {
            g
        } else {
            history.push_back((f.clone(), g.clone()));
            if history.len() > opts.anderson_depth + 1 {
                history.pop_front();
            }
            anderson_mix(&history).unwrap_or(g)
        };
    }
    if opts.newton_after.is_some() {
        let start = best.map_or_else(|| DVector::zeros(n), |(_, d)| d);
        return newton_diag(&mut a, start, fixed_point_iters, opts);
    }
    Err(Error::MaxIterationsExceeded {
        solver: "off-log diagonal solver",
        iterations: opts.max_iter,
        residual: last_step,
    })
}

/// `F(D) = tr exp(D + S) − tr D` from the spectrum of `D + S`.
fn convex_objective(eig: &EigenDecomposition, d: &DVector<f64>) -> f64 {
    eig.values.iter().map(|v| v.exp()).sum::<f64>() - d.sum()
}

/// Damped Newton on `F`, with Newton systems `H⁰ δ = 𝟙 − Diag(exp(D + S))`
/// solved by Jacobi-preconditioned conjugate gradients.
fn newton_diag(
    a: &mut DMatrix<f64>,
    mut d: DVector<f64>,
    spent: usize,
    opts: &DiagSolverOptions,
) -> Result<DiagSolution> {
    const ARMIJO: f64 = 1e-4;
    let (mut eig, mut f) = step_at(a, &d)?;
    let mut value = convex_objective(&eig, &d);
    let mut norm = f.norm();
    for k in spent..opts.max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm <= opts.eps {
            return Ok(DiagSolution { diag: DiagonalMatrix::new(d), eig, iterations: k, last_step: norm });
        }
        let kernel = FrechetKernel::exp_at(&eig);
        let w = exp_diagonal(&eig);
        let grad = w.add_scalar(-1.0);
        let forcing = (0.5 * norm.sqrt()).min(0.1);
        let delta = conjugate_gradient(&kernel, &(-&grad), forcing)?;
        let slope = grad.dot(&delta);
        let mut t = 1.0;
        loop {
            let trial = &d + &delta * t;
            let (trial_eig, trial_f) = step_at(a, &trial)?;
            let trial_value = convex_objective(&trial_eig, &trial);
            let trial_norm = trial_f.norm();
            let decrease = trial_value <= value + ARMIJO * t * slope;
            // F stops resolving decreases near the minimizer; the residual still does.
            let rounding = (value - trial_value).abs() <= 64.0 * f64::EPSILON * value.abs() && trial_norm < norm;
            if trial_value.is_finite() && (decrease || rounding) {
                d = trial;
                eig = trial_eig;
                f = trial_f;
                value = trial_value;
                norm = f.norm();
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::LineSearchStalled { iteration: k, gradient_norm: grad.norm() });
            }
        }
    }
    Err(Error::MaxIterationsExceeded {
        solver: "off-log diagonal solver",
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// `v ↦ Diag(d exp(Diag v))`, the action of `H⁰` at the kernel's base point.
fn h0_apply(kernel: &FrechetKernel, v: &DVector<f64>) -> DVector<f64> {
    let p = kernel.basis();
    let mut inner = p.transpose() * DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| v[i] * p[(i, j)]);
    inner.component_mul_assign(kernel.table());
    let pm = p * inner;
    DVector::from_fn(p.nrows(), |i, _| pm.row(i).dot(&p.row(i)))
}

/// Solves `H⁰ x = b` to relative residual `rtol`.
fn conjugate_gradient(kernel: &FrechetKernel, b: &DVector<f64>, rtol: f64) -> Result<DVector<f64>> {
    let p2 = kernel.basis().map(|v| v * v);
    let precond = (&p2 * kernel.table()).component_mul(&p2).column_sum().map(|h| 1.0 / h);
    let n = b.len();
    let target = rtol * b.norm();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = r.component_mul(&precond);
    let mut dir = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..4 * n.max(10) {
        if r.norm() <= target {
            break;
        }
        let q = h0_apply(kernel, &dir);
        let curvature = dir.dot(&q);
        if !(curvature > 0.0) {
            return Err(Error::Singular("H⁰ lost positive definiteness".into()));
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &dir, 1.0);
        r.axpy(-alpha, &q, 1.0);
        z = r.component_mul(&precond);
        let rz_next = r.dot(&z);
        dir = &z + &dir * (rz_next / rz);
        rz = rz_next;
    }
    Ok(x)
}

/// `g_k − ΔG γ` with `γ = argmin ‖f_k − ΔF γ‖` over the stored residuals `f`
/// and images `g`.
fn anderson_mix(history: &VecDeque<(DVector<f64>, DVector<f64>)>) -> Option<DVector<f64>> {
    let m = history.len().checked_sub(1).filter(|m| *m > 0)?;
    let n = history[0].0.len();
    let mut df = DMatrix::zeros(n, m);
    let mut dg = DMatrix::zeros(n, m);
    for j in 0..m {
        df.set_column(j, &(&history[j + 1].0 - &history[j].0));
        dg.set_column(j, &(&history[j + 1].1 - &history[j].1));
    }
    let (f, g) = &history[m];
    let svd = df.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let gamma = svd.solve(f, tol).ok()?;
    let next = g - dg * gamma;
    next.iter().all(|v| v.is_finite()).then_some(next)
}

/// `Diag(P e^Δ Pᵀ)` without forming the product.
fn exp_diagonal(eig: &EigenDecomposition) -> DVector<f64> {
    let p = &eig.vectors;
    let e = eig.values.map(f64::exp);
    DVector::from_fn(p.nrows(), |i, _| (0..p.ncols()).map(|j| p[(i, j)] * p[(i, j)] * e[j]).sum())
}

/// `Off ∘ log`
pub fn ol_log(c: &CorrelationMatrix) -> Result<HollowMatrix> {
    Ok(HollowMatrix::off(mat_log(c.as_spd())?))
}

/// `S ↦ exp(D(S) + S)`
pub fn ol_exp(s: &HollowMatrix) -> Result<CorrelationMatrix> {
    OffLog::default().exp(s)
}

fn exp_at_solution(sol: &DiagSolution) -> Result<CorrelationMatrix> {
    let eig = &sol.eig;
    let out = eig.spectral_map(f64::exp);
    CorrelationMatrix::from_near_unit_diagonal(out.into_matrix(), eig.min().exp(), eig.max().exp())
}

/// `H⁰_{il} = Σ_{j,k} P_ij P_ik P_lj P_lk exp⁽¹⁾(δ_j, δ_k)` for `D(S) + S = PΔPᵀ`.
pub fn h0_matrix(s: &HollowMatrix) -> Result<SpdMatrix> {
    let sol = solve_diag_from(s, None, &DiagSolverOptions::default())?;
    let kernel = FrechetKernel::exp_at(&sol.eig);
    SpdMatrix::new(SymmetricMatrix::symmetrized(h0_from_kernel(&kernel)))
}

/// Row `i` of `H⁰` is the diagonal of `P B_i Pᵀ` with
/// `B_i[j, k] = P_ij P_ik E_jk`; one matrix product per row.
fn h0_from_kernel(kernel: &FrechetKernel) -> DMatrix<f64> {
    let p = kernel.basis();
    let table = kernel.table();
    let n = p.nrows();
    let mut h = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        b.copy_from(table);
        for k in 0..n {
            for j in 0..n {
                b[(j, k)] *= p[(i, j)] * p[(i, k)];
            }
        }
        let m = p * &b;
        for l in 0..n {
            h[(i, l)] = m.row(l).dot(&p.row(l));
        }
    }
    h
}

/// Differential of `D` at `S`: `−diag((H⁰)⁻¹ Diag(d_{D(S)+S} exp(Y)))`.
pub fn d_diag(s: &HollowMatrix, y: &HollowMatrix) -> Result<DiagonalMatrix> {
    let point = OffLogPoint::new(s, None, &DiagSolverOptions::default())?;
    let w = point.kernel.apply(y.as_symmetric())?;
    Ok(DiagonalMatrix::new(-point.solve_h0(&w.diagonal())?))
}

/// `Off ∘ d_C log`
pub fn ol_dlog(c: &CorrelationMatrix, x: &HollowMatrix) -> Result<HollowMatrix> {
    Ok(HollowMatrix::off(dlog(c.as_spd(), x.as_symmetric())?))
}

/// `Y ↦ d_{D(S)+S} exp(Y + d_S D(Y))`
pub fn ol_dexp(s: &HollowMatrix, y: &HollowMatrix) -> Result<HollowMatrix> {
    OffLog::default().dexp(s, y)
}

/// Base-point data shared by the inverse-chart differential.
struct OffLogPoint {
    kernel: FrechetKernel,
    h0: Cholesky<f64, nalgebra::Dyn>,
}

impl OffLogPoint {
    fn new(s: &HollowMatrix, init: Option<&DVector<f64>>, opts: &DiagSolverOptions) -> Result<Self> {
        let sol = solve_diag_from(s, init, opts)?;
        let kernel = FrechetKernel::exp_at(&sol.eig);
        let h = SymmetricMatrix::symmetrized(h0_from_kernel(&kernel)).into_matrix();
        let h0 = Cholesky::new(h).ok_or_else(|| Error::Singular("H⁰ is not positive definite".into()))?;
        Ok(Self { kernel, h0 })
    }

    fn solve_h0(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.h0.solve(rhs);
        if z.iter().all(|v| v.is_finite()) {
            Ok(z)
        } else {
            Err(Error::Singular("H⁰ solve produced non-finite values".into()))
        }
    }

    fn dexp(&self, y: &HollowMatrix) -> Result<HollowMatrix> {
        let w = self.kernel.apply(y.as_symmetric())?;
        let z = self.solve_h0(&w.diagonal())?;
        let correction = self.kernel.apply(&SymmetricMatrix::from_diagonal(&z))?;
        snap_hollow(&w - &correction)
    }
}

/// The off-log chart with its solver settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OffLog {
    pub solver: DiagSolverOptions,
}

impl OffLog {
    pub fn new(solver: DiagSolverOptions) -> Self {
        Self { solver }
    }

    /// Chart applied pointwise.
    pub fn log_many(&self, cs: &[CorrelationMatrix]) -> Result<Vec<HollowMatrix>> {
        cs.par_iter().map(ol_log).collect()
    }

    /// Inverse chart applied pointwise.
    pub fn exp_many(&self, ss: &[HollowMatrix]) -> Result<Vec<CorrelationMatrix>> {
        ss.par_iter()
            .map(|s| exp_at_solution(&solve_diag_from(s, None, &self.solver)?))
            .collect()
    }
}

impl FlatChart for OffLog {
    type Coord = HollowMatrix;
    type Form = HolQuadraticForm;

    fn log(&self, c: &CorrelationMatrix) -> Result<HollowMatrix> {
        ol_log(c)
    }

    fn exp(&self, s: &HollowMatrix) -> Result<CorrelationMatrix> {
        exp_at_solution(&solve_diag_from(s, None, &self.solver)?)
    }

    fn dlog(&self, c: &CorrelationMatrix, x: &HollowMatrix) -> Result<HollowMatrix> {
        ol_dlog(c, x)
    }

    fn dexp(&self, s: &HollowMatrix, y: &HollowMatrix) -> Result<HollowMatrix> {
        if s.dim() != y.dim() {
            return Err(Error::DimensionMismatch { expected: s.dim(), found: y.dim() });
        }
        OffLogPoint::new(s, None, &self.solver)?.dexp(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symkernel::mat_exp;
    use crate::testutil::{random_correlation, random_hollow, rel_err, rng};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn two_by_two(off: f64) -> SymmetricMatrix {
        SymmetricMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { off }).unwrap()
    }

    fn hollow_pair(s: f64) -> HollowMatrix {
        HollowMatrix::from_fn(2, |_, _| s).unwrap()
    }

    /// Literal quadruple sum.
    fn h0_brute_force(s: &HollowMatrix) -> DMatrix<f64> {
        let sol = solve_diag_from(s, None, &DiagSolverOptions::default()).unwrap();
        let (p, d) = (&sol.eig.vectors, &sol.eig.values);
        let n = s.dim();
        DMatrix::from_fn(n, n, |i, l| {
            let mut acc = 0.0;
            for j in 0..n {
                for k in 0..n {
                    acc += p[(i, j)] * p[(i, k)] * p[(l, j)] * p[(l, k)]
                        * crate::symkernel::divided_difference_exp(d[j], d[k]);
                }
            }
            acc
        })
    }

    #[test]
    fn correlation_constructor() {
        assert!(CorrelationMatrix::new(two_by_two(0.5)).is_ok());
        assert!(CorrelationMatrix::new(two_by_two(1.0)).is_err());
        let bad_diag = SymmetricMatrix::from_fn(2, |i, j| if i == j { 1.1 } else { 0.2 }).unwrap();
        assert!(CorrelationMatrix::new(bad_diag).is_err());
        let near = SymmetricMatrix::from_fn(2, |i, j| if i == j { 1.0 + 1e-14 } else { 0.2 }).unwrap();
        let c = CorrelationMatrix::new(near).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn hollow_constructor() {
        assert!(HollowMatrix::new(two_by_two(0.3)).is_err());
        let h = HollowMatrix::off(two_by_two(0.3));
        assert_eq!(h.get(0, 0), 0.0);
        assert_eq!(h.get(0, 1), 0.3);
    }

    #[test]
    fn solve_diag_zero_input() {
        let d = solve_diag(&HollowMatrix::zeros(5), &DiagSolverOptions::default()).unwrap();
        assert!(d.as_vector().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn solve_diag_two_by_two_closed_form() {
        let s: f64 = 0.3;
        let d = solve_diag(&hollow_pair(s), &DiagSolverOptions::default()).unwrap();
        let expected = -s.cosh().ln();
        assert!((expected + 0.0443408).abs() < 1e-7);
        for v in d.as_vector().iter() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn accelerated_and_plain_iterations_agree() {
        let mut r = rng(13);
        for (n, scale) in [(10, 0.4), (30, 0.25)] {
            let s = random_hollow(&mut r, n, scale);
            let plain = solve_diag_from(&s, None, &DiagSolverOptions::plain()).unwrap();
            let opts = DiagSolverOptions { newton_after: None, ..DiagSolverOptions::default() };
            let fast = solve_diag_from(&s, None, &opts).unwrap();
            assert!((plain.diag.as_vector() - fast.diag.as_vector()).amax() <= 1e-11);
            assert!(fast.iterations <= plain.iterations);
            assert!(fast.last_step <= 1e-12 && plain.last_step <= 1e-12);
        }
    }

    #[test]
    fn newton_phase_reaches_the_same_fixed_point() {
        let mut r = rng(14);
        for (n, scale) in [(6, 0.5), (20, 0.6)] {
            let s = random_hollow(&mut r, n, scale);
            let plain = solve_diag_from(&s, None, &DiagSolverOptions::plain()).unwrap();
            for newton_after in [0, 3, 40] {
                let opts = DiagSolverOptions { newton_after: Some(newton_after), ..DiagSolverOptions::default() };
                let newton = solve_diag_from(&s, None, &opts).unwrap();
                assert!((plain.diag.as_vector() - newton.diag.as_vector()).amax() <= 1e-11);
                assert!(newton.last_step <= 1e-12);
            }
        }
    }

    #[test]
    fn solver_converges_on_wide_spectrum() {
        // Spectrum of S spanning about [-6, 6]: the fixed-point contraction is slow here.
        let mut r = rng(15);
        let s = random_hollow(&mut r, 40, 6.0 / (2.0 * 40f64.sqrt()));
        let sol = solve_diag_from(&s, None, &DiagSolverOptions::default()).unwrap();
        assert!(sol.last_step <= 1e-12);
        let c = exp_at_solution(&sol).unwrap();
        assert!(c.as_matrix().diagonal().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn solve_diag_gives_unit_diagonal() {
        let mut r = rng(11);
        let s = random_hollow(&mut r, 10, 0.4);
        let d = solve_diag(&s, &DiagSolverOptions::default()).unwrap();
        let e = mat_exp(&(s.as_symmetric() + &d.to_symmetric())).unwrap();
        assert!(e.as_matrix().diagonal().iter().all(|v| (v - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn solve_diag_reports_iteration_cap() {
        let mut r = rng(12);
        let s = random_hollow(&mut r, 6, 0.5);
        let opts = DiagSolverOptions { max_iter: 2, ..DiagSolverOptions::plain() };
        match solve_diag(&s, &opts) {
            Err(Error::MaxIterationsExceeded { iterations, residual, .. }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12 && residual.is_finite());
            }
            other => panic!("expected MaxIterationsExceeded, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_reaches_the_same_fixed_point() {
        let mut r = rng(13);
        let s = random_hollow(&mut r, 8, 0.3);
        let opts = DiagSolverOptions::default();
        let cold = solve_diag_from(&s, None, &opts).unwrap();
        let guess = cold.diag.as_vector().map(|v| v * 0.9);
        let warm = solve_diag_from(&s, Some(&guess), &opts).unwrap();
        assert!((cold.diag.as_vector() - warm.diag.as_vector()).norm() < 1e-11);
    }

    #[test]
    fn ol_log_and_exp_two_by_two() {
        let rho: f64 = 0.6;
        let l = ol_log(&CorrelationMatrix::new(two_by_two(rho)).unwrap()).unwrap();
        assert_eq!(l.get(0, 0), 0.0);
        assert!((l.get(0, 1) - rho.atanh()).abs() < 1e-14);
        assert!((l.get(0, 1) - 0.693147).abs() < 1e-6);

        let s: f64 = 0.8;
        let c = ol_exp(&hollow_pair(s)).unwrap();
        assert!((c.get(0, 1) - s.tanh()).abs() < 1e-13);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn ol_identity_cases() {
        assert!(ol_log(&CorrelationMatrix::identity(4)).unwrap().as_symmetric().max_abs() < 1e-15);
        let c = ol_exp(&HollowMatrix::zeros(4)).unwrap();
        assert!((c.as_matrix() - DMatrix::identity(4, 4)).norm() < 1e-15);
    }

    #[test]
    fn round_trips() {
        let mut r = rng(14);
        for n in [2, 5, 10] {
            let c = random_correlation(&mut r, n);
            let back = ol_exp(&ol_log(&c).unwrap()).unwrap();
            assert!(rel_err(back.as_matrix(), c.as_matrix()) <= 1e-8);

            let s = random_hollow(&mut r, n, 0.3);
            let back = ol_log(&ol_exp(&s).unwrap()).unwrap();
            assert!(rel_err(back.as_matrix(), s.as_matrix()) <= 1e-8);
        }
    }

    #[test]
    fn h0_at_zero_is_identity() {
        let h = h0_matrix(&HollowMatrix::zeros(4)).unwrap();
        assert!((h.as_matrix() - DMatrix::identity(4, 4)).norm() < 1e-14);
    }

    #[test]
    fn h0_matches_brute_force() {
        let mut r = rng(15);
        let pair = hollow_pair(0.4);
        let h = h0_matrix(&pair).unwrap();
        assert!((h.as_matrix() - h0_brute_force(&pair)).norm() < 1e-12);
        assert!(h.min_eigenvalue() > 0.0);
        for n in [3, 5, 6] {
            let s = random_hollow(&mut r, n, 0.5);
            let h = h0_matrix(&s).unwrap();
            assert!((h.as_matrix() - h0_brute_force(&s)).amax() <= 1e-10);
        }
    }

    #[test]
    fn d_diag_zero_and_linear() {
        let mut r = rng(16);
        let s = random_hollow(&mut r, 5, 0.4);
        let z = d_diag(&s, &HollowMatrix::zeros(5)).unwrap();
        assert!(z.as_vector().amax() == 0.0);
        let y = random_hollow(&mut r, 5, 1.0);
        let one = d_diag(&s, &y).unwrap();
        let two = d_diag(&s, &HollowMatrix::off(y.as_symmetric().scale(2.0))).unwrap();
        assert!((two.as_vector() - one.as_vector() * 2.0).amax() <= 1e-12 * one.as_vector().amax().max(1.0));
    }

    #[test]
    fn d_diag_matches_finite_difference() {
        let mut r = rng(17);
        let h = 1e-6;
        let opts = DiagSolverOptions::default();
        for _ in 0..4 {
            let s = random_hollow(&mut r, 4, 0.5);
            let y = random_hollow(&mut r, 4, 1.0);
            let plus = solve_diag(&s.lin_comb(1.0, &y, h).unwrap(), &opts).unwrap();
            let minus = solve_diag(&s.lin_comb(1.0, &y, -h).unwrap(), &opts).unwrap();
            let fd = (plus.as_vector() - minus.as_vector()) / (2.0 * h);
            let an = d_diag(&s, &y).unwrap();
            assert!((an.as_vector() - &fd).norm() <= 1e-4 * fd.norm());
        }
    }

    #[test]
    fn ol_dlog_cases() {
        let mut r = rng(18);
        let x = random_hollow(&mut r, 5, 1.0);
        let c = random_correlation(&mut r, 5);
        assert!(ol_dlog(&c, &HollowMatrix::zeros(5)).unwrap().as_symmetric().max_abs() == 0.0);
        let at_i = ol_dlog(&CorrelationMatrix::identity(5), &x).unwrap();
        assert!((at_i.as_matrix() - x.as_matrix()).norm() < 1e-14);

        let h = 1e-6;
        let plus = CorrelationMatrix::new(c.as_symmetric().lin_comb(1.0, x.as_symmetric(), h)).unwrap();
        let minus = CorrelationMatrix::new(c.as_symmetric().lin_comb(1.0, x.as_symmetric(), -h)).unwrap();
        let fd = (ol_log(&plus).unwrap().as_matrix() - ol_log(&minus).unwrap().as_matrix()) / (2.0 * h);
        assert!(rel_err(ol_dlog(&c, &x).unwrap().as_matrix(), &fd) <= 1e-5);
    }

    #[test]
    fn ol_dexp_cases() {
        let mut r = rng(19);
        let s = random_hollow(&mut r, 10, 0.3);
        assert!(ol_dexp(&s, &HollowMatrix::zeros(10)).unwrap().as_symmetric().max_abs() == 0.0);

        let y = random_hollow(&mut r, 10, 1.0);
        let v = ol_dexp(&s, &y).unwrap();
        let back = ol_dlog(&ol_exp(&s).unwrap(), &v).unwrap();
        assert!(rel_err(back.as_matrix(), y.as_matrix()) <= 1e-8);

        let s = random_hollow(&mut r, 4, 0.5);
        let y = random_hollow(&mut r, 4, 1.0);
        let h = 1e-6;
        let fd = (ol_exp(&s.lin_comb(1.0, &y, h).unwrap()).unwrap().as_matrix()
            - ol_exp(&s.lin_comb(1.0, &y, -h).unwrap()).unwrap().as_matrix())
            / (2.0 * h);
        assert!(rel_err(ol_dexp(&s, &y).unwrap().as_matrix(), &fd) <= 1e-4);
    }

    #[test]
    fn quadratic_form_values() {
        let f = HolQuadraticForm::new(1.0, 0.0, 0.0, 4).unwrap();
        assert_eq!(q_eval(&f, &HollowMatrix::zeros(4)), 0.0);

        let frob2 = HolQuadraticForm::new(0.0, 0.0, 1.0, 2).unwrap();
        let x = hollow_pair(1.0);
        assert_eq!(q_eval(&frob2, &x), 4.0);
        // tr(X²) for the 2x2 pair, via α on a larger embedding of the same entries
        let x4 = HollowMatrix::from_fn(4, |i, j| if (i, j) == (0, 1) || (i, j) == (1, 0) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(q_eval(&f, &x4), 2.0);

        let all = HolQuadraticForm::new(1.0, 1.0, 1.0, 4).unwrap();
        let ones = HollowMatrix::from_fn(4, |_, _| 1.0).unwrap();
        let brute = {
            let m = ones.as_matrix();
            let sq = m * m;
            let tr = sq.trace();
            let quad: f64 = sq.iter().sum();
            let lin: f64 = m.iter().sum();
            tr + quad + lin * lin
        };
        assert_eq!(brute, 192.0);
        assert!((q_eval(&all, &ones) - brute).abs() < 1e-12);
    }

    #[test]
    fn form_constraints() {
        assert!(HolQuadraticForm::new(0.0, 0.0, 1.0, 4).is_err());
        assert!(HolQuadraticForm::new(1.0, -1.0, 0.0, 4).is_err());
        assert!(HolQuadraticForm::new(1.0, 0.0, -1.0, 4).is_err());
        assert!(HolQuadraticForm::new(1.0, 0.0, 0.0, 3).is_err());
        assert!(HolQuadraticForm::new(0.0, 1.0, 0.0, 3).is_ok());
        assert!(HolQuadraticForm::new(0.0, 1.0, -1.0, 3).is_err());
        assert!(HolQuadraticForm::new(0.0, 1.0, 0.0, 2).is_err());
        assert!(HolQuadraticForm::new(0.0, 0.0, -1.0, 2).is_err());
        for n in 2..7 {
            assert!(HolQuadraticForm::default_for(n).is_ok());
        }
    }

    #[test]
    fn inner_product_identities() {
        let mut r = rng(20);
        let f = HolQuadraticForm::new(1.0, 0.0, 0.0, 5).unwrap();
        let x = random_hollow(&mut r, 5, 1.0);
        let y = random_hollow(&mut r, 5, 1.0);
        assert_eq!(inner(&f, &x, &HollowMatrix::zeros(5)), 0.0);
        let tr_xy = (x.as_matrix() * y.as_matrix()).trace();
        assert!((inner(&f, &x, &y) - tr_xy).abs() < 1e-12);

        let g = HolQuadraticForm::new(0.7, 0.3, -0.02, 5).unwrap();
        assert!((inner(&g, &x, &x) - q_eval(&g, &x)).abs() < 1e-12);
        let polar = 0.5 * (q_eval(&g, &x.add(&y).unwrap()) - q_eval(&g, &x) - q_eval(&g, &y));
        assert!((inner(&g, &x, &y) - polar).abs() < 1e-12);
        let z = random_hollow(&mut r, 5, 1.0);
        let lhs = inner(&g, &x.lin_comb(2.0, &z, -0.5).unwrap(), &y);
        let rhs = 2.0 * inner(&g, &x, &y) - 0.5 * inner(&g, &z, &y);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn q_positive_for_random_valid_forms() {
        let mut r = rng(21);
        let mut forms = Vec::new();
        while forms.len() < 20 {
            let n = r.random_range(2..9);
            let (a, b, g) = (r.random_range(-1.0..2.0), r.random_range(-1.0..2.0), r.random_range(-1.0..1.0));
            let (a, b) = match n {
                2 => (0.0, 0.0),
                3 => (0.0, b),
                _ => (a, b),
            };
            if let Ok(f) = HolQuadraticForm::new(a, b, g, n) {
                forms.push(f);
            }
        }
        for f in &forms {
            for _ in 0..50 {
                let x = random_hollow(&mut r, f.dim(), 1.0);
                assert!(q_eval(f, &x) > 0.0);
            }
        }
    }

    #[test]
    fn riemannian_operations() {
        let mut r = rng(22);
        let chart = OffLog::default();
        let c = random_correlation(&mut r, 6);
        let c2 = random_correlation(&mut r, 6);
        let form = HolQuadraticForm::default_for(6).unwrap();

        let g = chart.geodesic(&c, &c, 0.37).unwrap();
        assert!(rel_err(g.as_matrix(), c.as_matrix()) < 1e-10);
        assert!(rel_err(chart.geodesic(&c, &c2, 0.0).unwrap().as_matrix(), c.as_matrix()) < 1e-10);
        assert!(rel_err(chart.geodesic(&c, &c2, 1.0).unwrap().as_matrix(), c2.as_matrix()) < 1e-10);

        let v = chart.log_map(&c, &c2).unwrap();
        let back = chart.exp_map(&c, &v).unwrap();
        assert!(rel_err(back.as_matrix(), c2.as_matrix()) <= 1e-8);

        let d = chart.distance(&form, &c, &c2).unwrap();
        assert!((chart.metric_norm_sq(&form, &c, &v).unwrap().sqrt() - d).abs() <= 1e-8 * d);

        let mean = chart.frechet_mean(&[c.clone(), c2.clone()]).unwrap();
        let mid = chart.geodesic(&c, &c2, 0.5).unwrap();
        assert!(rel_err(mean.as_matrix(), mid.as_matrix()) <= 1e-10);
        let single = chart.frechet_mean(std::slice::from_ref(&c)).unwrap();
        assert!(rel_err(single.as_matrix(), c.as_matrix()) <= 1e-10);
        assert!(chart.frechet_mean(&[]).is_err());
    }

    #[test]
    fn distance_two_by_two_closed_form() {
        let rho: f64 = 0.45;
        let gamma = 2.5;
        let form = HolQuadraticForm::new(0.0, 0.0, gamma, 2).unwrap();
        let c = CorrelationMatrix::new(two_by_two(rho)).unwrap();
        let d = OffLog::default().distance(&form, &CorrelationMatrix::identity(2), &c).unwrap();
        assert!((d - 2.0 * rho.atanh() * gamma.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn parallel_transport_preserves_inner_product() {
        let mut r = rng(23);
        let chart = OffLog::default();
        let form = HolQuadraticForm::new(1.0, 0.2, 0.01, 10).unwrap();
        let c = random_correlation(&mut r, 10);
        let c2 = random_correlation(&mut r, 10);
        let x = random_hollow(&mut r, 10, 1.0);
        let y = random_hollow(&mut r, 10, 1.0);
        let before = chart.metric_inner(&form, &c, &x, &y).unwrap();
        let tx = chart.parallel_transport(&c, &c2, &x).unwrap();
        let ty = chart.parallel_transport(&c, &c2, &y).unwrap();
        let after = chart.metric_inner(&form, &c2, &tx, &ty).unwrap();
        assert!((before - after).abs() <= 1e-8 * before.abs().max(1.0));
    }

    #[test]
    fn permutation_equivariance() {
        let mut r = rng(24);
        let c = random_correlation(&mut r, 7);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut r);
        let lhs = ol_log(&c.permuted(&perm)).unwrap();
        let rhs = ol_log(&c).unwrap().permuted(&perm);
        assert!((lhs.as_matrix() - rhs.as_matrix()).amax() <= 1e-12);

        let s = random_hollow(&mut r, 7, 0.4);
        let lhs = ol_exp(&s.permuted(&perm)).unwrap();
        let rhs = ol_exp(&s).unwrap().permuted(&perm);
        assert!((lhs.as_matrix() - rhs.as_matrix()).amax() <= 1e-12);
    }

    #[test]
    fn exp_many_matches_pointwise() {
        let mut r = rng(25);
        let ss: Vec<HollowMatrix> = (0..70).map(|_| random_hollow(&mut r, 4, 0.4)).collect();
        let chart = OffLog::default();
        let batch = chart.exp_many(&ss).unwrap();
        for (s, c) in ss.iter().zip(&batch) {
            assert!(rel_err(c.as_matrix(), ol_exp(s).unwrap().as_matrix()) < 1e-11);
        }
    }
}
