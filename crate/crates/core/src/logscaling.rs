//! The log-scaling chart `Cor⁺(n) → Row₀(n)`: scale `C` on both sides by the
//! unique positive diagonal `D` making `log(DCD)` have zero row sums, then
//! take the logarithm. The inverse is `S ↦ Cor(exp S)`.
//!
//! `D` minimizes the strictly convex `F(D) = ½ 𝟙ᵀDCD𝟙 − tr log D`, solved by
//! a damped Newton method on the diagonal entries.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::chart::FlatChart;
use crate::error::{Error, Result};
use crate::offlog::{snap_hollow, validate_form, CorrelationMatrix, HollowMatrix, SNAP_TOL};
use crate::space::{FlatCoordinate, QuadraticForm, SpaceElement, SpaceTag};
use crate::symkernel::{
    dlog, mat_log, sym_eig, DiagonalMatrix, FrechetKernel, PositiveDiagonal, SpdMatrix, SymmetricMatrix,
};

/// Symmetric matrix whose rows all sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RowZeroMatrix(SymmetricMatrix);

const ROW_SUM_TOL: f64 = 1e-10;

impl RowZeroMatrix {
    /// Rejects any row sum above `1e-10` (relative to the largest entry when
    /// that exceeds one).
    pub fn new(m: SymmetricMatrix) -> Result<Self> {
        let residual = m.row_sums().amax();
        if !(residual <= ROW_SUM_TOL * m.max_abs().max(1.0)) {
            return Err(Error::InvalidMatrix(format!(
                "row sums up to {residual:e} for a zero-row-sum matrix"
            )));
        }
        Ok(Self(m))
    }

    /// Orthogonal projection onto `Row₀(n)` of a matrix whose row sums are
    /// already at most `1e-8`; larger residuals are an error.
    pub fn repair(m: SymmetricMatrix) -> Result<Self> {
        let r = m.row_sums();
        let residual = r.amax();
        if !(residual <= SNAP_TOL * m.max_abs().max(1.0)) {
            return Err(Error::InvalidMatrix(format!(
                "row-sum residual {residual:e} too large to repair"
            )));
        }
        Ok(Self(project_row_zero(m)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(SymmetricMatrix::zeros(n))
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
        Self(crate::offlog::permute(&self.0, perm))
    }
}

/// `A − u𝟙ᵀ − 𝟙uᵀ` with `u = (r − (𝟙ᵀr / 2n) 𝟙) / n`, `r = A𝟙`.
pub fn project_row_zero(m: SymmetricMatrix) -> SymmetricMatrix {
    let n = m.dim();
    let nf = n as f64;
    let r = m.row_sums();
    let shift = r.sum() / (2.0 * nf);
    let u = r.map(|v| (v - shift) / nf);
    let mut a = m.into_matrix();
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] -= u[i] + u[j];
        }
    }
    SymmetricMatrix::from_symmetric_unchecked(a)
}

impl SpaceElement for RowZeroMatrix {
    const TAG: SpaceTag = SpaceTag::RowZero;

    fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    fn from_symmetric(m: SymmetricMatrix) -> Result<Self> {
        RowZeroMatrix::new(m)
    }

    fn into_symmetric(self) -> SymmetricMatrix {
        self.0
    }
}

impl FlatCoordinate for RowZeroMatrix {
    fn from_linear(m: SymmetricMatrix) -> Result<Self> {
        RowZeroMatrix::repair(m)
    }

    fn zeros(n: usize) -> Self {
        RowZeroMatrix::zeros(n)
    }
}

/// Permutation-invariant quadratic form on `Row₀(n)`:
/// `q*(Y) = α tr(Y²) + β tr(Diag(Y)²) + γ tr(Y)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowZeroQuadraticForm {
    alpha: f64,
    beta: f64,
    gamma: f64,
    n: usize,
}

impl RowZeroQuadraticForm {
    pub fn new(alpha: f64, beta: f64, gamma: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        let checks = [
            (nf * alpha + (nf - 2.0) * beta > 0.0, "nα + (n−2)β > 0"),
            (nf * alpha + (nf - 1.0) * (beta + nf * gamma) > 0.0, "nα + (n−1)(β + nγ) > 0"),
        ];
        validate_form(alpha, beta, gamma, n, &checks)?;
        Ok(Self { alpha, beta, gamma, n })
    }

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

impl QuadraticForm<RowZeroMatrix> for RowZeroQuadraticForm {
    fn eval(&self, y: &RowZeroMatrix) -> f64 {
        self.inner(y, y)
    }

    fn inner(&self, x: &RowZeroMatrix, y: &RowZeroMatrix) -> f64 {
        assert_eq!(self.n, x.dim(), "quadratic form dimension does not match the matrix");
        assert_eq!(self.n, y.dim(), "quadratic form dimension does not match the matrix");
        let (xm, ym) = (x.as_matrix(), y.as_matrix());
        self.alpha * xm.dot(ym)
            + self.beta * xm.diagonal().dot(&ym.diagonal())
            + self.gamma * xm.trace() * ym.trace()
    }
}

pub fn q_star_eval(form: &RowZeroQuadraticForm, y: &RowZeroMatrix) -> f64 {
    form.eval(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingOptions {
    /// Target Euclidean norm of the gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            armijo: 1e-4,
        }
    }
}

/// Newton iterate history.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub diag: PositiveDiagonal,
    pub iterations: usize,
    /// `‖∇F‖` at every iterate, starting point included.
    pub gradient_norms: Vec<f64>,
    pub objective: Vec<f64>,
}

fn objective(a: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    0.5 * d.dot(&(a * d)) - d.iter().map(|v| v.ln()).sum::<f64>()
}

fn gradient(a: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    a * d - d.map(|v| 1.0 / v)
}

/// Positive diagonal `D` minimizing `½ 𝟙ᵀDΣD𝟙 − tr log D`.
pub fn solve_scaling(sigma: &SpdMatrix, opts: &ScalingOptions) -> Result<PositiveDiagonal> {
    Ok(newton_scaling(sigma, opts)?.diag)
}

fn newton_step(a: &DMatrix<f64>, d: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let mut h = a.clone();
    for i in 0..d.len() {
        h[(i, i)] += 1.0 / (d[i] * d[i]);
    }
    let chol = Cholesky::new(h).ok_or_else(|| Error::Singular("Newton Hessian Σ + D⁻²".into()))?;
    Ok(-chol.solve(g))
}

/// Full Newton steps taken after the gradient test passes.
const POLISH_STEPS: usize = 2;

/// Newton's method with gradient `ΣD𝟙 − D⁻¹𝟙` and Hessian `Σ + D⁻²`, started
/// at `Diag(Σ)^{-1/2}`, with step halving to stay positive and satisfy Armijo.
/// Once `‖∇F‖ ≤ tol`, up to [`POLISH_STEPS`] full steps refine `D` while they
/// keep the gradient within `tol`; these are not recorded in the report.
pub fn newton_scaling(sigma: &SpdMatrix, opts: &ScalingOptions) -> Result<ScalingReport> {
    let a = sigma.as_matrix();
    let mut d = a.diagonal().map(|v| 1.0 / v.sqrt());
    let mut f = objective(a, &d);
    let mut g = gradient(a, &d);
    let mut gradient_norms = vec![g.norm()];
    let mut values = vec![f];

    for k in 0..=opts.max_iter {
        let gn = g.norm();
        if gn <= opts.tol {
            for _ in 0..POLISH_STEPS {
                let step = newton_step(a, &d, &g)?;
                if step.norm() <= 4.0 * f64::EPSILON * d.norm() {
                    break;
                }
                let trial = &d + step;
                if !trial.iter().all(|v| *v > 0.0) {
                    break;
                }
                let gt = gradient(a, &trial);
                if !(gt.norm() <= opts.tol) {
                    break;
                }
                d = trial;
                g = gt;
            }
            return Ok(ScalingReport {
                diag: PositiveDiagonal::new(d)?,
                iterations: k,
                gradient_norms,
                objective: values,
            });
        }
        if k == opts.max_iter {
            break;
        }
        let step = newton_step(a, &d, &g)?;
        let slope = g.dot(&step);

        let rounding = 64.0 * f64::EPSILON * f.abs().max(1.0);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &d + &step * alpha;
            if trial.iter().all(|v| *v > 0.0) {
                let ft = objective(a, &trial);
                let gt = gradient(a, &trial);
                let armijo = ft <= f + opts.armijo * alpha * slope;
                // Near the minimizer F changes below its own rounding error.
                let flat = -alpha * slope <= rounding && gt.norm() < gn;
                if armijo || flat {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (trial, ft, gt) = accepted.ok_or(Error::LineSearchStalled {
            iteration: k,
            gradient_norm: gn,
        })?;
        d = trial;
        f = ft;
        g = gt;
        gradient_norms.push(g.norm());
        values.push(f);
    }
    Err(Error::MaxIterationsExceeded {
        solver: "log-scaling Newton solver",
        iterations: opts.max_iter,
        residual: g.norm(),
    })
}

/// Optimal scaling of a correlation matrix: `Σ = D C D`.
#[derive(Debug, Clone)]
pub struct ScalingState {
    pub delta: PositiveDiagonal,
    pub sigma: SpdMatrix,
}

impl ScalingState {
    pub fn from_correlation(c: &CorrelationMatrix, opts: &ScalingOptions) -> Result<Self> {
        let delta = solve_scaling(c.as_spd(), opts)?;
        let sigma = SpdMatrix::new_unchecked(delta.congruence(c.as_symmetric()));
        Ok(Self { delta, sigma })
    }
}

/// `log(D*(C) C D*(C))`
pub fn ls_log(c: &CorrelationMatrix) -> Result<RowZeroMatrix> {
    LogScaling::default().log(c)
}

/// `Cor ∘ exp`
pub fn ls_exp(s: &RowZeroMatrix) -> Result<CorrelationMatrix> {
    let eig = sym_eig(s.as_symmetric())?;
    let sigma = eig.spectral_map(f64::exp).into_matrix();
    let inv_delta = sigma.diagonal().map(|v| 1.0 / v.sqrt());
    let n = s.dim();
    let c = DMatrix::from_fn(n, n, |i, j| sigma[(i, j)] * inv_delta[i] * inv_delta[j]);
    let (lo, hi) = (inv_delta.min(), inv_delta.max());
    CorrelationMatrix::from_near_unit_diagonal(c, eig.min().exp() * lo * lo, eig.max().exp() * hi * hi)
}

/// `X⁰ = −2 diag((I + Σ)⁻¹ ΔXΔ𝟙)` with `Δ = Diag(Σ)^{1/2}`.
pub fn x0_term(sigma: &SpdMatrix, x: &HollowMatrix) -> Result<DiagonalMatrix> {
    if sigma.dim() != x.dim() {
        return Err(Error::DimensionMismatch { expected: sigma.dim(), found: x.dim() });
    }
    let s = sigma.as_matrix();
    let delta = s.diagonal().map(f64::sqrt);
    let n = s.nrows();
    let rhs = DVector::from_fn(n, |i, _| delta[i] * (0..n).map(|j| x.get(i, j) * delta[j]).sum::<f64>());
    let chol = Cholesky::new(s + DMatrix::identity(n, n)).ok_or_else(|| Error::Singular("I + Σ".into()))?;
    Ok(DiagonalMatrix::new(chol.solve(&rhs) * -2.0))
}

/// `d_Σ log(ΔXΔ + ½(X⁰Σ + ΣX⁰))`
pub fn ls_dlog(c: &CorrelationMatrix, x: &HollowMatrix) -> Result<RowZeroMatrix> {
    LogScaling::default().dlog(c, x)
}

/// `Δ⁻¹(W − ½(Δ⁻²Diag(W)Σ + ΣDiag(W)Δ⁻²))Δ⁻¹` with `W = d_S exp(Y)`,
/// `Σ = exp S`, `Δ = Diag(Σ)^{1/2}`.
pub fn ls_dexp(s: &RowZeroMatrix, y: &RowZeroMatrix) -> Result<HollowMatrix> {
    LogScaling::default().dexp(s, y)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogScaling {
    pub scaling: ScalingOptions,
}

impl LogScaling {
    pub fn new(scaling: ScalingOptions) -> Self {
        Self { scaling }
    }

    pub fn log_many(&self, cs: &[CorrelationMatrix]) -> Result<Vec<RowZeroMatrix>> {
        cs.par_iter().map(|c| self.log(c)).collect()
    }

    pub fn exp_many(&self, ss: &[RowZeroMatrix]) -> Result<Vec<CorrelationMatrix>> {
        ss.par_iter().map(ls_exp).collect()
    }
}

impl FlatChart for LogScaling {
    type Coord = RowZeroMatrix;
    type Form = RowZeroQuadraticForm;

    fn log(&self, c: &CorrelationMatrix) -> Result<RowZeroMatrix> {
        let state = ScalingState::from_correlation(c, &self.scaling)?;
        RowZeroMatrix::repair(mat_log(&state.sigma)?)
    }

    fn exp(&self, s: &RowZeroMatrix) -> Result<CorrelationMatrix> {
        ls_exp(s)
    }

    fn dlog(&self, c: &CorrelationMatrix, x: &HollowMatrix) -> Result<RowZeroMatrix> {
        if c.dim() != x.dim() {
            return Err(Error::DimensionMismatch { expected: c.dim(), found: x.dim() });
        }
        let state = ScalingState::from_correlation(c, &self.scaling)?;
        let sigma = state.sigma.as_matrix();
        let delta = sigma.diagonal().map(f64::sqrt);
        let x0 = x0_term(&state.sigma, x)?.into_vector();
        let n = c.dim();
        let m = DMatrix::from_fn(n, n, |i, j| {
            delta[i] * x.get(i, j) * delta[j] + 0.5 * (x0[i] + x0[j]) * sigma[(i, j)]
        });
        let out = dlog(&state.sigma, &SymmetricMatrix::symmetrized(m))?;
        RowZeroMatrix::repair(out)
    }

    fn dexp(&self, s: &RowZeroMatrix, y: &RowZeroMatrix) -> Result<HollowMatrix> {
        if s.dim() != y.dim() {
            return Err(Error::DimensionMismatch { expected: s.dim(), found: y.dim() });
        }
        let eig = sym_eig(s.as_symmetric())?;
        let w = FrechetKernel::exp_at(&eig).apply(y.as_symmetric())?.into_matrix();
        let sigma = eig.spectral_map(f64::exp).into_matrix();
        let delta_sq = sigma.diagonal();
        let n = s.dim();
        let out = DMatrix::from_fn(n, n, |i, j| {
            let correction = 0.5 * (w[(i, i)] / delta_sq[i] + w[(j, j)] / delta_sq[j]) * sigma[(i, j)];
            (w[(i, j)] - correction) / (delta_sq[i] * delta_sq[j]).sqrt()
        });
        snap_hollow(SymmetricMatrix::symmetrized(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offlog::{ol_exp, OffLog};
    use crate::testutil::{random_correlation, random_hollow, random_symmetric, rel_err, rng};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn two_by_two(rho: f64) -> CorrelationMatrix {
        CorrelationMatrix::new(SymmetricMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { rho }).unwrap())
            .unwrap()
    }

    fn random_row_zero(r: &mut impl Rng, n: usize, scale: f64) -> RowZeroMatrix {
        RowZeroMatrix::new(project_row_zero(random_symmetric(r, n, scale))).unwrap()
    }

    #[test]
    fn row_zero_constructor_and_repair() {
        let m = SymmetricMatrix::from_fn(2, |i, j| if i == j { -0.5 } else { 0.5 }).unwrap();
        assert!(RowZeroMatrix::new(m.clone()).is_ok());
        let off = m.lin_comb(1.0, &SymmetricMatrix::identity(2), 1e-9);
        assert!(RowZeroMatrix::new(off.clone()).is_err());
        let fixed = RowZeroMatrix::repair(off).unwrap();
        assert!(fixed.as_symmetric().row_sums().amax() < 1e-15);
        let far = m.lin_comb(1.0, &SymmetricMatrix::identity(2), 1e-3);
        assert!(RowZeroMatrix::repair(far).is_err());
    }

    #[test]
    fn projection_is_orthogonal_and_symmetric() {
        let mut r = rng(30);
        let a = random_symmetric(&mut r, 6, 1.0);
        let p = project_row_zero(a.clone());
        assert!(p.row_sums().amax() < 1e-14);
        let m = p.as_matrix();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
        // residual is orthogonal to Row₀
        let resid = a.as_matrix() - p.as_matrix();
        let y = random_row_zero(&mut r, 6, 1.0);
        assert!(resid.dot(y.as_matrix()).abs() < 1e-13);
    }

    #[test]
    fn scaling_special_cases() {
        let opts = ScalingOptions::default();
        let d = solve_scaling(&SpdMatrix::identity(4), &opts).unwrap();
        assert!(d.as_vector().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let c = 6.25;
        let s = SpdMatrix::new(SymmetricMatrix::identity(3).scale(c)).unwrap();
        let d = solve_scaling(&s, &opts).unwrap();
        assert!(d.as_vector().iter().all(|v| (v - 1.0 / c.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn scaling_two_by_two_closed_form() {
        let rho: f64 = 0.5;
        let a = 0.5 * (1.0 - rho * rho).ln();
        let b = rho.atanh();
        let expected = (-(a + b)).exp().sqrt();
        let c = two_by_two(rho);
        let report = newton_scaling(c.as_spd(), &ScalingOptions::default()).unwrap();
        for v in report.diag.as_vector().iter() {
            assert!((v - expected).abs() < 1e-14);
        }
        let g = gradient(c.as_matrix(), report.diag.as_vector());
        assert!(g.norm() <= 1e-12);
    }

    #[test]
    fn newton_decreases_and_converges_quadratically() {
        let mut r = rng(31);
        for n in [5, 20] {
            let c = random_correlation(&mut r, n);
            let report = newton_scaling(c.as_spd(), &ScalingOptions::default()).unwrap();
            let rounding = 1e-13 * report.objective[0].abs().max(1.0);
            assert!(report.objective.windows(2).all(|w| w[1] <= w[0] + rounding));
            assert!(*report.gradient_norms.last().unwrap() <= 1e-12);
            let g = &report.gradient_norms;
            if g.len() >= 3 {
                let k = g.len() - 1;
                log::debug!("final residual ratio {}", g[k] / g[k - 1]);
                assert!(g[k] <= 0.1 * g[k - 1]);
            }
        }
    }

    #[test]
    fn newton_reports_iteration_cap() {
        let mut r = rng(32);
        let c = random_correlation(&mut r, 6);
        let opts = ScalingOptions { max_iter: 1, tol: 1e-30, ..Default::default() };
        assert!(matches!(
            solve_scaling(c.as_spd(), &opts),
            Err(Error::MaxIterationsExceeded { .. } | Error::LineSearchStalled { .. })
        ));
    }

    #[test]
    fn ls_log_two_by_two() {
        let rho: f64 = 0.6;
        let b = rho.atanh();
        let s = ls_log(&two_by_two(rho)).unwrap();
        assert!((s.get(0, 0) + b).abs() < 1e-13);
        assert!((s.get(1, 1) + b).abs() < 1e-13);
        assert!((s.get(0, 1) - b).abs() < 1e-13);
        let back = ls_exp(&s).unwrap();
        assert!((back.get(0, 1) - rho).abs() < 1e-13);
    }

    #[test]
    fn identity_cases() {
        assert!(ls_log(&CorrelationMatrix::identity(5)).unwrap().as_symmetric().max_abs() < 1e-15);
        let c = ls_exp(&RowZeroMatrix::zeros(5)).unwrap();
        assert!((c.as_matrix() - DMatrix::identity(5, 5)).norm() < 1e-15);
    }

    #[test]
    fn round_trips() {
        let mut r = rng(33);
        for n in [2, 5, 10] {
            let c = random_correlation(&mut r, n);
            let s = ls_log(&c).unwrap();
            assert!(s.as_symmetric().row_sums().amax() < 1e-13);
            let back = ls_exp(&s).unwrap();
            assert!(rel_err(back.as_matrix(), c.as_matrix()) <= 1e-8);

            let s = random_row_zero(&mut r, n, 0.4);
            let back = ls_log(&ls_exp(&s).unwrap()).unwrap();
            assert!(rel_err(back.as_matrix(), s.as_matrix()) <= 1e-8);
        }
    }

    #[test]
    fn x0_term_cases() {
        let mut r = rng(34);
        let c = random_correlation(&mut r, 5);
        let state = ScalingState::from_correlation(&c, &ScalingOptions::default()).unwrap();
        let z = x0_term(&state.sigma, &HollowMatrix::zeros(5)).unwrap();
        assert_eq!(z.as_vector().amax(), 0.0);

        let x = random_hollow(&mut r, 5, 1.0);
        let one = x0_term(&state.sigma, &x).unwrap();
        let three = x0_term(&state.sigma, &HollowMatrix::off(x.as_symmetric().scale(3.0))).unwrap();
        assert!((three.as_vector() - one.as_vector() * 3.0).amax() < 1e-13);

        // dense re-evaluation: explicit inverse and explicit Δ matrices
        let s = state.sigma.as_matrix();
        let delta = DMatrix::from_diagonal(&s.diagonal().map(f64::sqrt));
        let inv = (DMatrix::identity(5, 5) + s).try_inverse().unwrap();
        let dense = inv * (&delta * x.as_matrix() * &delta) * DVector::from_element(5, 1.0) * -2.0;
        assert!((one.as_vector() - dense).amax() < 1e-13);
    }

    #[test]
    fn ls_dlog_cases() {
        let mut r = rng(35);
        let c = random_correlation(&mut r, 5);
        assert!(ls_dlog(&c, &HollowMatrix::zeros(5)).unwrap().as_symmetric().max_abs() < 1e-15);
        for _ in 0..3 {
            let x = random_hollow(&mut r, 5, 1.0);
            let out = ls_dlog(&c, &x).unwrap();
            assert!(out.as_symmetric().row_sums().amax() <= 1e-8);

            let h = 1e-6;
            let plus = CorrelationMatrix::new(c.as_symmetric().lin_comb(1.0, x.as_symmetric(), h)).unwrap();
            let minus = CorrelationMatrix::new(c.as_symmetric().lin_comb(1.0, x.as_symmetric(), -h)).unwrap();
            let fd = (ls_log(&plus).unwrap().as_matrix() - ls_log(&minus).unwrap().as_matrix()) / (2.0 * h);
            assert!(rel_err(out.as_matrix(), &fd) <= 1e-4);
        }
    }

    #[test]
    fn ls_dexp_cases() {
        let mut r = rng(36);
        let s = random_row_zero(&mut r, 6, 0.4);
        assert!(ls_dexp(&s, &RowZeroMatrix::zeros(6)).unwrap().as_symmetric().max_abs() < 1e-15);

        let y = random_row_zero(&mut r, 6, 1.0);
        let v = ls_dexp(&s, &y).unwrap();
        let back = ls_dlog(&ls_exp(&s).unwrap(), &v).unwrap();
        assert!(rel_err(back.as_matrix(), y.as_matrix()) <= 1e-8);

        let h = 1e-6;
        let fd = (ls_exp(&s.lin_comb(1.0, &y, h).unwrap()).unwrap().as_matrix()
            - ls_exp(&s.lin_comb(1.0, &y, -h).unwrap()).unwrap().as_matrix())
            / (2.0 * h);
        assert!(rel_err(v.as_matrix(), &fd) <= 1e-4);
    }

    #[test]
    fn q_star_values_and_constraints() {
        let mut r = rng(37);
        let f = RowZeroQuadraticForm::new(1.0, 0.0, 0.0, 5).unwrap();
        assert_eq!(q_star_eval(&f, &RowZeroMatrix::zeros(5)), 0.0);
        let y = random_row_zero(&mut r, 5, 1.0);
        let tr_y2 = (y.as_matrix() * y.as_matrix()).trace();
        assert!((q_star_eval(&f, &y) - tr_y2).abs() < 1e-12);

        let g = RowZeroQuadraticForm::new(0.8, 0.5, 0.3, 5).unwrap();
        let brute = {
            let m = y.as_matrix();
            let mut tr2 = 0.0;
            let mut diag2 = 0.0;
            let mut tr = 0.0;
            for i in 0..5 {
                for k in 0..5 {
                    tr2 += m[(i, k)] * m[(k, i)];
                }
                diag2 += m[(i, i)] * m[(i, i)];
                tr += m[(i, i)];
            }
            0.8 * tr2 + 0.5 * diag2 + 0.3 * tr * tr
        };
        assert!((q_star_eval(&g, &y) - brute).abs() < 1e-12);

        assert!(RowZeroQuadraticForm::new(0.0, 1.0, 0.0, 4).is_err());
        assert!(RowZeroQuadraticForm::new(1.0, -3.0, 0.0, 4).is_err());
        assert!(RowZeroQuadraticForm::new(1.0, 0.0, -1.0, 4).is_err());
        assert!(RowZeroQuadraticForm::new(0.0, 1.0, 0.0, 3).is_ok());
        assert!(RowZeroQuadraticForm::new(0.0, 0.0, 1.0, 2).is_ok());
        assert!(RowZeroQuadraticForm::new(0.0, 0.0, 0.0, 2).is_err());
    }

    #[test]
    fn q_star_positive_for_random_valid_forms() {
        let mut r = rng(38);
        let mut count = 0;
        while count < 20 {
            let n = r.random_range(2..9);
            let (a, b, g) = (r.random_range(-1.0..2.0), r.random_range(-1.0..2.0), r.random_range(-1.0..1.0));
            let (a, b) = match n {
                2 => (0.0, 0.0),
                3 => (0.0, b),
                _ => (a, b),
            };
            let Ok(f) = RowZeroQuadraticForm::new(a, b, g, n) else { continue };
            count += 1;
            for _ in 0..50 {
                assert!(q_star_eval(&f, &random_row_zero(&mut r, n, 1.0)) > 0.0);
            }
        }
    }

    #[test]
    fn riemannian_operations() {
        let mut r = rng(39);
        let chart = LogScaling::default();
        let form = RowZeroQuadraticForm::new(1.0, 0.3, 0.05, 6).unwrap();
        let c = random_correlation(&mut r, 6);
        let c2 = random_correlation(&mut r, 6);
        assert!(rel_err(chart.geodesic(&c, &c, 0.8).unwrap().as_matrix(), c.as_matrix()) < 1e-10);
        assert!(rel_err(chart.geodesic(&c, &c2, 1.0).unwrap().as_matrix(), c2.as_matrix()) < 1e-10);
        let v = chart.log_map(&c, &c2).unwrap();
        assert!(rel_err(chart.exp_map(&c, &v).unwrap().as_matrix(), c2.as_matrix()) <= 1e-8);

        let x = random_hollow(&mut r, 6, 1.0);
        let y = random_hollow(&mut r, 6, 1.0);
        let before = chart.metric_inner(&form, &c, &x, &y).unwrap();
        let after = chart
            .metric_inner(
                &form,
                &c2,
                &chart.parallel_transport(&c, &c2, &x).unwrap(),
                &chart.parallel_transport(&c, &c2, &y).unwrap(),
            )
            .unwrap();
        assert!((before - after).abs() <= 1e-8 * before.abs().max(1.0));

        let mean = chart.frechet_mean(&[c.clone(), c2.clone()]).unwrap();
        let mid = chart.geodesic(&c, &c2, 0.5).unwrap();
        assert!(rel_err(mean.as_matrix(), mid.as_matrix()) < 1e-10);
    }

    #[test]
    fn distance_two_by_two_closed_form() {
        let rho: f64 = -0.3;
        let gamma = 0.7;
        let form = RowZeroQuadraticForm::new(0.0, 0.0, gamma, 2).unwrap();
        let d = LogScaling::default()
            .distance(&form, &CorrelationMatrix::identity(2), &two_by_two(rho))
            .unwrap();
        assert!((d - 2.0 * rho.atanh().abs() * f64::sqrt(gamma)).abs() < 1e-13);
    }

    #[test]
    fn permutation_equivariance() {
        let mut r = rng(40);
        let c = random_correlation(&mut r, 7);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut r);
        let lhs = ls_log(&c.permuted(&perm)).unwrap();
        let rhs = ls_log(&c).unwrap().permuted(&perm);
        assert!((lhs.as_matrix() - rhs.as_matrix()).amax() <= 1e-12);
        let s = random_row_zero(&mut r, 7, 0.4);
        let lhs = ls_exp(&s.permuted(&perm)).unwrap();
        let rhs = ls_exp(&s).unwrap().permuted(&perm);
        assert!((lhs.as_matrix() - rhs.as_matrix()).amax() <= 1e-12);
    }

    #[test]
    fn frameworks_give_valid_but_different_means() {
        let mut r = rng(41);
        let cs: Vec<CorrelationMatrix> = (0..5).map(|_| ol_exp(&random_hollow(&mut r, 5, 0.6)).unwrap()).collect();
        let a = OffLog::default().frechet_mean(&cs).unwrap();
        let b = LogScaling::default().frechet_mean(&cs).unwrap();
        for m in [&a, &b] {
            assert!(CorrelationMatrix::new(m.as_symmetric().clone()).is_ok());
        }
        assert!((a.as_matrix() - b.as_matrix()).norm() > 1e-6);
    }
}
