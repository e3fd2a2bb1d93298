//! Polynomial least-squares regression of matrix trajectories in flat
//! coordinates, hyperparameter grid search, and regression pulled back
//! through a chart.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::{min_eigenvalue_series, rescale_trajectory, spd_exp, spd_log, DiagnosticSeries};
use crate::error::{Error, Result};
use crate::logscaling::{LogScaling, ScalingOptions};
use crate::offlog::{CorrelationMatrix, DiagSolverOptions, OffLog};
use crate::space::{FlatCoordinate, SpaceElement, SpaceTag};
use crate::symkernel::SymmetricMatrix;

/// Time-indexed sequence of matrices of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<M> {
    times: Vec<f64>,
    values: Vec<M>,
}

impl<M: SpaceElement> Trajectory<M> {
    /// Requires at least one point, strictly increasing finite timestamps and
    /// a common dimension.
    pub fn new(times: Vec<f64>, values: Vec<M>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: times.len(), found: values.len() });
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite timestamp".into()));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "timestamps must be strictly increasing (index {})",
                i + 1
            )));
        }
        let n = values[0].dim();
        if let Some(v) = values.iter().find(|v| v.dim() != n) {
            return Err(Error::DimensionMismatch { expected: n, found: v.dim() });
        }
        Ok(Self { times, values })
    }

    /// Timestamps `0, 1, …, T−1`.
    pub fn indexed(values: Vec<M>) -> Result<Self> {
        Self::new((0..values.len()).map(|t| t as f64).collect(), values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[M] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn tag(&self) -> SpaceTag {
        M::TAG
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<M>) {
        (self.times, self.values)
    }

    /// Applies `f` to every point in parallel, keeping the timestamps.
    pub fn par_map<N: SpaceElement>(&self, f: impl Fn(&M) -> Result<N> + Sync + Send) -> Result<Trajectory<N>> {
        let values = self.values.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { times: self.times.clone(), values })
    }

    /// Same timestamps, new values.
    pub fn with_values<N: SpaceElement>(&self, values: Vec<N>) -> Result<Trajectory<N>> {
        Trajectory::new(self.times.clone(), values)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.times[i]).collect(),
            indices.iter().map(|&i| self.values[i].clone()).collect(),
        )
    }

    /// Adds `dt` to every timestamp.
    pub fn shifted(&self, dt: f64) -> Result<Self> {
        Self::new(self.times.iter().map(|t| t + dt).collect(), self.values.clone())
    }
}

/// `round(linspace(0, T−1, k))`, deduplicated.
pub fn subsample_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 || k > len {
        return Err(Error::InvalidArgument(format!(
            "sample count {k} outside [2, {len}]"
        )));
    }
    let step = (len - 1) as f64 / (k - 1) as f64;
    let mut idx: Vec<usize> = (0..k).map(|i| (i as f64 * step).round() as usize).collect();
    idx[k - 1] = len - 1;
    idx.dedup();
    Ok(idx)
}

pub fn subsample<M: SpaceElement>(traj: &Trajectory<M>, k: usize) -> Result<Trajectory<M>> {
    traj.select(&subsample_indices(traj.len(), k)?)
}

/// Upper-triangle (diagonal included) row-major entries.
fn upper_triangle(m: &SymmetricMatrix) -> impl Iterator<Item = f64> + '_ {
    let n = m.dim();
    (0..n).flat_map(move |i| (i..n).map(move |j| m.get(i, j)))
}

fn from_upper_triangle(n: usize, v: impl Iterator<Item = f64>) -> SymmetricMatrix {
    let mut a = DMatrix::zeros(n, n);
    let mut it = v;
    for i in 0..n {
        for j in i..n {
            let x = it.next().expect("upper triangle length");
            a[(i, j)] = x;
            a[(j, i)] = x;
        }
    }
    SymmetricMatrix::new(a).expect("finite symmetric coefficients")
}

/// Matrix-valued polynomial in normalized time
/// `u = 2(t − t_min)/(t_max − t_min) − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialCurve<M> {
    coeffs: Vec<SymmetricMatrix>,
    domain: (f64, f64),
    _space: std::marker::PhantomData<M>,
}

impl<M: FlatCoordinate> PolynomialCurve<M> {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Coefficients of `1, u, u², …`.
    pub fn coeffs(&self) -> &[SymmetricMatrix] {
        &self.coeffs
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].dim()
    }

    pub fn normalize(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain;
        2.0 * (t - lo) / (hi - lo) - 1.0
    }

    /// False when evaluating at `t` extrapolates.
    pub fn in_domain(&self, t: f64) -> bool {
        t >= self.domain.0 && t <= self.domain.1
    }

    /// Horner evaluation without projecting back into the space.
    pub fn evaluate_raw(&self, t: f64) -> SymmetricMatrix {
        let u = self.normalize(t);
        let mut acc = self.coeffs[self.degree()].clone();
        for c in self.coeffs.iter().rev().skip(1) {
            acc = acc.lin_comb(u, c, 1.0);
        }
        acc
    }

    pub fn evaluate(&self, t: f64) -> Result<M> {
        M::from_linear(self.evaluate_raw(t))
    }
}

/// Entrywise least squares of degree `degree` through every point of `traj`,
/// by QR factorization of the Vandermonde matrix in normalized time.
pub fn fit_polynomial<M: FlatCoordinate>(traj: &Trajectory<M>, degree: usize) -> Result<PolynomialCurve<M>> {
    let k = traj.len();
    let cols = degree + 1;
    if k < 2 {
        return Err(Error::InvalidArgument("fitting needs at least 2 time points".into()));
    }
    if k < cols {
        return Err(Error::RankDeficient(format!(
            "degree {degree} needs at least {cols} samples, got {k}"
        )));
    }
    let times = traj.times();
    let domain = (times[0], times[k - 1]);
    let u: Vec<f64> = times
        .iter()
        .map(|t| 2.0 * (t - domain.0) / (domain.1 - domain.0) - 1.0)
        .collect();
    let v = DMatrix::from_fn(k, cols, |i, j| u[i].powi(j as i32));

    let n = traj.dim();
    let width = n * (n + 1) / 2;
    let mut y = DMatrix::zeros(k, width);
    for (i, m) in traj.values().iter().enumerate() {
        for (j, x) in upper_triangle(m.as_symmetric()).enumerate() {
            y[(i, j)] = x;
        }
    }

    let qr = v.qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if let Some(j) = (0..cols).find(|&j| r[(j, j)].abs() <= 1e-12 * scale) {
        return Err(Error::RankDeficient(format!(
            "Vandermonde matrix of degree {degree} is rank deficient at column {j}"
        )));
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;

    let coeffs = (0..cols)
        .map(|d| from_upper_triangle(n, coef.row(d).iter().copied()))
        .collect();
    Ok(PolynomialCurve { coeffs, domain, _space: std::marker::PhantomData })
}

pub fn evaluate<M: FlatCoordinate>(curve: &PolynomialCurve<M>, t: f64) -> Result<M> {
    curve.evaluate(t)
}

/// `(1/T) Σ_t ‖P(t) − X_t‖²_F` over every point of `traj`.
pub fn mse<M: FlatCoordinate>(curve: &PolynomialCurve<M>, traj: &Trajectory<M>) -> f64 {
    let total: f64 = traj
        .times()
        .par_iter()
        .zip(traj.values().par_iter())
        .map(|(t, x)| (curve.evaluate_raw(*t).as_matrix() - x.as_symmetric().as_matrix()).norm_squared())
        .sum();
    total / traj.len() as f64
}

/// Tie tolerance of the grid search, relative to the smallest score.
pub const GRID_TIE_RTOL: f64 = 1e-9;
/// Scores below this fraction of the mean squared norm of the data count as
/// exact fits.
pub const GRID_EXACT_RTOL: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub degrees: Vec<usize>,
    pub sample_counts: Vec<usize>,
    /// `log10(MSE)` indexed by (degree, sample count); `+inf` where the fit is
    /// rank deficient.
    pub mse_table: DMatrix<f64>,
    /// `(degree, sample count)`
    pub best: (usize, usize),
    /// Best degree for each sample count, `None` if no degree was feasible.
    pub best_degree_per_sample_count: Vec<Option<usize>>,
    pub tie_break_note: String,
}

pub fn default_degrees() -> Vec<usize> {
    (1..=10).collect()
}

pub fn default_sample_counts() -> Vec<usize> {
    vec![4, 6, 8, 10, 15, 20, 30, 50]
}

/// Fits every `(degree, sample count)` on the subsampled trajectory and
/// scores the full-trajectory MSE. The best cell minimizes the score, with
/// near-ties resolved toward smaller degree and then fewer samples.
pub fn grid_search<M: FlatCoordinate>(
    traj: &Trajectory<M>,
    degrees: &[usize],
    sample_counts: &[usize],
) -> Result<GridSearchResult> {
    if degrees.is_empty() || sample_counts.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    for &k in sample_counts {
        subsample_indices(traj.len(), k)?;
    }
    let cells: Vec<(usize, usize)> = (0..degrees.len())
        .flat_map(|i| (0..sample_counts.len()).map(move |j| (i, j)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(i, j)| {
            let sub = subsample(traj, sample_counts[j])?;
            match fit_polynomial(&sub, degrees[i]) {
                Ok(curve) => Ok(mse(&curve, traj)),
                Err(Error::RankDeficient(_)) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean_sq: f64 = traj
        .values()
        .iter()
        .map(|m| m.as_symmetric().as_matrix().norm_squared())
        .sum::<f64>()
        / traj.len() as f64;
    let floor = GRID_EXACT_RTOL * mean_sq;
    let effective = |s: f64| s.max(floor);

    let mut table = DMatrix::from_element(degrees.len(), sample_counts.len(), f64::INFINITY);
    for (&(i, j), &s) in cells.iter().zip(&scores) {
        table[(i, j)] = s.log10();
    }

    // Candidates in preference order: smaller degree, then fewer samples.
    let mut order: Vec<(usize, usize)> = cells.clone();
    order.sort_by_key(|&(i, j)| (degrees[i], sample_counts[j]));
    let pick = |cands: &mut dyn Iterator<Item = (usize, usize)>| -> Option<(usize, usize)> {
        let cands: Vec<(usize, usize)> = cands.collect();
        let min = cands
            .iter()
            .map(|&(i, j)| effective(scores[i * sample_counts.len() + j]))
            .fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return None;
        }
        cands
            .into_iter()
            .find(|&(i, j)| effective(scores[i * sample_counts.len() + j]) <= min * (1.0 + GRID_TIE_RTOL))
    };
    let (bi, bj) = pick(&mut order.iter().copied())
        .ok_or_else(|| Error::RankDeficient("no feasible (degree, sample count) cell".into()))?;
    let per_column = (0..sample_counts.len())
        .map(|j| pick(&mut order.iter().copied().filter(|&(_, c)| c == j)).map(|(i, _)| degrees[i]))
        .collect();

    Ok(GridSearchResult {
        degrees: degrees.to_vec(),
        sample_counts: sample_counts.to_vec(),
        mse_table: table,
        best: (degrees[bi], sample_counts[bj]),
        best_degree_per_sample_count: per_column,
        tie_break_note: format!(
            "scores within a relative {GRID_TIE_RTOL:e} of the minimum tie (scores below {GRID_EXACT_RTOL:e} of the \
             mean squared norm count as exact); ties go to the smaller degree, then the smaller sample count"
        ),
    })
}

/// Coordinate frame in which a correlation trajectory is regressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    OffLog,
    LogScaling,
    /// Matrix logarithm, then rescaling of the regressed SPD matrices.
    SpdLogEuclidean,
    /// Raw matrix entries.
    Euclidean,
}

impl Frame {
    pub const ALL: [Frame; 4] = [Frame::OffLog, Frame::LogScaling, Frame::SpdLogEuclidean, Frame::Euclidean];

    pub fn as_str(self) -> &'static str {
        match self {
            Frame::OffLog => "offlog",
            Frame::LogScaling => "logscaling",
            Frame::SpdLogEuclidean => "spd",
            Frame::Euclidean => "euclidean",
        }
    }

    /// Space of the frame's coordinates.
    pub fn coordinate_tag(self) -> SpaceTag {
        match self {
            Frame::OffLog => SpaceTag::Hollow,
            Frame::LogScaling => SpaceTag::RowZero,
            Frame::SpdLogEuclidean | Frame::Euclidean => SpaceTag::Symmetric,
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frame {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Frame::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown frame `{s}`")))
    }
}

/// Solver settings of the two correlation charts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChartOptions {
    pub diag_solver: DiagSolverOptions,
    pub scaling: ScalingOptions,
}

impl ChartOptions {
    pub fn offlog(&self) -> OffLog {
        OffLog::new(self.diag_solver)
    }

    pub fn logscaling(&self) -> LogScaling {
        LogScaling::new(self.scaling)
    }
}

/// Output of a pulled-back regression.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressed {
    Correlation(Trajectory<CorrelationMatrix>),
    /// Euclidean frame: not necessarily positive definite.
    Symmetric(Trajectory<SymmetricMatrix>),
}

impl Regressed {
    pub fn len(&self) -> usize {
        match self {
            Regressed::Correlation(t) => t.len(),
            Regressed::Symmetric(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrices(&self) -> Vec<&SymmetricMatrix> {
        match self {
            Regressed::Correlation(t) => t.values().iter().map(|c| c.as_symmetric()).collect(),
            Regressed::Symmetric(t) => t.values().iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PullbackResult {
    pub trajectory: Regressed,
    pub diagnostics: DiagnosticSeries,
    /// MSE of the fit in the frame's coordinates over the full trajectory.
    pub flat_mse: f64,
    /// `(1/T) Σ_t ‖C̃_t − C_t‖²_F` between output and input.
    pub pullback_mse: f64,
}

/// Fit in coordinates, evaluated at every time of `coords`.
fn fit_all<M: FlatCoordinate>(coords: &Trajectory<M>, degree: usize, samples: usize) -> Result<(Vec<M>, f64)> {
    let curve = fit_polynomial(&subsample(coords, samples)?, degree)?;
    let fitted = coords
        .times()
        .par_iter()
        .map(|t| curve.evaluate(*t))
        .collect::<Result<Vec<_>>>()?;
    Ok((fitted, mse(&curve, coords)))
}

pub fn regress_pullback(
    traj: &Trajectory<CorrelationMatrix>,
    frame: Frame,
    degree: usize,
    samples: usize,
) -> Result<PullbackResult> {
    regress_pullback_with(traj, frame, degree, samples, &ChartOptions::default())
}

/// Maps into the frame's coordinates, fits a polynomial of `degree` to
/// `samples` evenly spaced points, evaluates it at every original time and
/// maps back.
pub fn regress_pullback_with(
    traj: &Trajectory<CorrelationMatrix>,
    frame: Frame,
    degree: usize,
    samples: usize,
    opts: &ChartOptions,
) -> Result<PullbackResult> {
    let (trajectory, diagnostics, flat_mse) = match frame {
        Frame::OffLog => {
            let chart = opts.offlog();
            let coords = traj.with_values(chart.log_many(traj.values())?)?;
            let (fitted, flat) = fit_all(&coords, degree, samples)?;
            let out = traj.with_values(chart.exp_many(&fitted)?)?;
            let diag = min_eigenvalue_series(&out)?;
            (Regressed::Correlation(out), diag, flat)
        }
        Frame::LogScaling => {
            let chart = opts.logscaling();
            let coords = traj.with_values(chart.log_many(traj.values())?)?;
            let (fitted, flat) = fit_all(&coords, degree, samples)?;
            let out = traj.with_values(chart.exp_many(&fitted)?)?;
            let diag = min_eigenvalue_series(&out)?;
            (Regressed::Correlation(out), diag, flat)
        }
        Frame::SpdLogEuclidean => {
            let coords = traj.par_map(|c| spd_log(c.as_spd()))?;
            let (fitted, flat) = fit_all(&coords, degree, samples)?;
            let spd = traj.with_values(fitted.par_iter().map(spd_exp).collect::<Result<Vec<_>>>()?)?;
            let (out, diag) = rescale_trajectory(&spd)?;
            (Regressed::Correlation(out), diag, flat)
        }
        Frame::Euclidean => {
            let coords = traj.par_map(|c| Ok(c.as_symmetric().clone()))?;
            let (fitted, flat) = fit_all(&coords, degree, samples)?;
            let out = traj.with_values(fitted)?;
            let diag = min_eigenvalue_series(&out)?;
            (Regressed::Symmetric(out), diag, flat)
        }
    };
    let pullback_mse = trajectory
        .matrices()
        .iter()
        .zip(traj.values())
        .map(|(a, c)| (a.as_matrix() - c.as_matrix()).norm_squared())
        .sum::<f64>()
        / traj.len() as f64;
    Ok(PullbackResult { trajectory, diagnostics, flat_mse, pullback_mse })
}

/// Upper-triangle vectorization: hollow matrices drop the diagonal, every
/// other space keeps it.
pub fn vectorize(tag: SpaceTag, m: &SymmetricMatrix) -> DVector<f64> {
    let n = m.dim();
    let offset = usize::from(tag == SpaceTag::Hollow);
    let mut v = Vec::with_capacity(tag.vector_len(n));
    for i in 0..n {
        for j in i + offset..n {
            v.push(m.get(i, j));
        }
    }
    DVector::from_vec(v)
}
