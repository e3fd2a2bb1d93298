//! Comparison frameworks: raw entrywise (Euclidean) regression and SPD
//! Log-Euclidean regression followed by rescaling to unit diagonal, with the
//! diagnostics used to compare them.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::Result;
use crate::offlog::CorrelationMatrix;
use crate::regression::Trajectory;
use crate::space::SpaceElement;
use crate::symkernel::{mat_exp, mat_log, sym_eig, PositiveDiagonal, SpdMatrix, SymmetricMatrix};

pub fn spd_log(a: &SpdMatrix) -> Result<SymmetricMatrix> {
    mat_log(a)
}

pub fn spd_exp(s: &SymmetricMatrix) -> Result<SpdMatrix> {
    mat_exp(s)
}

/// `Δ⁻¹AΔ⁻¹` with `Δ = Diag(A)^{1/2}`; also returns `Δ`.
pub fn cor_rescale(a: &SpdMatrix) -> Result<(CorrelationMatrix, PositiveDiagonal)> {
    let delta = PositiveDiagonal::new(a.as_matrix().diagonal().map(f64::sqrt))?;
    let inv = PositiveDiagonal::new(delta.as_vector().map(|v| 1.0 / v))?;
    let mut m = inv.congruence(a.as_symmetric()).into_matrix();
    m.fill_diagonal(1.0);
    let c = CorrelationMatrix::new(SymmetricMatrix::new(m)?)?;
    Ok((c, delta))
}

/// Largest off-diagonal change `|after − before|`, as a percentage of the mean
/// absolute off-diagonal entry of `before`. Zero when `before` has no nonzero
/// off-diagonal entries.
pub fn scaling_deviation(before: &SpdMatrix, after: &CorrelationMatrix) -> f64 {
    let n = before.dim();
    let (b, a) = (before.as_matrix(), after.as_matrix());
    let mut max_dev = 0.0f64;
    let mut sum = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                max_dev = max_dev.max((a[(i, j)] - b[(i, j)]).abs());
                sum += b[(i, j)].abs();
            }
        }
    }
    let count = (n * n - n) as f64;
    if count == 0.0 || sum == 0.0 {
        return 0.0;
    }
    100.0 * max_dev / (sum / count)
}

/// Signed changes `after_ij − before_ij` over the strict upper triangle,
/// row-major.
pub fn entry_deviations(before: &SpdMatrix, after: &CorrelationMatrix) -> DVector<f64> {
    let n = before.dim();
    let (b, a) = (before.as_matrix(), after.as_matrix());
    let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(a[(i, j)] - b[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Per-time diagnostics of a regressed trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSeries {
    pub times: Vec<f64>,
    pub min_eigenvalues: Vec<f64>,
    /// Rescaling diagonal `Δ` per time (SPD frame only).
    pub scaling_factors: Option<Vec<DVector<f64>>>,
    /// [`scaling_deviation`] per time, in percent (SPD frame only).
    pub deviations: Option<Vec<f64>>,
    /// Maximum of `deviations`.
    pub max_relative_deviation: Option<f64>,
}

impl DiagnosticSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of time points with `λ_min ≤ 0`.
    pub fn nonpositive_count(&self) -> usize {
        self.min_eigenvalues.iter().filter(|v| **v <= 0.0).count()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Smallest eigenvalue of every matrix of a trajectory.
pub fn min_eigenvalue_series<M: SpaceElement>(traj: &Trajectory<M>) -> Result<DiagnosticSeries> {
    let min_eigenvalues = traj
        .values()
        .par_iter()
        .map(|m| Ok(sym_eig(m.as_symmetric())?.min()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticSeries {
        times: traj.times().to_vec(),
        min_eigenvalues,
        scaling_factors: None,
        deviations: None,
        max_relative_deviation: None,
    })
}

/// Rescales every SPD matrix to a correlation matrix and records the
/// smallest eigenvalues before rescaling, the scaling factors and deviations.
pub fn rescale_trajectory(
    traj: &Trajectory<SpdMatrix>,
) -> Result<(Trajectory<CorrelationMatrix>, DiagnosticSeries)> {
    let rows = traj
        .values()
        .par_iter()
        .map(|a| {
            let min = sym_eig(a.as_symmetric())?.min();
            let (c, delta) = cor_rescale(a)?;
            let dev = scaling_deviation(a, &c);
            Ok((c, delta.as_vector().clone(), min, dev))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(rows.len());
    let mut factors = Vec::with_capacity(rows.len());
    let mut mins = Vec::with_capacity(rows.len());
    let mut devs = Vec::with_capacity(rows.len());
    for (c, d, m, dev) in rows {
        values.push(c);
        factors.push(d);
        mins.push(m);
        devs.push(dev);
    }
    let max_dev = devs.iter().copied().fold(0.0, f64::max);
    let series = DiagnosticSeries {
        times: traj.times().to_vec(),
        min_eigenvalues: mins,
        scaling_factors: Some(factors),
        deviations: Some(devs),
        max_relative_deviation: Some(max_dev),
    };
    Ok((Trajectory::new(traj.times().to_vec(), values)?, series))
}
