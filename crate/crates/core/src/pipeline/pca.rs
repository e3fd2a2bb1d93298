//! Three-component PCA of vectorized trajectories.

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::regression::{vectorize, Trajectory};
use crate::space::SpaceElement;
use crate::symkernel::{sym_eig, SymmetricMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `T × 3` projections of the centered points.
    pub coords: DMatrix<f64>,
    /// Variance along each component, non-increasing.
    pub explained: [f64; 3],
    /// Total variance of the centered points.
    pub total_variance: f64,
    /// `p × 3` unit principal directions.
    pub components: DMatrix<f64>,
}

/// PCA of the rows of `x` (`T × p`), via the eigendecomposition of the
/// smaller of the covariance and Gram matrices. Each component's
/// largest-magnitude loading is made positive.
pub fn pca3(x: &DMatrix<f64>) -> Result<PcaResult> {
    let (t, p) = x.shape();
    if t < 4 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 4 points, got {t}")));
    }
    if count_distinct_rows(x, 3) < 3 {
        return Err(Error::DegenerateCovariance("fewer than 3 distinct points".into()));
    }
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let dof = (t - 1) as f64;
    let total_variance = xc.norm_squared() / dof;
    let k = p.min(3);

    let mut components = DMatrix::zeros(p, 3);
    let mut explained = [0.0; 3];
    if p <= t {
        let cov = SymmetricMatrix::new(xc.transpose() * &xc / dof)?;
        let eig = sym_eig(&cov)?;
        for c in 0..k {
            let idx = p - 1 - c;
            explained[c] = eig.values[idx].max(0.0);
            components.set_column(c, &eig.vectors.column(idx));
        }
    } else {
        let gram = SymmetricMatrix::new(&xc * xc.transpose() / dof)?;
        let eig = sym_eig(&gram)?;
        for c in 0..k {
            let idx = t - 1 - c;
            let lambda = eig.values[idx].max(0.0);
            explained[c] = lambda;
            let dir = xc.transpose() * eig.vectors.column(idx);
            let norm = dir.norm();
            if norm > 0.0 {
                components.set_column(c, &(dir / norm));
            }
        }
    }
    for mut col in components.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    let coords = &xc * &components;
    Ok(PcaResult { coords, explained, total_variance, components })
}

/// PCA of a trajectory under the space's upper-triangle vectorization.
pub fn pca3_trajectory<M: SpaceElement>(traj: &Trajectory<M>) -> Result<PcaResult> {
    let rows: Vec<_> = traj.values().iter().map(|m| vectorize(M::TAG, m.as_symmetric())).collect();
    let p = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    pca3(&x)
}

fn count_distinct_rows(x: &DMatrix<f64>, enough: usize) -> usize {
    let mut seen = HashSet::new();
    for row in x.row_iter() {
        seen.insert(row.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>());
        if seen.len() >= enough {
            break;
        }
    }
    seen.len()
}
