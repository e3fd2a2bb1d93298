//! Riemannian geometry of full-rank correlation matrices through two flat
//! charts (off-log and log-scaling), with chart-based polynomial regression
//! of connectivity trajectories and the supporting ingestion pipeline.

pub mod baselines;
pub mod chart;
pub mod error;
pub mod logscaling;
pub mod offlog;
pub mod pipeline;
pub mod regression;
pub mod space;
pub mod symkernel;

#[cfg(test)]
mod testutil;

pub use chart::FlatChart;
pub use error::{Error, Result};
pub use logscaling::{LogScaling, RowZeroMatrix, RowZeroQuadraticForm};
pub use offlog::{CorrelationMatrix, HolQuadraticForm, HollowMatrix, OffLog};
pub use space::{FlatCoordinate, QuadraticForm, SpaceElement, SpaceTag};
pub use symkernel::{DiagonalMatrix, PositiveDiagonal, SpdMatrix, SymmetricMatrix};
