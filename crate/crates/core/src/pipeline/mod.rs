//! Ingestion, synthetic data, PCA export and file formats.

pub mod io;
pub mod pca;
pub mod synth;
pub mod window;
