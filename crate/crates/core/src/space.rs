//! Matrix spaces a trajectory can live in, and the linear structure of the
//! flat ones.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::symkernel::{SpdMatrix, SymmetricMatrix};

/// Which space the matrices of a trajectory belong to. The discriminants are
/// the on-disk tag bytes of the `.mtrj` format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SpaceTag {
    Correlation = 0,
    Spd = 1,
    Symmetric = 2,
    Hollow = 3,
    RowZero = 4,
}

impl SpaceTag {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => SpaceTag::Correlation,
            1 => SpaceTag::Spd,
            2 => SpaceTag::Symmetric,
            3 => SpaceTag::Hollow,
            4 => SpaceTag::RowZero,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpaceTag::Correlation => "correlation",
            SpaceTag::Spd => "spd",
            SpaceTag::Symmetric => "symmetric",
            SpaceTag::Hollow => "hollow",
            SpaceTag::RowZero => "rowzero",
        }
    }

    /// Vector spaces where entrywise least squares is meaningful.
    pub fn is_flat(self) -> bool {
        matches!(self, SpaceTag::Symmetric | SpaceTag::Hollow | SpaceTag::RowZero)
    }

    /// Length of the upper-triangle vectorization: hollow matrices drop the
    /// diagonal, every other space keeps it.
    pub fn vector_len(self, n: usize) -> usize {
        match self {
            SpaceTag::Hollow => n * (n - 1) / 2,
            _ => n * (n + 1) / 2,
        }
    }
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "correlation" => SpaceTag::Correlation,
            "spd" => SpaceTag::Spd,
            "symmetric" => SpaceTag::Symmetric,
            "hollow" => SpaceTag::Hollow,
            "rowzero" => SpaceTag::RowZero,
            other => return Err(Error::InvalidArgument(format!("unknown space tag `{other}`"))),
        })
    }
}

/// A matrix type that carries its own space invariants.
pub trait SpaceElement: Clone + Send + Sync + Sized {
    const TAG: SpaceTag;

    fn as_symmetric(&self) -> &SymmetricMatrix;

    /// Validates the space invariants of `m`.
    fn from_symmetric(m: SymmetricMatrix) -> Result<Self>;

    fn into_symmetric(self) -> SymmetricMatrix;

    fn dim(&self) -> usize {
        self.as_symmetric().dim()
    }
}

/// A linear subspace of symmetric matrices.
pub trait FlatCoordinate: SpaceElement {
    /// Maps the result of a linear combination of elements back into the
    /// space, repairing residuals at rounding level and rejecting larger ones.
    fn from_linear(m: SymmetricMatrix) -> Result<Self>;

    fn zeros(n: usize) -> Self;

    /// `a·self + b·other`
    fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Self::from_linear(self.as_symmetric().lin_comb(a, other.as_symmetric(), b))
    }

    fn add(&self, other: &Self) -> Result<Self> {
        self.lin_comb(1.0, other, 1.0)
    }

    fn sub(&self, other: &Self) -> Result<Self> {
        self.lin_comb(1.0, other, -1.0)
    }

    fn scale(&self, a: f64) -> Result<Self> {
        Self::from_linear(self.as_symmetric().scale(a))
    }
}

/// Permutation-invariant inner product on a flat coordinate space.
pub trait QuadraticForm<C: FlatCoordinate> {
    fn eval(&self, x: &C) -> f64;

    /// Polarization of [`QuadraticForm::eval`].
    fn inner(&self, x: &C, y: &C) -> f64;
}

impl SpaceElement for SymmetricMatrix {
    const TAG: SpaceTag = SpaceTag::Symmetric;

    fn as_symmetric(&self) -> &SymmetricMatrix {
        self
    }

    fn from_symmetric(m: SymmetricMatrix) -> Result<Self> {
        Ok(m)
    }

    fn into_symmetric(self) -> SymmetricMatrix {
        self
    }
}

impl FlatCoordinate for SymmetricMatrix {
    fn from_linear(m: SymmetricMatrix) -> Result<Self> {
        Ok(m)
    }

    fn zeros(n: usize) -> Self {
        SymmetricMatrix::zeros(n)
    }
}

impl SpaceElement for SpdMatrix {
    const TAG: SpaceTag = SpaceTag::Spd;

    fn as_symmetric(&self) -> &SymmetricMatrix {
        SpdMatrix::as_symmetric(self)
    }

    fn from_symmetric(m: SymmetricMatrix) -> Result<Self> {
        SpdMatrix::new(m)
    }

    fn into_symmetric(self) -> SymmetricMatrix {
        SpdMatrix::into_symmetric(self)
    }
}
