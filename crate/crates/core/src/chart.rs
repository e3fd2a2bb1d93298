//! Riemannian operations of a metric pulled back through a global chart onto
//! a Euclidean coordinate space.
//!
//! Both correlation geometries in this crate are of this kind, so every
//! operation reduces to straight-line arithmetic in coordinates composed with
//! the chart, its inverse and their differentials. Only the inner product and
//! the distance depend on the choice of quadratic form; the exponential and
//! logarithm maps, geodesics, transport and the Fréchet mean do not.

use crate::error::{Error, Result};
use crate::offlog::{CorrelationMatrix, HollowMatrix};
use crate::space::{FlatCoordinate, QuadraticForm, SpaceElement};

pub trait FlatChart: Sync {
    type Coord: FlatCoordinate;
    type Form: QuadraticForm<Self::Coord>;

    /// Chart `Cor⁺(n) → coordinates`.
    fn log(&self, c: &CorrelationMatrix) -> Result<Self::Coord>;

    /// Inverse chart.
    fn exp(&self, s: &Self::Coord) -> Result<CorrelationMatrix>;

    /// Differential of the chart at `c`, acting on hollow tangent vectors.
    fn dlog(&self, c: &CorrelationMatrix, x: &HollowMatrix) -> Result<Self::Coord>;

    /// Differential of the inverse chart at `s`.
    fn dexp(&self, s: &Self::Coord, y: &Self::Coord) -> Result<HollowMatrix>;

    /// `g_C(X, Y) = ⟨d_C Log X, d_C Log Y⟩_q`
    fn metric_inner(
        &self,
        form: &Self::Form,
        c: &CorrelationMatrix,
        x: &HollowMatrix,
        y: &HollowMatrix,
    ) -> Result<f64> {
        let dx = self.dlog(c, x)?;
        let dy = self.dlog(c, y)?;
        Ok(form.inner(&dx, &dy))
    }

    fn metric_norm_sq(&self, form: &Self::Form, c: &CorrelationMatrix, x: &HollowMatrix) -> Result<f64> {
        Ok(form.eval(&self.dlog(c, x)?))
    }

    /// `Exp_C(X) = Exp(Log C + d_C Log X)`
    fn exp_map(&self, c: &CorrelationMatrix, x: &HollowMatrix) -> Result<CorrelationMatrix> {
        let s = self.log(c)?;
        let v = self.dlog(c, x)?;
        self.exp(&s.add(&v)?)
    }

    /// `Log_C(C') = d_{Log C} Exp(Log C' − Log C)`
    fn log_map(&self, c: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<HollowMatrix> {
        let s = self.log(c)?;
        let s2 = self.log(c2)?;
        self.dexp(&s, &s2.sub(&s)?)
    }

    /// `γ(t) = Exp((1 − t) Log C + t Log C')`, any real `t`.
    fn geodesic(&self, c: &CorrelationMatrix, c2: &CorrelationMatrix, t: f64) -> Result<CorrelationMatrix> {
        let s = self.log(c)?;
        let s2 = self.log(c2)?;
        self.exp(&s.lin_comb(1.0 - t, &s2, t)?)
    }

    /// `d(C, C') = √q(Log C' − Log C)`
    fn distance(&self, form: &Self::Form, c: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<f64> {
        let diff = self.log(c2)?.sub(&self.log(c)?)?;
        Ok(form.eval(&diff).max(0.0).sqrt())
    }

    /// `Π_{C→C'} = (d_{C'} Log)⁻¹ ∘ d_C Log`
    fn parallel_transport(
        &self,
        c: &CorrelationMatrix,
        c2: &CorrelationMatrix,
        x: &HollowMatrix,
    ) -> Result<HollowMatrix> {
        let v = self.dlog(c, x)?;
        self.dexp(&self.log(c2)?, &v)
    }

    /// Chart-space arithmetic mean pulled back.
    fn frechet_mean(&self, cs: &[CorrelationMatrix]) -> Result<CorrelationMatrix> {
        let first = cs
            .first()
            .ok_or_else(|| Error::InvalidArgument("Fréchet mean of an empty sample".into()))?;
        let n = first.dim();
        let mut acc = Self::Coord::zeros(n).into_symmetric();
        for c in cs {
            if c.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, found: c.dim() });
            }
            acc = &acc + self.log(c)?.as_symmetric();
        }
        let mean = Self::Coord::from_linear(acc.scale(1.0 / cs.len() as f64))?;
        self.exp(&mean)
    }
}
