//! Sliding-window Pearson correlation of region-averaged signals.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::offlog::CorrelationMatrix;
use crate::regression::Trajectory;
use crate::symkernel::{eig_floor, sym_eig, SymmetricMatrix};

/// Windows whose spectrum leaves this range are logged as ill-conditioned.
pub const SPECTRUM_WARN_RANGE: (f64, f64) = (1e-3, 1e3);

/// Regions × samples signal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTimeSeries {
    data: DMatrix<f64>,
    labels: Option<Vec<String>>,
}

impl RegionTimeSeries {
    pub fn new(data: DMatrix<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("empty time series".into()));
        }
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (region, sample) = (idx % data.nrows(), idx / data.nrows());
            return Err(Error::InvalidArgument(format!(
                "non-finite value for region {region} at sample {sample}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != data.nrows() {
                return Err(Error::DimensionMismatch { expected: data.nrows(), found: l.len() });
            }
        }
        Ok(Self { data, labels })
    }

    pub fn n_regions(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub width: usize,
    pub offset: usize,
    /// First sample of a second concatenated run; windows covering samples
    /// on both sides of it are dropped.
    pub seam: Option<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { width: 600, offset: 1, seam: None }
    }
}

impl WindowSpec {
    pub fn new(width: usize, offset: usize) -> Result<Self> {
        let spec = Self { width, offset, seam: None };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::InvalidArgument(format!("window width {} < 2", self.width)));
        }
        if self.offset < 1 {
            return Err(Error::InvalidArgument("window offset must be at least 1".into()));
        }
        Ok(())
    }

    /// `⌊(n_samples − width)/offset⌋ + 1`, before any seam exclusion.
    pub fn window_count(&self, n_samples: usize) -> Result<usize> {
        self.validate()?;
        if self.width > n_samples {
            return Err(Error::InvalidArgument(format!(
                "window width {} exceeds the {} available samples",
                self.width, n_samples
            )));
        }
        Ok((n_samples - self.width) / self.offset + 1)
    }

    /// Start indices of the windows kept.
    pub fn starts(&self, n_samples: usize) -> Result<Vec<usize>> {
        let count = self.window_count(n_samples)?;
        Ok((0..count)
            .map(|k| k * self.offset)
            .filter(|&s| !matches!(self.seam, Some(seam) if s < seam && seam < s + self.width))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PearsonMethod {
    /// Mean subtraction, then normalized inner products, per window.
    #[default]
    TwoPass,
    /// Running sums updated as the window slides, refreshed every
    /// [`ROLLING_REFRESH`] windows.
    Rolling,
}

pub const ROLLING_REFRESH: usize = 64;

/// Pearson correlation of every pair of regions within each window.
/// Timestamps are the window start indices.
pub fn sliding_window_correlation(ts: &RegionTimeSeries, spec: &WindowSpec) -> Result<Trajectory<CorrelationMatrix>> {
    sliding_window_correlation_with(ts, spec, PearsonMethod::TwoPass)
}

pub fn sliding_window_correlation_with(
    ts: &RegionTimeSeries,
    spec: &WindowSpec,
    method: PearsonMethod,
) -> Result<Trajectory<CorrelationMatrix>> {
    let starts = spec.starts(ts.n_samples())?;
    if starts.is_empty() {
        return Err(Error::InvalidArgument("every window straddles the seam".into()));
    }
    let raw: Vec<DMatrix<f64>> = match method {
        PearsonMethod::TwoPass => starts
            .par_iter()
            .map(|&s| pearson_two_pass(ts.data(), s, spec.width))
            .collect::<Result<_>>()?,
        PearsonMethod::Rolling => {
            let chunks: Vec<Vec<DMatrix<f64>>> = starts
                .par_chunks(ROLLING_REFRESH)
                .map(|chunk| pearson_rolling(ts.data(), chunk, spec.width))
                .collect::<Result<_>>()?;
            chunks.into_iter().flatten().collect()
        }
    };
    let values = raw
        .into_par_iter()
        .zip(starts.par_iter())
        .map(|(m, &s)| certify_window(m, s))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(starts.iter().map(|&s| s as f64).collect(), values)
}

fn zero_variance(centered_max: f64, raw_max: f64) -> bool {
    centered_max <= 1e-13 * raw_max
}

fn pearson_two_pass(data: &DMatrix<f64>, start: usize, width: usize) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    let mut x = data.columns(start, width).into_owned();
    for i in 0..n {
        let raw_max = x.row(i).amax();
        let mean = x.row(i).sum() / width as f64;
        x.row_mut(i).add_scalar_mut(-mean);
        let norm = x.row(i).norm();
        if norm == 0.0 || zero_variance(x.row(i).amax(), raw_max) {
            return Err(Error::ZeroVariance { region: i, window: start });
        }
        x.row_mut(i).unscale_mut(norm);
    }
    Ok(&x * x.transpose())
}

fn pearson_rolling(data: &DMatrix<f64>, starts: &[usize], width: usize) -> Result<Vec<DMatrix<f64>>> {
    let n = data.nrows();
    let w = width as f64;
    // Shift each region by its mean over the chunk's span to limit cancellation.
    let lo = starts[0];
    let hi = starts[starts.len() - 1] + width;
    let shift: Vec<f64> = (0..n).map(|i| data.row(i).columns(lo, hi - lo).mean()).collect();
    let column = |t: usize| data.column(t).map_with_location(|i, _, v| v - shift[i]);

    let mut sums = nalgebra::DVector::zeros(n);
    let mut cross = DMatrix::zeros(n, n);
    let mut pos = lo;
    for t in lo..lo + width {
        let c = column(t);
        sums += &c;
        cross.ger(1.0, &c, &c, 1.0);
    }
    let mut out = Vec::with_capacity(starts.len());
    for &s in starts {
        while pos < s {
            let old = column(pos);
            let new = column(pos + width);
            sums += &new - &old;
            cross.ger(-1.0, &old, &old, 1.0);
            cross.ger(1.0, &new, &new, 1.0);
            pos += 1;
        }
        let mut cov = &cross - &sums * sums.transpose() / w;
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let row = data.row(i);
            let window = row.columns(s, width);
            let raw_max = window.amax();
            let mean = window.mean();
            let centered_max = window.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            if cov[(i, i)] <= 0.0 || zero_variance(centered_max, raw_max) {
                return Err(Error::ZeroVariance { region: i, window: s });
            }
            scale.push(1.0 / cov[(i, i)].sqrt());
        }
        for j in 0..n {
            for i in 0..n {
                cov[(i, j)] *= scale[i] * scale[j];
            }
        }
        out.push(cov);
    }
    Ok(out)
}

/// Unit diagonal, clamped entries, PD floor check, and spectral-range logging.
fn certify_window(m: DMatrix<f64>, start: usize) -> Result<CorrelationMatrix> {
    let mut m = SymmetricMatrix::new(m)?.into_matrix();
    m.fill_diagonal(1.0);
    let sym = SymmetricMatrix::new(m.map(|v| v.clamp(-1.0, 1.0)))?;
    let eig = sym_eig(&sym)?;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= eig_floor(hi) {
        return Err(Error::RankDeficient(format!(
            "window starting at sample {start}: smallest eigenvalue {lo:e} (fewer samples than regions or collinear signals)"
        )));
    }
    if lo < SPECTRUM_WARN_RANGE.0 || hi > SPECTRUM_WARN_RANGE.1 {
        log::warn!("window starting at sample {start}: eigenvalues span [{lo:e}, {hi:e}]");
    }
    CorrelationMatrix::from_near_unit_diagonal(sym.into_matrix(), lo, hi)
}
