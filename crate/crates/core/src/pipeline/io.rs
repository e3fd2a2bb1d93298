//! File formats: region time-series CSV, `.mtrj` binary trajectories,
//! trajectory CSV, and the diagnostics, PCA and grid-search tables.
//!
//! `.mtrj` layout, all little-endian: magic `MTRJ1`, `u32 n`, `u32 T`,
//! `u8` space tag, `T·n·n` `f64` matrix entries (row-major, one matrix after
//! another), then `T` `f64` timestamps.
//!
//! Trajectory CSV: a `# space_tag=<tag> n=<n>` line, a header
//! `time,m_i_j,…` over the upper triangle (diagonal excluded for hollow
//! matrices), then one row per time point.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::baselines::DiagnosticSeries;
use crate::error::{Error, Result};
use crate::logscaling::RowZeroMatrix;
use crate::offlog::{CorrelationMatrix, HollowMatrix};
use crate::pipeline::pca::PcaResult;
use crate::pipeline::window::RegionTimeSeries;
use crate::regression::{GridSearchResult, Trajectory};
use crate::space::{SpaceElement, SpaceTag};
use crate::symkernel::{SpdMatrix, SymmetricMatrix};

pub const MAGIC: &[u8; 5] = b"MTRJ1";
const HEADER_LEN: usize = 5 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("malformed header at line {line}: {message}")]
    MalformedHeader { line: u64, message: String },

    #[error("shape mismatch at line {line}: expected {expected} fields, found {found}")]
    ShapeMismatch { line: u64, expected: usize, found: usize },

    #[error("non-finite value at line {line}, column {column}")]
    NonFiniteValue { line: u64, column: usize },

    #[error("invalid number `{text}` at line {line}, column {column}")]
    InvalidNumber { line: u64, column: usize, text: String },

    #[error("not a trajectory file: expected magic bytes MTRJ1")]
    BadMagic,

    #[error("unknown space tag {tag} at byte offset {offset}")]
    UnknownSpaceTag { tag: u8, offset: usize },

    #[error("truncated file: {expected} bytes expected, {found} present")]
    Truncated { expected: usize, found: usize },

    #[error("{extra} unexpected trailing bytes at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },

    #[error("non-finite value at byte offset {offset}")]
    NonFiniteBinary { offset: usize },

    #[error("matrix {index} is not symmetric")]
    NotSymmetric { index: usize },

    #[error("matrix {index} violates the {tag} constraints: {message}")]
    InvalidElement { index: usize, tag: SpaceTag, message: String },

    #[error("expected a {expected} trajectory, found {found}")]
    TagMismatch { expected: SpaceTag, found: SpaceTag },
}

/// Trajectory as stored on disk, before its space invariants are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub tag: SpaceTag,
    pub n: usize,
    pub times: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
}

/// A validated trajectory of any space.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTrajectory {
    Correlation(Trajectory<CorrelationMatrix>),
    Spd(Trajectory<SpdMatrix>),
    Symmetric(Trajectory<SymmetricMatrix>),
    Hollow(Trajectory<HollowMatrix>),
    RowZero(Trajectory<RowZeroMatrix>),
}

impl AnyTrajectory {
    pub fn tag(&self) -> SpaceTag {
        match self {
            AnyTrajectory::Correlation(_) => SpaceTag::Correlation,
            AnyTrajectory::Spd(_) => SpaceTag::Spd,
            AnyTrajectory::Symmetric(_) => SpaceTag::Symmetric,
            AnyTrajectory::Hollow(_) => SpaceTag::Hollow,
            AnyTrajectory::RowZero(_) => SpaceTag::RowZero,
        }
    }

    pub fn len(&self) -> usize {
        self.times().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> &[f64] {
        match self {
            AnyTrajectory::Correlation(t) => t.times(),
            AnyTrajectory::Spd(t) => t.times(),
            AnyTrajectory::Symmetric(t) => t.times(),
            AnyTrajectory::Hollow(t) => t.times(),
            AnyTrajectory::RowZero(t) => t.times(),
        }
    }
}

impl RawTrajectory {
    pub fn from_trajectory<M: SpaceElement>(traj: &Trajectory<M>) -> Self {
        Self {
            tag: M::TAG,
            n: traj.dim(),
            times: traj.times().to_vec(),
            matrices: traj.values().iter().map(|m| m.as_symmetric().as_matrix().clone()).collect(),
        }
    }

    /// Checks the tag and every element's invariants.
    pub fn into_typed<M: SpaceElement>(self) -> Result<Trajectory<M>> {
        if self.tag != M::TAG {
            return Err(FormatError::TagMismatch { expected: M::TAG, found: self.tag }.into());
        }
        let tag = self.tag;
        let values = self
            .matrices
            .into_iter()
            .enumerate()
            .map(|(index, m)| {
                if m != m.transpose() {
                    return Err(Error::from(FormatError::NotSymmetric { index }));
                }
                SymmetricMatrix::new(m)
                    .and_then(M::from_symmetric)
                    .map_err(|e| FormatError::InvalidElement { index, tag, message: e.to_string() }.into())
            })
            .collect::<Result<Vec<M>>>()?;
        Trajectory::new(self.times, values)
    }

    pub fn into_any(self) -> Result<AnyTrajectory> {
        Ok(match self.tag {
            SpaceTag::Correlation => AnyTrajectory::Correlation(self.into_typed()?),
            SpaceTag::Spd => AnyTrajectory::Spd(self.into_typed()?),
            SpaceTag::Symmetric => AnyTrajectory::Symmetric(self.into_typed()?),
            SpaceTag::Hollow => AnyTrajectory::Hollow(self.into_typed()?),
            SpaceTag::RowZero => AnyTrajectory::RowZero(self.into_typed()?),
        })
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads `.csv` paths as trajectory CSV and anything else as `.mtrj`.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<RawTrajectory> {
    let path = path.as_ref();
    let file = File::open(path)?;
    if is_csv(path) {
        read_trajectory_csv(BufReader::new(file))
    } else {
        read_trajectory_binary(BufReader::new(file))
    }
}

/// Writes `.csv` paths as trajectory CSV and anything else as `.mtrj`.
pub fn write_trajectory<M: SpaceElement>(path: impl AsRef<Path>, traj: &Trajectory<M>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_trajectory_csv(&mut w, traj)?;
    } else {
        write_trajectory_binary(&mut w, traj)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_binary<M: SpaceElement>(mut w: impl Write, traj: &Trajectory<M>) -> Result<()> {
    let n = traj.dim();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit the file format")))
    };
    w.write_all(MAGIC)?;
    w.write_all(&to_u32(n, "dimension")?.to_le_bytes())?;
    w.write_all(&to_u32(traj.len(), "length")?.to_le_bytes())?;
    w.write_all(&[M::TAG as u8])?;
    let mut buf = Vec::with_capacity(n * n * 8);
    for m in traj.values() {
        buf.clear();
        let a = m.as_symmetric().as_matrix();
        for i in 0..n {
            for j in 0..n {
                buf.extend_from_slice(&a[(i, j)].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    for t in traj.times() {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_trajectory_binary(mut r: impl Read) -> Result<RawTrajectory> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, found: bytes.len() }.into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let n = u32_at(5);
    let len = u32_at(9);
    let tag = SpaceTag::from_byte(bytes[13]).ok_or(FormatError::UnknownSpaceTag { tag: bytes[13], offset: 13 })?;
    let expected = n
        .checked_mul(n)
        .and_then(|nn| nn.checked_mul(len))
        .and_then(|c| c.checked_add(len))
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or(FormatError::Truncated { expected: usize::MAX, found: bytes.len() })?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, found: bytes.len() }.into());
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes { offset: expected, extra: bytes.len() - expected }.into());
    }
    let f64_at = |o: usize| -> Result<f64> {
        let v = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FormatError::NonFiniteBinary { offset: o }.into())
        }
    };
    let mut matrices = Vec::with_capacity(len);
    let mut offset = HEADER_LEN;
    for _ in 0..len {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f64_at(offset)?;
                offset += 8;
            }
        }
        matrices.push(m);
    }
    let times = (0..len).map(|k| f64_at(offset + 8 * k)).collect::<Result<Vec<_>>>()?;
    Ok(RawTrajectory { tag, n, times, matrices })
}

fn entry_positions(tag: SpaceTag, n: usize) -> Vec<(usize, usize)> {
    let skip = usize::from(tag == SpaceTag::Hollow);
    (0..n).flat_map(|i| (i + skip..n).map(move |j| (i, j))).collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FormatError::Io(io).into(),
        kind => FormatError::Csv { line, message: format!("{kind:?}") }.into(),
    }
}

pub fn write_trajectory_csv<M: SpaceElement>(mut w: impl Write, traj: &Trajectory<M>) -> Result<()> {
    let n = traj.dim();
    writeln!(w, "# space_tag={} n={}", M::TAG, n)?;
    let pos = entry_positions(M::TAG, n);
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<String> = std::iter::once("time".to_string())
        .chain(pos.iter().map(|(i, j)| format!("m_{i}_{j}")))
        .collect();
    out.write_record(&header).map_err(csv_error)?;
    for (t, m) in traj.times().iter().zip(traj.values()) {
        let a = m.as_symmetric().as_matrix();
        let row: Vec<String> = std::iter::once(format_f64(*t))
            .chain(pos.iter().map(|&(i, j)| format_f64(a[(i, j)])))
            .collect();
        out.write_record(&row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_field(text: &str, line: u64, column: usize) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| FormatError::InvalidNumber { line, column, text: text.to_string() })?;
    if !v.is_finite() {
        return Err(FormatError::NonFiniteValue { line, column }.into());
    }
    Ok(v)
}

pub fn read_trajectory_csv(mut r: impl BufRead) -> Result<RawTrajectory> {
    let mut first = String::new();
    if r.read_line(&mut first)? == 0 {
        return Err(FormatError::MalformedHeader { line: 1, message: "empty file".into() }.into());
    }
    let malformed = |message: String| FormatError::MalformedHeader { line: 1, message };
    let meta = first
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| malformed("expected `# space_tag=<tag> n=<n>`".into()))?;
    let mut tag = None;
    let mut n = None;
    for kv in meta.split_whitespace() {
        match kv.split_once('=') {
            Some(("space_tag", v)) => tag = Some(v.parse::<SpaceTag>().map_err(|e| malformed(e.to_string()))?),
            Some(("n", v)) => n = Some(v.parse::<usize>().map_err(|e| malformed(e.to_string()))?),
            _ => return Err(malformed(format!("unexpected field `{kv}`")).into()),
        }
    }
    let (tag, n) = match (tag, n) {
        (Some(t), Some(n)) if n > 0 => (t, n),
        _ => return Err(malformed("missing space_tag or n".into()).into()),
    };
    let pos = entry_positions(tag, n);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header = reader.headers().map_err(csv_error)?.clone();
    let expected: Vec<String> = std::iter::once("time".to_string())
        .chain(pos.iter().map(|(i, j)| format!("m_{i}_{j}")))
        .collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(FormatError::MalformedHeader {
            line: 2,
            message: format!("expected {} columns `time,m_0_…`", expected.len()),
        }
        .into());
    }
    let mut times = Vec::new();
    let mut matrices = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line()) + 1;
        if rec.len() != expected.len() {
            return Err(FormatError::ShapeMismatch { line, expected: expected.len(), found: rec.len() }.into());
        }
        times.push(parse_field(&rec[0], line, 1)?);
        let mut m = DMatrix::zeros(n, n);
        for (k, &(i, j)) in pos.iter().enumerate() {
            let v = parse_field(&rec[k + 1], line, k + 2)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        matrices.push(m);
    }
    Ok(RawTrajectory { tag, n, times, matrices })
}

/// Header row of region names, then one row of values per time sample.
pub fn read_timeseries_csv(path: impl AsRef<Path>) -> Result<RegionTimeSeries> {
    read_timeseries_csv_from(BufReader::new(File::open(path)?))
}

pub fn read_timeseries_csv_from(r: impl Read) -> Result<RegionTimeSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(FormatError::MalformedHeader { line: 1, message: "empty file".into() }.into());
    }
    if header.iter().any(|h| h.trim().is_empty() || h.trim().parse::<f64>().is_ok()) {
        return Err(FormatError::MalformedHeader {
            line: 1,
            message: "expected a header row of region names".into(),
        }
        .into());
    }
    let n = header.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n {
            return Err(FormatError::ShapeMismatch { line, expected: n, found: rec.len() }.into());
        }
        columns.push(
            rec.iter()
                .enumerate()
                .map(|(c, text)| parse_field(text, line, c + 1))
                .collect::<Result<_>>()?,
        );
    }
    if columns.is_empty() {
        return Err(FormatError::ShapeMismatch { line: 2, expected: n, found: 0 }.into());
    }
    let data = DMatrix::from_fn(n, columns.len(), |i, t| columns[t][i]);
    RegionTimeSeries::new(data, Some(header.iter().map(|h| h.trim().to_string()).collect()))
}

pub fn write_timeseries_csv(path: impl AsRef<Path>, ts: &RegionTimeSeries) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(csv_error)?;
    let names: Vec<String> = match ts.labels() {
        Some(l) => l.to_vec(),
        None => (0..ts.n_regions()).map(|i| format!("region_{i}")).collect(),
    };
    out.write_record(&names).map_err(csv_error)?;
    for col in ts.data().column_iter() {
        out.write_record(col.iter().map(|v| format_f64(*v))).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `time,min_eigenvalue`, then `deviation_percent` and
/// `scale_0…scale_{n−1}` when present.
pub fn write_diagnostics_csv(path: impl AsRef<Path>, series: &DiagnosticSeries) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(csv_error)?;
    let width = series.scaling_factors.as_ref().and_then(|f| f.first()).map_or(0, |d| d.len());
    let mut header = vec!["time".to_string(), "min_eigenvalue".to_string()];
    if series.deviations.is_some() {
        header.push("deviation_percent".into());
    }
    header.extend((0..width).map(|i| format!("scale_{i}")));
    out.write_record(&header).map_err(csv_error)?;
    for k in 0..series.len() {
        let mut row = vec![format_f64(series.times[k]), format_f64(series.min_eigenvalues[k])];
        if let Some(d) = &series.deviations {
            row.push(format_f64(d[k]));
        }
        if let Some(f) = &series.scaling_factors {
            row.extend(f[k].iter().map(|v| format_f64(*v)));
        }
        out.write_record(&row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// A `# explained_variance=…` line, then columns `time,pc1,pc2,pc3`.
pub fn write_pca_csv(path: impl AsRef<Path>, times: &[f64], pca: &PcaResult) -> Result<()> {
    if times.len() != pca.coords.nrows() {
        return Err(Error::DimensionMismatch { expected: pca.coords.nrows(), found: times.len() });
    }
    let mut w = BufWriter::new(File::create(path)?);
    let ev = pca.explained;
    writeln!(
        w,
        "# explained_variance={},{},{} total_variance={}",
        format_f64(ev[0]),
        format_f64(ev[1]),
        format_f64(ev[2]),
        format_f64(pca.total_variance)
    )?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["time", "pc1", "pc2", "pc3"]).map_err(csv_error)?;
    for (k, t) in times.iter().enumerate() {
        let c = pca.coords.row(k);
        out.write_record([format_f64(*t), format_f64(c[0]), format_f64(c[1]), format_f64(c[2])])
            .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// A `# best_degree=… best_samples=…` line, then one row per degree with a
/// `log10(MSE)` column per sample count.
pub fn write_grid_csv(path: impl AsRef<Path>, grid: &GridSearchResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# best_degree={} best_samples={}", grid.best.0, grid.best.1)?;
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<String> = std::iter::once("degree".to_string())
        .chain(grid.sample_counts.iter().map(|k| format!("k_{k}")))
        .collect();
    out.write_record(&header).map_err(csv_error)?;
    for (i, d) in grid.degrees.iter().enumerate() {
        let row: Vec<String> = std::iter::once(d.to_string())
            .chain(grid.mse_table.row(i).iter().map(|v| format_f64(*v)))
            .collect();
        out.write_record(&row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}
