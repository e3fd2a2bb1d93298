//! `corrgeom`: sliding-window connectivity, chart transforms, regression,
//! grid search, PCA export and synthetic trajectories.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use corrgeom::baselines::{cor_rescale, spd_exp, spd_log};
use corrgeom::logscaling::{RowZeroQuadraticForm, ScalingOptions};
use corrgeom::offlog::{DiagSolverOptions, HolQuadraticForm};
use corrgeom::pipeline::io::{self, AnyTrajectory, FormatError};
use corrgeom::pipeline::pca::pca3_trajectory;
use corrgeom::pipeline::synth::{synthesize_trajectory, SynthSpec};
use corrgeom::pipeline::window::{sliding_window_correlation, WindowSpec};
use corrgeom::regression::{grid_search, regress_pullback_with, ChartOptions, Frame, Regressed, Trajectory};
use corrgeom::symkernel::{sym_eig, SymmetricMatrix};
use corrgeom::{CorrelationMatrix, Error, FlatChart};
use rayon::prelude::*;

use crate::config::Config;

#[derive(Parser, Debug)]
#[command(name = "corrgeom", version, about = "Correlation-matrix trajectory geometry and regression")]
struct Cli {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    solver: SolverArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Residual tolerance of the off-log diagonal solver.
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Gradient tolerance of the Newton scaling solver.
    #[arg(long, global = true)]
    newton_tol: Option<f64>,
    #[arg(long, global = true)]
    newton_max_iter: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sliding-window Pearson correlation of a region time series CSV.
    Window {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        offset: Option<usize>,
        /// Drop windows containing samples on both sides of this index.
        #[arg(long)]
        seam: Option<usize>,
    },
    /// Apply a chart (or its inverse) to every point of a trajectory.
    Transform {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        frame: Option<Frame>,
        #[arg(long)]
        inverse: bool,
    },
    /// Polynomial regression in a frame, mapped back to matrices.
    Regress {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        frame: Option<Frame>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Diagnostics CSV; defaults to `<output stem>.diagnostics.csv`.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[command(flatten)]
        form: FormArgs,
    },
    /// Log10-MSE table over degrees and sample counts.
    Gridsearch {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        frame: Option<Frame>,
        /// Comma-separated degrees, e.g. `1,2,3`.
        #[arg(long)]
        degrees: Option<String>,
        /// Comma-separated sample counts.
        #[arg(long)]
        samples_list: Option<String>,
    },
    /// First three principal components of the vectorized trajectory.
    Pca {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
    },
    /// Smooth synthetic correlation trajectory.
    Synth {
        output: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "T")]
        len: Option<usize>,
        #[arg(long)]
        smoothness: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        amplitude: Option<f64>,
    },
}

/// Coefficients of the quadratic form used for the distance summary.
#[derive(Args, Debug)]
struct FormArgs {
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::InvalidArgument(_) | Error::InvalidForm(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("corrgeom: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let opts = chart_options(&cli.solver, &cfg)?;
    match cli.command {
        Command::Window { input, output, width, offset, seam } => {
            let input = cfg.path(input, "input")?;
            let output = cfg.path(output, "output")?;
            let mut spec = WindowSpec::new(cfg.get(width, "width", 600)?, cfg.get(offset, "offset", 1)?)?;
            spec.seam = cfg.opt(seam, "seam")?;
            cmd_window(&input, &output, &spec)
        }
        Command::Transform { input, output, frame, inverse } => {
            let input = cfg.path(input, "input")?;
            let output = cfg.path(output, "output")?;
            let frame = cfg.get(frame, "frame", Frame::OffLog)?;
            let inverse = inverse || cfg.get(None, "inverse", false)?;
            cmd_transform(&input, &output, frame, inverse, &opts)
        }
        Command::Regress { input, output, frame, degree, samples, diagnostics, form } => {
            let input = cfg.path(input, "input")?;
            let output = cfg.path(output, "output")?;
            let diagnostics = match cfg.opt(diagnostics, "diagnostics")? {
                Some(p) => p,
                None => default_diagnostics_path(&output),
            };
            let frame = cfg.get(frame, "frame", Frame::OffLog)?;
            let degree = cfg.get(degree, "degree", 6)?;
            let samples = cfg.get(samples, "samples", 10)?;
            if samples < degree + 1 {
                return Err(CliError::Usage(format!(
                    "degree {degree} needs at least {} samples, got {samples}",
                    degree + 1
                )));
            }
            let form = (cfg.opt(form.alpha, "alpha")?, cfg.opt(form.beta, "beta")?, cfg.opt(form.gamma, "gamma")?);
            cmd_regress(&input, &output, &diagnostics, frame, degree, samples, form, &opts)
        }
        Command::Gridsearch { input, output, frame, degrees, samples_list } => {
            let input = cfg.path(input, "input")?;
            let output = cfg.path(output, "output")?;
            let frame = cfg.get(frame, "frame", Frame::OffLog)?;
            let degrees = parse_list(&cfg.get(degrees, "degrees", "1,2,3,4,5,6,7,8,9,10".to_string())?)?;
            let samples = parse_list(&cfg.get(samples_list, "samples-list", "4,6,8,10,15,20,30,50".to_string())?)?;
            if degrees.is_empty() || samples.is_empty() {
                return Err(CliError::Usage("empty grid".into()));
            }
            cmd_gridsearch(&input, &output, frame, &degrees, &samples, &opts)
        }
        Command::Pca { input, output } => {
            let input = cfg.path(input, "input")?;
            let output = cfg.path(output, "output")?;
            cmd_pca(&input, &output)
        }
        Command::Synth { output, n, len, smoothness, seed, noise, amplitude } => {
            let output = cfg.path(output, "output")?;
            let mut spec = SynthSpec::new(
                cfg.get(n, "n", 10)?,
                cfg.get(len, "T", 100)?,
                cfg.get(smoothness, "smoothness", 1.0)?,
                cfg.get(seed, "seed", 0)?,
            );
            spec.noise = cfg.get(noise, "noise", spec.noise)?;
            spec.amplitude = cfg.get(amplitude, "amplitude", spec.amplitude)?;
            cmd_synth(&output, &spec)
        }
    }
}

fn chart_options(args: &SolverArgs, cfg: &Config) -> CliResult<ChartOptions> {
    let d = DiagSolverOptions::default();
    let s = ScalingOptions::default();
    Ok(ChartOptions {
        diag_solver: DiagSolverOptions {
            eps: cfg.get(args.eps, "eps", d.eps)?,
            max_iter: cfg.get(args.max_iter, "max-iter", d.max_iter)?,
            ..d
        },
        scaling: ScalingOptions {
            tol: cfg.get(args.newton_tol, "newton-tol", s.tol)?,
            max_iter: cfg.get(args.newton_max_iter, "newton-max-iter", s.max_iter)?,
            ..s
        },
    })
}

fn parse_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::Usage(format!("`{t}` is not a non-negative integer"))))
        .collect()
}

fn default_diagnostics_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.diagnostics.csv"))
}

fn read_correlation(path: &Path) -> CliResult<Trajectory<CorrelationMatrix>> {
    Ok(io::read_trajectory(path)?.into_typed()?)
}

fn cmd_window(input: &Path, output: &Path, spec: &WindowSpec) -> CliResult<()> {
    let ts = io::read_timeseries_csv(input)?;
    let start = Instant::now();
    let traj = sliding_window_correlation(&ts, spec)?;
    let elapsed = start.elapsed();
    let (lo, hi) = traj
        .values()
        .par_iter()
        .map(|c| sym_eig(c.as_symmetric()).map(|e| (e.min(), e.max())))
        .collect::<corrgeom::Result<Vec<_>>>()?
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
    io::write_trajectory(output, &traj)?;
    eprintln!(
        "windows: T = {} (n = {}, width {}, offset {}) in {:.3} s",
        traj.len(),
        traj.dim(),
        spec.width,
        spec.offset,
        elapsed.as_secs_f64()
    );
    eprintln!("spectral range: [{lo:.6e}, {hi:.6e}]");
    Ok(())
}

fn cmd_transform(input: &Path, output: &Path, frame: Frame, inverse: bool, opts: &ChartOptions) -> CliResult<()> {
    let raw = io::read_trajectory(input)?;
    let start = Instant::now();
    if inverse {
        let expected = frame.coordinate_tag();
        if raw.tag != expected {
            return Err(Error::from(FormatError::TagMismatch { expected, found: raw.tag }).into());
        }
        let out: Trajectory<CorrelationMatrix> = match frame {
            Frame::OffLog => {
                let t = raw.into_typed()?;
                t.with_values(opts.offlog().exp_many(t.values())?)?
            }
            Frame::LogScaling => {
                let t = raw.into_typed()?;
                t.with_values(opts.logscaling().exp_many(t.values())?)?
            }
            Frame::SpdLogEuclidean => {
                let t: Trajectory<SymmetricMatrix> = raw.into_typed()?;
                t.par_map(|s| Ok(cor_rescale(&spd_exp(s)?)?.0))?
            }
            Frame::Euclidean => {
                let t: Trajectory<SymmetricMatrix> = raw.into_typed()?;
                t.par_map(|s| CorrelationMatrix::new(s.clone()))?
            }
        };
        report_timing("inverse", frame, out.len(), start);
        io::write_trajectory(output, &out)?;
    } else {
        let t = raw.into_typed::<CorrelationMatrix>()?;
        match frame {
            Frame::OffLog => {
                let out = t.with_values(opts.offlog().log_many(t.values())?)?;
                report_timing("forward", frame, out.len(), start);
                io::write_trajectory(output, &out)?;
            }
            Frame::LogScaling => {
                let out = t.with_values(opts.logscaling().log_many(t.values())?)?;
                report_timing("forward", frame, out.len(), start);
                io::write_trajectory(output, &out)?;
            }
            Frame::SpdLogEuclidean => {
                let out = t.par_map(|c| spd_log(c.as_spd()))?;
                report_timing("forward", frame, out.len(), start);
                io::write_trajectory(output, &out)?;
            }
            Frame::Euclidean => {
                let out = t.par_map(|c| Ok(c.as_symmetric().clone()))?;
                report_timing("forward", frame, out.len(), start);
                io::write_trajectory(output, &out)?;
            }
        }
    }
    Ok(())
}

fn report_timing(direction: &str, frame: Frame, len: usize, start: Instant) {
    eprintln!("{direction} {frame}: {len} points in {:.3} s", start.elapsed().as_secs_f64());
}

/// Mean squared distance between input and output under the frame's pulled-back metric.
fn mean_sq_distance<C: FlatChart>(
    chart: &C,
    form: &C::Form,
    a: &[CorrelationMatrix],
    b: &[CorrelationMatrix],
) -> CliResult<f64>
where
    C::Form: Sync,
{
    let total = a
        .par_iter()
        .zip(b)
        .map(|(x, y)| chart.distance(form, x, y).map(|d| d * d))
        .collect::<corrgeom::Result<Vec<_>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(total / a.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn cmd_regress(
    input: &Path,
    output: &Path,
    diagnostics: &Path,
    frame: Frame,
    degree: usize,
    samples: usize,
    form: (Option<f64>, Option<f64>, Option<f64>),
    opts: &ChartOptions,
) -> CliResult<()> {
    let traj = read_correlation(input)?;
    let n = traj.dim();
    let has_form = form.0.is_some() || form.1.is_some() || form.2.is_some();
    let coeffs = (form.0.unwrap_or(0.0), form.1.unwrap_or(0.0), form.2.unwrap_or(0.0));
    let hol_form = match (frame, has_form) {
        (Frame::OffLog, true) => Some(HolQuadraticForm::new(coeffs.0, coeffs.1, coeffs.2, n)?),
        (Frame::OffLog, false) => Some(HolQuadraticForm::default_for(n)?),
        _ => None,
    };
    let row_form = match (frame, has_form) {
        (Frame::LogScaling, true) => Some(RowZeroQuadraticForm::new(coeffs.0, coeffs.1, coeffs.2, n)?),
        (Frame::LogScaling, false) => Some(RowZeroQuadraticForm::default_for(n)?),
        _ => None,
    };
    if has_form && hol_form.is_none() && row_form.is_none() {
        return Err(CliError::Usage(format!("frame {frame} takes no quadratic form")));
    }

    let start = Instant::now();
    let result = regress_pullback_with(&traj, frame, degree, samples, opts)?;
    eprintln!(
        "regress {frame}: degree {degree}, {samples} samples, {} points in {:.3} s",
        traj.len(),
        start.elapsed().as_secs_f64()
    );
    match &result.trajectory {
        Regressed::Correlation(out) => {
            let valid = out
                .values()
                .par_iter()
                .filter(|c| CorrelationMatrix::new(c.as_symmetric().clone()).is_ok())
                .count();
            eprintln!("valid correlation matrices: {valid}/{}", out.len());
            io::write_trajectory(output, out)?;
            if let Some(f) = &hol_form {
                let d = mean_sq_distance(&opts.offlog(), f, traj.values(), out.values())?;
                eprintln!("mean squared distance to input: {d:.6e}");
            }
            if let Some(f) = &row_form {
                let d = mean_sq_distance(&opts.logscaling(), f, traj.values(), out.values())?;
                eprintln!("mean squared distance to input: {d:.6e}");
            }
        }
        Regressed::Symmetric(out) => io::write_trajectory(output, out)?,
    }
    let diag = &result.diagnostics;
    eprintln!(
        "min eigenvalue {:.6e}; points with min eigenvalue <= 0: {}/{}",
        diag.min_eigenvalue(),
        diag.nonpositive_count(),
        diag.len()
    );
    if let Some(dev) = diag.max_relative_deviation {
        eprintln!("max rescaling deviation: {dev:.4}%");
    }
    eprintln!("flat mse {:.6e}; pullback mse {:.6e}", result.flat_mse, result.pullback_mse);
    io::write_diagnostics_csv(diagnostics, diag)?;
    Ok(())
}

fn cmd_gridsearch(
    input: &Path,
    output: &Path,
    frame: Frame,
    degrees: &[usize],
    samples: &[usize],
    opts: &ChartOptions,
) -> CliResult<()> {
    let traj = read_correlation(input)?;
    let start = Instant::now();
    let grid = match frame {
        Frame::OffLog => grid_search(&traj.with_values(opts.offlog().log_many(traj.values())?)?, degrees, samples)?,
        Frame::LogScaling => {
            grid_search(&traj.with_values(opts.logscaling().log_many(traj.values())?)?, degrees, samples)?
        }
        Frame::SpdLogEuclidean => grid_search(&traj.par_map(|c| spd_log(c.as_spd()))?, degrees, samples)?,
        Frame::Euclidean => grid_search(&traj.par_map(|c| Ok(c.as_symmetric().clone()))?, degrees, samples)?,
    };
    let (d, k) = grid.best;
    eprintln!(
        "grid search {frame}: {}x{} cells in {:.3} s; best degree {d} with {k} samples",
        degrees.len(),
        samples.len(),
        start.elapsed().as_secs_f64()
    );
    if !grid.tie_break_note.is_empty() {
        eprintln!("{}", grid.tie_break_note);
    }
    io::write_grid_csv(output, &grid)?;
    Ok(())
}

fn cmd_pca(input: &Path, output: &Path) -> CliResult<()> {
    let any = io::read_trajectory(input)?.into_any()?;
    let start = Instant::now();
    let (times, pca) = match &any {
        AnyTrajectory::Correlation(t) => (t.times(), pca3_trajectory(t)?),
        AnyTrajectory::Spd(t) => (t.times(), pca3_trajectory(t)?),
        AnyTrajectory::Symmetric(t) => (t.times(), pca3_trajectory(t)?),
        AnyTrajectory::Hollow(t) => (t.times(), pca3_trajectory(t)?),
        AnyTrajectory::RowZero(t) => (t.times(), pca3_trajectory(t)?),
    };
    eprintln!(
        "pca ({}): explained variance {:.6e}, {:.6e}, {:.6e} of {:.6e} in {:.3} s",
        any.tag(),
        pca.explained[0],
        pca.explained[1],
        pca.explained[2],
        pca.total_variance,
        start.elapsed().as_secs_f64()
    );
    io::write_pca_csv(output, times, &pca)?;
    Ok(())
}

fn cmd_synth(output: &Path, spec: &SynthSpec) -> CliResult<()> {
    let start = Instant::now();
    let traj = synthesize_trajectory(spec)?;
    eprintln!(
        "synthesized T = {} correlation matrices of size {} in {:.3} s",
        traj.len(),
        traj.dim(),
        start.elapsed().as_secs_f64()
    );
    io::write_trajectory(output, &traj)?;
    Ok(())
}
