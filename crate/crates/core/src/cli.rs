//! Command-line front end.
//!
//! Every run writes into `<outdir>/<command>/`: a `manifest.json` holding the
//! fully resolved configuration (re-runnable with `--config`), a
//! `summary.json`, trace CSVs and SVG plots. Output bytes depend only on the
//! manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{self, IssConstants, StorageCertificate, StorageSegment};
use crate::experiments::{self, Exp1Config, Exp2Config, Exp3Config, GridSpec, Optimizer, TrainConfig};
use crate::format::{sig17, to_json_string};
use crate::numlin::{real_vec, DenseMatrix, HermitianMatrix, DEFAULT_RANK_TOL};
use crate::ssm::{self, Gate, InputKind, InputSignal, Mode, Schedule, SelectiveSystem, Selection, SsmError, Trajectory};

#[derive(Debug, Error)]
pub enum CliError {
    /// `--help` / `--version` output; not an error for the exit status.
    #[error("{0}")]
    Info(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Runtime(_) => 2,
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a system description and export its trajectory.
    Simulate,
    /// Simulate and evaluate every certificate check.
    Certify,
    /// Initializer energy-landscape comparison.
    Exp1,
    /// Irreversible forgetting under rank-deficient gating.
    Exp2,
    /// Baseline vs LMI-regularized training.
    Exp3,
    /// LMI violation over the selection grid.
    SweepLmi,
}

impl Command {
    pub fn dir_name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Certify => "certify",
            Command::Exp1 => "exp1",
            Command::Exp2 => "exp2",
            Command::Exp3 => "exp3",
            Command::SweepLmi => "sweep-lmi",
        }
    }

    fn default_horizon(self) -> f64 {
        match self {
            Command::Exp1 => 40.0,
            Command::Exp2 => 15.0,
            Command::Exp3 => 20.0,
            Command::Simulate | Command::Certify | Command::SweepLmi => 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(Debug, Parser)]
#[command(name = "ssmlab", version, about = "Selective state-space model simulation and certification")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Output root; falls back to $SSMLAB_OUTDIR, then `out`.
    #[arg(long, env = "SSMLAB_OUTDIR", global = true)]
    outdir: Option<PathBuf>,
    /// JSON config file (a previous manifest.json works). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Held-out evaluation seed (exp3).
    #[arg(long, global = true)]
    eval_seed: Option<u64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    dt: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    horizon: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    x_min: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    x_max: Option<f64>,
    #[arg(long, global = true)]
    x_points: Option<usize>,
    /// System description JSON (simulate, certify, sweep-lmi).
    #[arg(long, global = true)]
    system: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    fd_step: Option<f64>,
    #[arg(long, global = true, value_enum)]
    optimizer: Option<OptimizerArg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub lr: f64,
    pub iters: usize,
    pub fd_step: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            gamma: t.gamma,
            lr: t.lr,
            iters: t.iters,
            fd_step: t.fd_step,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOptionsFile {
    optimizer: Option<Optimizer>,
    gamma: Option<f64>,
    lr: Option<f64>,
    iters: Option<usize>,
    fd_step: Option<f64>,
}

/// Real-valued system description accepted by `--system` and the `system`
/// config key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDescription {
    pub system: SystemSpec,
    pub schedule: ScheduleSpec,
    pub input: InputKind,
    pub h0: Vec<f64>,
    #[serde(default)]
    pub certificate: Option<CertificateSpec>,
    #[serde(default)]
    pub iss: Option<IssConstants>,
}

type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    ModeSwitched { modes: Vec<ModeSpec> },
    AffineGated { a_base: Rows, a_sel: Rows, b: Rows, c: Rows, gate: Gate },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub a: Rows,
    pub b: Rows,
    pub c: Rows,
}

/// Selection schedule on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    pub values: Vec<Selection>,
}

/// Piecewise-constant storage on `[0, horizon]`, one `q` per segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    pub q: Vec<Rows>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn matrix(rows: &Rows, what: &str) -> Result<DenseMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage(format!("{what}: matrix rows must be non-empty and equally long")));
    }
    Ok(DenseMatrix::from_real_rows(rows))
}

impl SystemDescription {
    pub fn build_system(&self) -> Result<SelectiveSystem> {
        let sys = match &self.system {
            SystemSpec::ModeSwitched { modes } => SelectiveSystem::mode_switched(
                modes
                    .iter()
                    .map(|m| {
                        Ok(Mode {
                            a: matrix(&m.a, "a")?,
                            b: matrix(&m.b, "b")?,
                            c: matrix(&m.c, "c")?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            SystemSpec::AffineGated {
                a_base,
                a_sel,
                b,
                c,
                gate,
            } => SelectiveSystem::affine_gated(
                matrix(a_base, "a_base")?,
                matrix(a_sel, "a_sel")?,
                matrix(b, "b")?,
                matrix(c, "c")?,
                *gate,
            ),
        };
        sys.map_err(|e| CliError::Usage(format!("system: {e}")))
    }

    pub fn build_schedule(&self, horizon: f64) -> Result<Schedule> {
        Schedule::new(0.0, horizon, self.schedule.breakpoints.clone(), self.schedule.values.clone())
            .map_err(|e| CliError::Usage(format!("schedule: {e}")))
    }

    pub fn build_input(&self, dim: usize, horizon: f64) -> Result<InputSignal> {
        InputSignal::from_kind(&self.input, dim, 0.0, horizon).map_err(|e| CliError::Usage(format!("input: {e}")))
    }

    pub fn build_certificate(&self, horizon: f64) -> Result<Option<StorageCertificate>> {
        let Some(spec) = &self.certificate else {
            return Ok(None);
        };
        if spec.q.len() != spec.breakpoints.len() + 1 {
            return Err(CliError::Usage(format!(
                "certificate: {} storage matrices for {} breakpoints",
                spec.q.len(),
                spec.breakpoints.len()
            )));
        }
        let mut edges = vec![0.0];
        edges.extend(&spec.breakpoints);
        edges.push(horizon);
        let segments = spec
            .q
            .iter()
            .enumerate()
            .map(|(k, q)| {
                let q = HermitianMatrix::new(matrix(q, "certificate q")?)
                    .map_err(|e| CliError::Usage(format!("certificate q[{k}]: {e}")))?;
                Ok(StorageSegment {
                    start: edges[k],
                    end: edges[k + 1],
                    q,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StorageCertificate::new(segments, spec.beta, spec.rank_tol)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("certificate: {e}")))
    }
}

/// Fully resolved run configuration; serialized verbatim as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub eval_seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub x_grid: GridSpec,
    pub train: TrainOptions,
    pub system: Option<SystemDescription>,
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    command: Option<Command>,
    seed: Option<u64>,
    eval_seed: Option<u64>,
    dt: Option<f64>,
    horizon: Option<f64>,
    x_grid: Option<GridSpec>,
    train: Option<TrainOptionsFile>,
    system: Option<SystemDescription>,
    system_file: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))
}

/// Resolves argv (including the program name) and an optional config file
/// into a [`RunConfig`]. Precedence: flag, then config file, then default.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Info(e.to_string()),
        _ => CliError::Usage(e.to_string().trim_start_matches("error: ").trim_end().to_string()),
    })?;
    let file: ConfigFile = match &cli.config {
        Some(p) => read_json(p, "config file")?,
        None => ConfigFile::default(),
    };

    let command = cli
        .command
        .or(file.command)
        .ok_or_else(|| CliError::Usage("no command given (simulate, certify, exp1, exp2, exp3, sweep-lmi)".into()))?;
    let seed = cli.seed.or(file.seed).unwrap_or(7);
    let eval_seed = cli.eval_seed.or(file.eval_seed).unwrap_or(seed + 1);
    let dt = cli.dt.or(file.dt).unwrap_or(ssm::DEFAULT_DT);
    let horizon = cli.horizon.or(file.horizon).unwrap_or(command.default_horizon());

    let base_grid = file.x_grid.unwrap_or_default();
    let x_grid = GridSpec {
        min: cli.x_min.unwrap_or(base_grid.min),
        max: cli.x_max.unwrap_or(base_grid.max),
        points: cli.x_points.unwrap_or(base_grid.points),
    };

    let ft = file.train.unwrap_or_default();
    let dflt = TrainOptions::default();
    let train = TrainOptions {
        optimizer: cli
            .optimizer
            .map(|o| match o {
                OptimizerArg::Gd => Optimizer::Gd,
                OptimizerArg::Adam => Optimizer::Adam,
            })
            .or(ft.optimizer)
            .unwrap_or(dflt.optimizer),
        gamma: cli.gamma.or(ft.gamma).unwrap_or(dflt.gamma),
        lr: cli.lr.or(ft.lr).unwrap_or(dflt.lr),
        iters: cli.iters.or(ft.iters).unwrap_or(dflt.iters),
        fd_step: cli.fd_step.or(ft.fd_step).unwrap_or(dflt.fd_step),
    };

    let system = match (&cli.system, &file.system_file, file.system) {
        (Some(p), _, _) => Some(read_json(p, "system file")?),
        (None, Some(p), _) => Some(read_json(p, "system file")?),
        (None, None, inline) => inline,
    };

    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CliError::Usage(format!("--dt must be positive, got {dt}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CliError::Usage(format!("--horizon must be positive, got {horizon}")));
    }
    if x_grid.points == 0 || !(x_grid.max >= x_grid.min) {
        return Err(CliError::Usage(format!("invalid x grid {x_grid:?}")));
    }
    if !(train.gamma >= 0.0 && train.lr > 0.0 && train.fd_step > 0.0) {
        return Err(CliError::Usage(format!("invalid training options {train:?}")));
    }
    if matches!(command, Command::Simulate | Command::Certify) && system.is_none() {
        return Err(CliError::Usage(format!(
            "{} needs a system description (--system FILE)",
            command.dir_name()
        )));
    }

    Ok(RunConfig {
        command,
        seed,
        eval_seed,
        dt,
        horizon,
        x_grid,
        train,
        system,
        outdir: cli.outdir.unwrap_or_else(|| PathBuf::from("out")),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YScale {
    Linear,
    Log10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Series {
    /// Keeps only points with `y > 0` (for log plots).
    pub fn positive(name: &str, x: &[f64], y: &[f64]) -> Self {
        let (x, y) = x.iter().zip(y).filter(|(_, &v)| v > 0.0 && v.is_finite()).map(|(&a, &b)| (a, b)).unzip();
        Self {
            name: name.to_string(),
            x,
            y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y_scale: YScale,
    pub series: Vec<Series>,
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone 800×500 SVG document for `spec`.
pub fn svg_string(spec: &PlotSpec) -> Result<String> {
    for s in &spec.series {
        if s.x.len() != s.y.len() {
            return Err(CliError::Runtime(format!("series {}: {} x vs {} y values", s.name, s.x.len(), s.y.len())));
        }
        if spec.y_scale == YScale::Log10 && s.y.iter().any(|&v| !(v > 0.0)) {
            return Err(CliError::Runtime(format!("series {}: log scale needs y > 0", s.name)));
        }
    }
    let tr = |v: f64| if spec.y_scale == YScale::Log10 { v.log10() } else { v };
    let finite = |v: &f64| v.is_finite();
    let xs = spec.series.iter().flat_map(|s| s.x.iter().copied()).filter(finite);
    let ys = spec.series.iter().flat_map(|s| s.y.iter().map(|&v| tr(v))).filter(finite);
    let range = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |acc: Option<(f64, f64)>, v| Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v)))));
    let (mut x0, mut x1) = range(&mut { xs }).unwrap_or((0.0, 1.0));
    let (mut y0, mut y1) = range(&mut { ys }).unwrap_or((0.0, 1.0));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if spec.y_scale == YScale::Log10 {
        y0 = y0.floor();
        y1 = y1.ceil();
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
    } else if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = SVG_W - MARGIN_L - MARGIN_R;
    let ph = SVG_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="500" viewBox="0 0 800 500" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="800" height="500" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_L + pw / 2.0,
        escape(&spec.title)
    );

    match spec.y_scale {
        YScale::Log10 => {
            let (lo, hi) = (y0 as i64, y1 as i64);
            for d in lo..=hi {
                let y = py(d as f64);
                let _ = writeln!(
                    out,
                    r##"<line class="grid decade" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
                    MARGIN_L,
                    MARGIN_L + pw
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"#,
                    MARGIN_L - 6.0,
                    y + 4.0
                );
            }
        }
        YScale::Linear => {
            for k in 0..=4 {
                let v = y0 + (y1 - y0) * k as f64 / 4.0;
                let y = py(v);
                let _ = writeln!(
                    out,
                    r##"<line class="grid" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
                    MARGIN_L,
                    MARGIN_L + pw
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                    MARGIN_L - 6.0,
                    y + 4.0
                );
            }
        }
    }
    for k in 0..=4 {
        let v = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
            px(v),
            MARGIN_T + ph + 18.0
        );
    }
    let _ = writeln!(
        out,
        r##"<path class="axes" d="M{:.2} {:.2} V{:.2} H{:.2}" fill="none" stroke="#000000"/>"##,
        MARGIN_L,
        MARGIN_T,
        MARGIN_T + ph,
        MARGIN_L + pw
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_L + pw / 2.0,
        SVG_H - 12.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        escape(&spec.y_label)
    );

    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for (&x, &y) in s.x.iter().zip(&s.y) {
            let (xv, yv) = (x, tr(y));
            if xv.is_finite() && yv.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", px(xv), py(yv.clamp(y0, y1)));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.trim_end()
        );
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_L + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 26.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg(spec: &PlotSpec, path: &Path) -> Result<()> {
    let svg = svg_string(spec)?;
    fs::write(path, svg).map_err(io_err(path))
}

/// Writes named columns of equal length as CSV with 17-digit floats.
pub fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let rows = columns.first().map_or(0, |c| c.len());
    if header.len() != columns.len() || columns.iter().any(|c| c.len() != rows) {
        return Err(CliError::Runtime(format!("{}: ragged CSV columns", path.display())));
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", header.join(","))?;
        for i in 0..rows {
            let line: Vec<String> = columns.iter().map(|c| sig17(c[i])).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_string(value).map_err(CliError::runtime)?;
    fs::write(path, text).map_err(io_err(path))
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    traj.write_csv(BufWriter::new(f)).map_err(|e| match e {
        SsmError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::runtime(other),
    })
}

fn subsample(traj: &Trajectory, stride: usize) -> Trajectory {
    let keep: Vec<usize> = (0..traj.len()).filter(|&i| i % stride == 0 || i + 1 == traj.len()).collect();
    Trajectory {
        grid: keep.iter().map(|&i| traj.grid[i]).collect(),
        h: keep.iter().map(|&i| traj.h[i].clone()).collect(),
        u: keep.iter().map(|&i| traj.u[i].clone()).collect(),
        y: keep.iter().map(|&i| traj.y[i].clone()).collect(),
        dt: traj.dt,
    }
}

/// Output directory of a run: `<outdir>/<command>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.outdir.join(cfg.command.dir_name())
}

/// Executes a resolved configuration and writes all artifacts. Returns the
/// run directory.
pub fn execute(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(&dir.join("manifest.json"), cfg)?;
    match cfg.command {
        Command::Exp1 => write_exp1(cfg, &dir)?,
        Command::Exp2 => write_exp2(cfg, &dir)?,
        Command::Exp3 => write_exp3(cfg, &dir)?,
        Command::Simulate => write_simulate(cfg, &dir)?,
        Command::Certify => write_certify(cfg, &dir)?,
        Command::SweepLmi => write_sweep(cfg, &dir)?,
    }
    Ok(dir)
}

fn write_exp1(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let report = experiments::run_experiment1(&Exp1Config {
        seed: cfg.seed,
        dt: cfg.dt,
        horizon: cfg.horizon,
        ..Exp1Config::default()
    })
    .map_err(CliError::runtime)?;
    let mut series = Vec::new();
    for c in &report.conditions {
        let tr = &c.traces;
        let energy = tr.energy.clone().unwrap_or_else(|| vec![f64::NAN; tr.t.len()]);
        write_columns(
            &dir.join(format!("energy_{}.csv", c.kind.name())),
            &["t", "state_norm", "energy"],
            &[&tr.t, &tr.norm, &energy],
        )?;
        let (name, y): (String, Vec<f64>) = match &tr.energy {
            Some(v) if c.q_positive_definite => (format!("{} V", c.kind.name()), v.clone()),
            _ => (format!("{} ½‖h‖²", c.kind.name()), tr.norm.iter().map(|n| 0.5 * n * n).collect()),
        };
        series.push(Series::positive(&name, &tr.t, &y));
    }
    render_svg(
        &PlotSpec {
            title: "Energy decay after input cutoff".into(),
            x_label: "t [s]".into(),
            y_label: "energy".into(),
            y_scale: YScale::Log10,
            series,
        },
        &dir.join("energy.svg"),
    )?;
    write_json(&dir.join("summary.json"), &report)
}

fn write_exp2(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let report = experiments::run_experiment2(&Exp2Config {
        seed: cfg.seed,
        dt: cfg.dt,
        horizon: cfg.horizon,
        ..Exp2Config::default()
    })
    .map_err(CliError::runtime)?;
    let traj = subsample(&report.trajectory, report.config.trace_stride);
    write_trajectory(&dir.join("states.csv"), &traj)?;
    let starts: Vec<f64> = report.honest.times.clone();
    let rank = |r: &[usize]| r.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    write_columns(
        &dir.join("rank_profile.csv"),
        &["t", "rank_honest", "rank_violating"],
        &[&starts, &rank(&report.honest.ranks), &rank(&report.violating.ranks)],
    )?;
    let h3: Vec<f64> = traj.h.iter().map(|h| h[2].re).collect();
    render_svg(
        &PlotSpec {
            title: "Third state component under mode switching".into(),
            x_label: "t [s]".into(),
            y_label: "h3".into(),
            y_scale: YScale::Linear,
            series: vec![Series {
                name: "h3".into(),
                x: traj.grid.clone(),
                y: h3,
            }],
        },
        &dir.join("h3.svg"),
    )?;
    write_json(&dir.join("summary.json"), &report)
}

fn write_exp3(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let exp = Exp3Config {
        train: TrainConfig {
            optimizer: cfg.train.optimizer,
            gamma: cfg.train.gamma,
            lr: cfg.train.lr,
            iters: cfg.train.iters,
            fd_step: cfg.train.fd_step,
            seed: cfg.seed,
            dt: cfg.dt,
            horizon: cfg.horizon,
            x_grid: cfg.x_grid,
        },
        eval_seed: cfg.eval_seed,
        eval_dt: cfg.dt,
        eval_horizon: cfg.horizon,
    };
    let report = experiments::run_experiment3(&exp).map_err(CliError::runtime)?;
    let mut series = Vec::new();
    for (name, cond) in [("baseline", &report.baseline), ("regularized", &report.regularized)] {
        let h = &cond.history;
        let col = |f: fn(&experiments::TrainStep) -> f64| h.iter().map(f).collect::<Vec<f64>>();
        let iter = col(|s| s.iter as f64);
        let lmi = col(|s| s.lmi_penalty);
        write_columns(
            &dir.join(format!("history_{name}.csv")),
            &["iter", "task_loss", "lmi_penalty", "total_loss", "max_state_norm"],
            &[&iter, &col(|s| s.task_loss), &lmi, &col(|s| s.total_loss), &col(|s| s.max_state_norm)],
        )?;
        series.push(Series::positive(name, &iter, &lmi));
    }
    render_svg(
        &PlotSpec {
            title: "LMI penalty during training".into(),
            x_label: "iteration".into(),
            y_label: "max LMI violation".into(),
            y_scale: YScale::Log10,
            series,
        },
        &dir.join("lmi_penalty.svg"),
    )?;
    write_json(&dir.join("summary.json"), &report)
}

struct Built {
    sys: SelectiveSystem,
    sched: Schedule,
    input: InputSignal,
    cert: Option<StorageCertificate>,
    desc: SystemDescription,
}

fn build(cfg: &RunConfig) -> Result<Built> {
    let desc = cfg
        .system
        .clone()
        .ok_or_else(|| CliError::Usage("missing system description".into()))?;
    let sys = desc.build_system()?;
    if desc.h0.len() != sys.state_dim() {
        return Err(CliError::Usage(format!(
            "h0 has {} entries, state dimension is {}",
            desc.h0.len(),
            sys.state_dim()
        )));
    }
    Ok(Built {
        sched: desc.build_schedule(cfg.horizon)?,
        input: desc.build_input(sys.in_dim(), cfg.horizon)?,
        cert: desc.build_certificate(cfg.horizon)?,
        sys,
        desc,
    })
}

#[derive(Serialize)]
struct SimulateSummary {
    nodes: usize,
    t_end: f64,
    diverged: bool,
    divergence_time: Option<f64>,
    max_state_norm: f64,
    final_state_norm: f64,
}

fn run_simulation(cfg: &RunConfig, b: &Built) -> Result<(Trajectory, Option<f64>)> {
    match ssm::simulate(&b.sys, &b.sched, &b.input, &real_vec(&b.desc.h0), cfg.dt, (0.0, cfg.horizon)) {
        Ok(t) => Ok((t, None)),
        Err(SsmError::Divergence { t, partial }) => Ok((*partial, Some(t))),
        Err(e) => Err(CliError::runtime(e)),
    }
}

fn norm_plot(traj: &Trajectory, path: &Path) -> Result<()> {
    let norms = traj.state_norms();
    render_svg(
        &PlotSpec {
            title: "State norm".into(),
            x_label: "t [s]".into(),
            y_label: "‖h‖".into(),
            y_scale: YScale::Linear,
            series: vec![Series {
                name: "‖h‖".into(),
                x: traj.grid.clone(),
                y: norms,
            }],
        },
        path,
    )
}

fn write_simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let b = build(cfg)?;
    let (traj, divergence_time) = run_simulation(cfg, &b)?;
    write_trajectory(&dir.join("trajectory.csv"), &traj)?;
    norm_plot(&traj, &dir.join("state_norm.svg"))?;
    let norms = traj.state_norms();
    write_json(
        &dir.join("summary.json"),
        &SimulateSummary {
            nodes: traj.len(),
            t_end: traj.grid.last().copied().unwrap_or(0.0),
            diverged: divergence_time.is_some(),
            divergence_time,
            max_state_norm: norms.iter().copied().fold(0.0, f64::max),
            final_state_norm: norms.last().copied().unwrap_or(0.0),
        },
    )
}

fn write_certify(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let b = build(cfg)?;
    let cert = b
        .cert
        .clone()
        .ok_or_else(|| CliError::Usage("certify needs a `certificate` in the system description".into()))?;
    let (traj, divergence_time) = run_simulation(cfg, &b)?;
    if let Some(t) = divergence_time {
        return Err(CliError::Runtime(format!("simulation diverged at t = {t}")));
    }
    let report = certify::build_report(&b.sys, &b.sched, &traj, &cert, &cfg.x_grid.values(), b.desc.iss)
        .map_err(CliError::runtime)?;
    write_trajectory(&dir.join("trajectory.csv"), &traj)?;
    let energy = ssm::energy_trace(&traj, &cert).map_err(CliError::runtime)?;
    write_columns(&dir.join("energy.csv"), &["t", "energy"], &[&traj.grid, &energy])?;
    norm_plot(&traj, &dir.join("state_norm.svg"))?;
    write_json(&dir.join("summary.json"), &report)
}

#[derive(Serialize)]
struct SweepSummary {
    max_violation: f64,
    violating_fraction: f64,
    samples: usize,
}

fn write_sweep(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (sys, cert) = match &cfg.system {
        Some(_) => {
            let b = build(cfg)?;
            let cert = match b.cert {
                Some(c) => c,
                None => StorageCertificate::constant(0.0, cfg.horizon, HermitianMatrix::identity(b.sys.state_dim()), 0.0)
                    .map_err(CliError::runtime)?,
            };
            (b.sys, cert)
        }
        None => return Err(CliError::Usage("sweep-lmi needs a system description (--system FILE)".into())),
    };
    let t_grid: Vec<f64> = cert.segments().iter().map(|s| s.start).collect();
    let rep = certify::lmi_violation_sweep(&sys, &cert, &cfg.x_grid.values(), &t_grid).map_err(CliError::runtime)?;
    let t: Vec<f64> = rep.samples.iter().map(|s| s.t).collect();
    let x: Vec<f64> = rep
        .samples
        .iter()
        .map(|s| match s.x {
            Selection::Mode(m) => m as f64,
            Selection::Value(v) => v,
        })
        .collect();
    let v: Vec<f64> = rep.samples.iter().map(|s| s.violation).collect();
    write_columns(&dir.join("lmi_sweep.csv"), &["t", "x", "violation"], &[&t, &x, &v])?;
    let series = t_grid
        .iter()
        .map(|&t0| {
            let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == t0).collect();
            Series {
                name: format!("t = {t0}"),
                x: idx.iter().map(|&i| x[i]).collect(),
                y: idx.iter().map(|&i| v[i]).collect(),
            }
        })
        .collect();
    render_svg(
        &PlotSpec {
            title: "LMI violation over the selection grid".into(),
            x_label: "x".into(),
            y_label: "max(0, λmax)".into(),
            y_scale: YScale::Linear,
            series,
        },
        &dir.join("lmi_sweep.svg"),
    )?;
    write_json(
        &dir.join("summary.json"),
        &SweepSummary {
            max_violation: rep.max_violation,
            violating_fraction: rep.violating_fraction,
            samples: rep.samples.len(),
        },
    )
}

/// Parses argv and runs the command; the binary maps errors to exit codes.
pub fn run<I, T>(argv: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = parse_config(argv)?;
    execute(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig> {
        parse_config(std::iter::once("ssmlab").chain(args.iter().copied()))
    }

    #[test]
    fn defaults_and_usage_errors() {
        let cfg = parse(&["exp2", "--outdir", "out/"]).unwrap();
        assert_eq!(cfg.command, Command::Exp2);
        assert_eq!(cfg.horizon, 15.0);
        assert_eq!(cfg.dt, 1e-3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.x_grid, GridSpec::default());
        assert_eq!(cfg.outdir, PathBuf::from("out/"));

        for bad in [&["exp2", "--dt", "0"][..], &["exp9"], &["exp1", "--bogus"], &[], &["simulate"]] {
            let e = parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad:?}: {e}");
        }
        assert_eq!(parse(&["--help"]).unwrap_err().exit_code(), 0);
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"command": "exp1", "seed": 3, "dt": 0.002, "train": {"gamma": 0.5}}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = parse(&["--config", p, "--seed", "11"]).unwrap();
        assert_eq!(cfg.command, Command::Exp1);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.dt, 0.002);
        assert_eq!(cfg.train.gamma, 0.5);
        assert_eq!(cfg.eval_seed, 12);
        let cfg = parse(&["exp2", "--config", p]).unwrap();
        assert_eq!(cfg.command, Command::Exp2);

        fs::write(&path, r#"{"command": "exp1", "colour": 1}"#).unwrap();
        assert_eq!(parse(&["--config", p]).unwrap_err().exit_code(), 1);
        assert_eq!(parse(&["--config", "/nonexistent/cfg.json"]).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn manifest_round_trips_through_config() {
        let cfg = parse(&["exp3", "--seed", "5", "--gamma", "0.02", "--x-min", "-1"]).unwrap();
        let text = to_json_string(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, text).unwrap();
        let again = parse(&["--config", path.to_str().unwrap()]).unwrap();
        assert_eq!(again, RunConfig { outdir: again.outdir.clone(), ..cfg });
    }

    #[test]
    fn svg_log_gridlines_and_determinism() {
        let spec = PlotSpec {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            y_scale: YScale::Log10,
            series: vec![Series {
                name: "s".into(),
                x: vec![0.0, 1.0, 2.0],
                y: vec![1.0, 0.1, 0.01],
            }],
        };
        let a = svg_string(&spec).unwrap();
        assert_eq!(a.matches("class=\"grid decade\"").count(), 3);
        assert_eq!(a, svg_string(&spec).unwrap());
        assert!(a.starts_with("<svg") && a.contains("viewBox=\"0 0 800 500\""));

        let empty = PlotSpec {
            series: vec![],
            y_scale: YScale::Linear,
            ..spec.clone()
        };
        let e = svg_string(&empty).unwrap();
        assert!(e.contains("class=\"axes\"") && !e.contains("polyline"));

        let bad = PlotSpec {
            series: vec![Series {
                name: "s".into(),
                x: vec![0.0],
                y: vec![0.0],
            }],
            ..spec
        };
        assert!(svg_string(&bad).is_err());
    }

    fn passive_description() -> SystemDescription {
        serde_json::from_str(
            r#"{
                "system": {"form": "affine_gated", "a_base": [[-2, 0], [0, -2]], "a_sel": [[-1, 0], [0, -1]],
                           "b": [[0.5], [0.2]], "c": [[0.5, 0.2]], "gate": "tanh"},
                "schedule": {"breakpoints": [1.0], "values": [{"value": 0.5}, {"value": -1.0}]},
                "input": {"kind": "constant", "value": [1.0]},
                "h0": [1.0, -1.0],
                "certificate": {"q": [[[1, 0], [0, 1]]]},
                "iss": {"k1": 1.0, "k2": 1.0, "delta": 0.5, "M_B": 0.6}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn certify_and_sweep_write_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let sys_path = dir.path().join("sys.json");
        fs::write(&sys_path, to_json_string(&passive_description()).unwrap()).unwrap();
        let out = dir.path().join("out");
        for cmd in ["simulate", "certify", "sweep-lmi"] {
            let run_dir = run([
                "ssmlab",
                cmd,
                "--system",
                sys_path.to_str().unwrap(),
                "--outdir",
                out.to_str().unwrap(),
                "--horizon",
                "2",
            ])
            .unwrap();
            assert!(run_dir.join("manifest.json").exists());
            assert!(run_dir.join("summary.json").exists());
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("certify/summary.json")).unwrap()).unwrap();
        assert_eq!(summary["max_lmi_violation"].as_f64(), Some(0.0));
        assert!(summary["dissipation"].as_array().unwrap().iter().all(|d| d["residual"].as_f64().unwrap() <= 1e-6));
        assert!(summary["iss"]["min_margin"].as_f64().unwrap() >= -1e-6);
        let sweep: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("sweep-lmi/summary.json")).unwrap()).unwrap();
        assert_eq!(sweep["samples"].as_u64(), Some(61));
    }

    #[test]
    fn exp2_artifacts_are_reproducible_from_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let run_a = run(["ssmlab", "exp2", "--outdir", a.to_str().unwrap()]).unwrap();
        let manifest = run_a.join("manifest.json");
        let run_b = run(["ssmlab", "--config", manifest.to_str().unwrap(), "--outdir", b.to_str().unwrap()]).unwrap();
        let mut names: Vec<_> = fs::read_dir(&run_a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(
            names,
            ["h3.svg", "manifest.json", "rank_profile.csv", "states.csv", "summary.json"].map(std::ffi::OsString::from)
        );
        for n in names {
            assert_eq!(fs::read(run_a.join(&n)).unwrap(), fs::read(run_b.join(&n)).unwrap(), "{n:?}");
        }
    }
}
