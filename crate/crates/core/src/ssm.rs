//! Selective state-space systems, selection schedules, port inputs and the
//! fixed-step integrator.
//!
//! The dynamics are `ḣ = A(x(t)) h + B(x(t)) u`, `y = C(x(t)) h` with a
//! piecewise-constant selection schedule `x(·)`. The integration grid always
//! contains the schedule breakpoints (and input discontinuities) as nodes, so
//! every RK4 step sees constant parameters and a constant, zero-order-held
//! input.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::StorageCertificate;
use crate::format::sig17;
use crate::numlin::{self, mul_vec_into, vec_norm, DenseMatrix, NumlinError, C64};

pub const DEFAULT_DT: f64 = 1e-3;
/// State norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;
/// Grid points closer than this fraction of `dt` are merged.
const SNAP_FRACTION: f64 = 1e-6;
/// Round-off allowance for energy values.
const ENERGY_FLOOR: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("time {t} is out of horizon [{start}, {end}]")]
    OutOfHorizon { t: f64, start: f64, end: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("divergence: state norm exceeded {DIVERGENCE_NORM:e} at t = {t}")]
    Divergence { t: f64, partial: Box<Trajectory> },
    #[error("invalid storage: {0}")]
    InvalidStorage(String),
    #[error("trajectory has complex entries; CSV export carries real parts only")]
    ComplexExport,
    #[error(transparent)]
    Numlin(#[from] NumlinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SsmError>;

/// Bounded squashing map applied to the selection value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Tanh,
    /// `clamp(x, -1, 1)`
    HardTanh,
}

impl Gate {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Gate::Tanh => x.tanh(),
            Gate::HardTanh => x.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mode {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
}

#[derive(Clone, Debug)]
pub enum SystemForm {
    /// Finite list of operating modes, selected by index.
    ModeSwitched { modes: Vec<Mode> },
    /// `A(x) = A_base + gate(x)·A_sel`, constant `B` and `C`.
    AffineGated {
        a_base: DenseMatrix,
        a_sel: DenseMatrix,
        b: DenseMatrix,
        c: DenseMatrix,
        gate: Gate,
    },
}

/// Parameter triple active at one instant.
#[derive(Clone, Debug)]
pub struct Params {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct SelectiveSystem {
    state_dim: usize,
    in_dim: usize,
    out_dim: usize,
    form: SystemForm,
}

fn check_triple(a: &DenseMatrix, b: &DenseMatrix, c: &DenseMatrix) -> Result<(usize, usize)> {
    let n = a.rows();
    if !a.is_square() {
        return Err(SsmError::Dimension(format!("A is {}x{}", a.rows(), a.cols())));
    }
    if b.rows() != n {
        return Err(SsmError::Dimension(format!("B has {} rows, expected {n}", b.rows())));
    }
    if c.cols() != n {
        return Err(SsmError::Dimension(format!("C has {} cols, expected {n}", c.cols())));
    }
    if c.rows() != b.cols() {
        return Err(SsmError::Dimension(format!(
            "output width {} differs from input width {}",
            c.rows(),
            b.cols()
        )));
    }
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(NumlinError::NonFinite("system matrices").into());
    }
    Ok((n, b.cols()))
}

impl SelectiveSystem {
    pub fn mode_switched(modes: Vec<Mode>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| SsmError::Dimension("mode list is empty".into()))?;
        let (n, d) = check_triple(&first.a, &first.b, &first.c)?;
        for (i, m) in modes.iter().enumerate() {
            let dims = check_triple(&m.a, &m.b, &m.c)?;
            if dims != (n, d) {
                return Err(SsmError::Dimension(format!(
                    "mode {i} has dims {dims:?}, mode 0 has {:?}",
                    (n, d)
                )));
            }
        }
        Ok(Self {
            state_dim: n,
            in_dim: d,
            out_dim: d,
            form: SystemForm::ModeSwitched { modes },
        })
    }

    pub fn affine_gated(
        a_base: DenseMatrix,
        a_sel: DenseMatrix,
        b: DenseMatrix,
        c: DenseMatrix,
        gate: Gate,
    ) -> Result<Self> {
        let (n, d) = check_triple(&a_base, &b, &c)?;
        if a_sel.rows() != n || a_sel.cols() != n {
            return Err(SsmError::Dimension(format!(
                "A_sel is {}x{}, expected {n}x{n}",
                a_sel.rows(),
                a_sel.cols()
            )));
        }
        if !a_sel.is_finite() {
            return Err(NumlinError::NonFinite("A_sel").into());
        }
        Ok(Self {
            state_dim: n,
            in_dim: d,
            out_dim: d,
            form: SystemForm::AffineGated {
                a_base,
                a_sel,
                b,
                c,
                gate,
            },
        })
    }

    /// Single LTI system (one mode).
    pub fn lti(a: DenseMatrix, b: DenseMatrix, c: DenseMatrix) -> Result<Self> {
        Self::mode_switched(vec![Mode { a, b, c }])
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn form(&self) -> &SystemForm {
        &self.form
    }

    /// Parameters for a fixed selection.
    pub fn params_at(&self, sel: Selection) -> Result<Params> {
        match (&self.form, sel) {
            (SystemForm::ModeSwitched { modes }, Selection::Mode(i)) => {
                let m = modes.get(i).ok_or_else(|| {
                    SsmError::InvalidSchedule(format!("mode {i} of {}", modes.len()))
                })?;
                Ok(Params {
                    a: m.a.clone(),
                    b: m.b.clone(),
                    c: m.c.clone(),
                })
            }
            (
                SystemForm::AffineGated {
                    a_base,
                    a_sel,
                    b,
                    c,
                    gate,
                },
                Selection::Value(x),
            ) => Ok(Params {
                a: a_base.add(&a_sel.scale(gate.apply(x)))?,
                b: b.clone(),
                c: c.clone(),
            }),
            (SystemForm::ModeSwitched { .. }, Selection::Value(_)) => Err(
                SsmError::InvalidSchedule("mode-switched system needs mode indices".into()),
            ),
            (SystemForm::AffineGated { .. }, Selection::Mode(_)) => Err(
                SsmError::InvalidSchedule("gated system needs selection values".into()),
            ),
        }
    }

    /// Selections a sweep should cover: every mode, or every grid value.
    pub fn admissible_selections(&self, x_grid: &[f64]) -> Vec<Selection> {
        match &self.form {
            SystemForm::ModeSwitched { modes } => (0..modes.len()).map(Selection::Mode).collect(),
            SystemForm::AffineGated { .. } => x_grid.iter().map(|&x| Selection::Value(x)).collect(),
        }
    }
}

/// Value of the selection signal on one schedule interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Mode(usize),
    Value(f64),
}

/// Piecewise-constant selection signal on `[t_start, t_end]`.
///
/// Interval `k` is `[breakpoints[k-1], breakpoints[k])` (right-continuous),
/// with the first interval starting at `t_start` and the last ending at
/// `t_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    t_start: f64,
    t_end: f64,
    breakpoints: Vec<f64>,
    values: Vec<Selection>,
}

impl Schedule {
    pub fn new(t_start: f64, t_end: f64, breakpoints: Vec<f64>, values: Vec<Selection>) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_end > t_start) {
            return Err(SsmError::InvalidSchedule(format!(
                "bad horizon [{t_start}, {t_end}]"
            )));
        }
        if values.len() != breakpoints.len() + 1 {
            return Err(SsmError::InvalidSchedule(format!(
                "{} values for {} intervals",
                values.len(),
                breakpoints.len() + 1
            )));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SsmError::InvalidSchedule("breakpoints not strictly increasing".into()));
        }
        if breakpoints.iter().any(|&b| b <= t_start || b >= t_end) {
            return Err(SsmError::InvalidSchedule("breakpoint outside the open horizon".into()));
        }
        if values
            .iter()
            .any(|v| matches!(v, Selection::Value(x) if !x.is_finite()))
        {
            return Err(SsmError::InvalidSchedule("non-finite selection value".into()));
        }
        Ok(Self {
            t_start,
            t_end,
            breakpoints,
            values,
        })
    }

    pub fn constant(t_start: f64, t_end: f64, sel: Selection) -> Result<Self> {
        Self::new(t_start, t_end, Vec::new(), vec![sel])
    }

    /// Schedule from zero-order-held samples `samples[i]` on `[t_start + i·dt, ...)`.
    /// Runs of equal values are merged.
    pub fn from_samples(t_start: f64, t_end: f64, dt: f64, samples: &[f64]) -> Result<Self> {
        let first = *samples
            .first()
            .ok_or_else(|| SsmError::InvalidSchedule("no samples".into()))?;
        let mut breakpoints = Vec::new();
        let mut values = vec![Selection::Value(first)];
        let mut last = first;
        for (i, &x) in samples.iter().enumerate().skip(1) {
            let t = t_start + i as f64 * dt;
            if t >= t_end - SNAP_FRACTION * dt {
                break;
            }
            if x != last {
                breakpoints.push(t);
                values.push(Selection::Value(x));
                last = x;
            }
        }
        Self::new(t_start, t_end, breakpoints, values)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Selection] {
        &self.values
    }

    fn check_horizon(&self, t: f64) -> Result<()> {
        let eps = 1e-12 * (self.t_end - self.t_start).max(1.0);
        if t < self.t_start - eps || t > self.t_end + eps || !t.is_finite() {
            return Err(SsmError::OutOfHorizon {
                t,
                start: self.t_start,
                end: self.t_end,
            });
        }
        Ok(())
    }

    pub fn segment_index(&self, t: f64) -> Result<usize> {
        self.check_horizon(t)?;
        Ok(self.breakpoints.partition_point(|&b| b <= t))
    }

    pub fn at(&self, t: f64) -> Result<Selection> {
        Ok(self.values[self.segment_index(t)?])
    }

    /// `(start, end, value)` for every interval.
    pub fn segments(&self) -> Vec<(f64, f64, Selection)> {
        let mut edges = Vec::with_capacity(self.breakpoints.len() + 2);
        edges.push(self.t_start);
        edges.extend_from_slice(&self.breakpoints);
        edges.push(self.t_end);
        edges
            .windows(2)
            .zip(&self.values)
            .map(|(w, &v)| (w[0], w[1], v))
            .collect()
    }
}

/// Parameters active at time `t` under `sched` (right-continuous).
pub fn eval_params(sys: &SelectiveSystem, sched: &Schedule, t: f64) -> Result<Params> {
    sys.params_at(sched.at(t)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Zero,
    Constant { value: Vec<f64> },
    SeededWhiteNoise { amplitude: f64, seed: u64, sample_dt: f64 },
    SpikyReference { seed: u64, dt: f64 },
    /// `u(t) = x(t)` broadcast over every input channel.
    CoupledToSelection,
}

/// Port input `u(·)`. Seeded kinds are sampled once at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSignal {
    kind: InputKind,
    dim: usize,
    t_start: f64,
    t_end: f64,
    cutoff: Option<f64>,
    /// `samples[i * dim + k]`, held on `[t_start + i·sample_dt, ...)`
    samples: Vec<f64>,
    sample_dt: f64,
}

impl InputSignal {
    fn unsampled(kind: InputKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            t_start: f64::NEG_INFINITY,
            t_end: f64::INFINITY,
            cutoff: None,
            samples: Vec::new(),
            sample_dt: 0.0,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::unsampled(InputKind::Zero, dim)
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self::unsampled(InputKind::Constant { value }, dim)
    }

    pub fn coupled_to_selection(dim: usize) -> Self {
        Self::unsampled(InputKind::CoupledToSelection, dim)
    }

    /// Gaussian samples of standard deviation `amplitude`, one per channel
    /// every `sample_dt`, held constant in between.
    pub fn white_noise(amplitude: f64, seed: u64, sample_dt: f64, dim: usize, t_start: f64, t_end: f64) -> Self {
        assert!(sample_dt > 0.0 && t_end > t_start);
        let n = sample_count(t_start, t_end, sample_dt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                amplitude * z
            })
            .collect();
        Self {
            kind: InputKind::SeededWhiteNoise {
                amplitude,
                seed,
                sample_dt,
            },
            dim,
            t_start,
            t_end,
            cutoff: None,
            samples,
            sample_dt,
        }
    }

    /// Scalar spiky reference (see [`gen_spiky_reference`]).
    pub fn spiky_reference(seed: u64, dt: f64, t_start: f64, t_end: f64) -> Self {
        let samples = gen_spiky_reference(seed, t_start, t_end, dt);
        Self {
            kind: InputKind::SpikyReference { seed, dt },
            dim: 1,
            t_start,
            t_end,
            cutoff: None,
            samples,
            sample_dt: dt,
        }
    }

    /// Rebuilds a signal from its serialized kind.
    pub fn from_kind(kind: &InputKind, dim: usize, t_start: f64, t_end: f64) -> Result<Self> {
        Ok(match kind {
            InputKind::Zero => Self::zero(dim),
            InputKind::Constant { value } => {
                if value.len() != dim {
                    return Err(SsmError::Dimension(format!(
                        "constant input of width {} for {dim} channels",
                        value.len()
                    )));
                }
                Self::constant(value.clone())
            }
            InputKind::SeededWhiteNoise {
                amplitude,
                seed,
                sample_dt,
            } => {
                if !(*sample_dt > 0.0) {
                    return Err(SsmError::InvalidStep(*sample_dt));
                }
                Self::white_noise(*amplitude, *seed, *sample_dt, dim, t_start, t_end)
            }
            InputKind::SpikyReference { seed, dt } => {
                if dim != 1 {
                    return Err(SsmError::Dimension("spiky reference is scalar".into()));
                }
                if !(*dt > 0.0) {
                    return Err(SsmError::InvalidStep(*dt));
                }
                Self::spiky_reference(*seed, *dt, t_start, t_end)
            }
            InputKind::CoupledToSelection => Self::coupled_to_selection(dim),
        })
    }

    /// Switches the input off from `t` onward.
    pub fn with_cutoff(mut self, t: f64) -> Self {
        self.cutoff = Some(t);
        self
    }

    pub fn kind(&self) -> &InputKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    /// Raw samples of seeded kinds (row-major, `dim` per row).
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Discontinuities that must become grid nodes.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.cutoff.into_iter().collect()
    }

    /// Value held on the step starting at `t`.
    pub fn value_at(&self, t: f64, sched: &Schedule, out: &mut [C64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.dim);
        if self.cutoff.is_some_and(|tc| t >= tc) {
            out.fill(C64::new(0.0, 0.0));
            return Ok(());
        }
        match &self.kind {
            InputKind::Zero => out.fill(C64::new(0.0, 0.0)),
            InputKind::Constant { value } => {
                for (o, &v) in out.iter_mut().zip(value) {
                    *o = C64::new(v, 0.0);
                }
            }
            InputKind::SeededWhiteNoise { .. } | InputKind::SpikyReference { .. } => {
                if t < self.t_start - SNAP_FRACTION * self.sample_dt
                    || t > self.t_end + SNAP_FRACTION * self.sample_dt
                {
                    return Err(SsmError::OutOfHorizon {
                        t,
                        start: self.t_start,
                        end: self.t_end,
                    });
                }
                let rows = self.samples.len() / self.dim;
                let idx = (((t - self.t_start) / self.sample_dt) + SNAP_FRACTION).floor().max(0.0) as usize;
                let idx = idx.min(rows - 1);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = C64::new(self.samples[idx * self.dim + k], 0.0);
                }
            }
            InputKind::CoupledToSelection => match sched.at(t)? {
                Selection::Value(x) => out.fill(C64::new(x, 0.0)),
                Selection::Mode(_) => {
                    return Err(SsmError::InvalidSchedule(
                        "coupled input needs a value-valued schedule".into(),
                    ))
                }
            },
        }
        Ok(())
    }
}

fn sample_count(t_start: f64, t_end: f64, dt: f64) -> usize {
    ((t_end - t_start) / dt - SNAP_FRACTION).ceil().max(0.0) as usize + 1
}

/// Shape parameters of the spiky reference signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikyParams {
    /// Dwell time of each step level, seconds.
    pub dwell: f64,
    pub impulse_amplitude: f64,
    /// Mean impulse rate, 1/s.
    pub impulse_rate: f64,
}

impl Default for SpikyParams {
    fn default() -> Self {
        Self {
            dwell: 1.0,
            impulse_amplitude: 5.0,
            impulse_rate: 0.5,
        }
    }
}

/// Steps in {−1, 0, +1} held for 1 s, overlaid with ±5 impulses one sample
/// wide at exponentially distributed arrival times (mean rate 0.5/s).
///
/// Returns one sample per grid node `t_start + i·dt`.
pub fn gen_spiky_reference(seed: u64, t_start: f64, t_end: f64, dt: f64) -> Vec<f64> {
    gen_spiky_reference_with(seed, t_start, t_end, dt, SpikyParams::default())
}

pub fn gen_spiky_reference_with(seed: u64, t_start: f64, t_end: f64, dt: f64, p: SpikyParams) -> Vec<f64> {
    assert!(dt > 0.0 && t_end > t_start, "spiky reference needs dt > 0 and a horizon");
    let n = sample_count(t_start, t_end, dt);

    // Separate streams: switching the impulses off leaves the steps untouched.
    let mut step_rng = ChaCha8Rng::seed_from_u64(seed);
    step_rng.set_stream(1);
    let mut impulse_rng = ChaCha8Rng::seed_from_u64(seed);
    impulse_rng.set_stream(2);

    let n_dwell = ((t_end - t_start) / p.dwell).ceil() as usize + 1;
    let levels: Vec<f64> = (0..n_dwell)
        .map(|_| f64::from(step_rng.random_range(-1i32..=1)))
        .collect();
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            levels[((t / p.dwell) + SNAP_FRACTION).floor() as usize]
        })
        .collect();

    if p.impulse_rate > 0.0 {
        let gap = Exp::new(p.impulse_rate).expect("positive rate");
        let mut t = gap.sample(&mut impulse_rng);
        while t < t_end - t_start {
            let idx = (t / dt).round() as usize;
            let sign = if impulse_rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if idx < n {
                out[idx] = sign * p.impulse_amplitude;
            }
            t += gap.sample(&mut impulse_rng);
        }
    }
    out
}

/// Sampled run of the system.
#[derive(Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub h: Vec<Vec<C64>>,
    /// Input held on the step starting at each node.
    pub u: Vec<Vec<C64>>,
    /// `C(t)h(t)` with the right-continuous `C`.
    pub y: Vec<Vec<C64>>,
    /// Base step size.
    pub dt: f64,
}

impl fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trajectory")
            .field("nodes", &self.grid.len())
            .field("span", &(self.grid.first(), self.grid.last()))
            .field("dt", &self.dt)
            .finish()
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.grid[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.grid.last().expect("non-empty trajectory")
    }

    pub fn state_norms(&self) -> Vec<f64> {
        self.h.iter().map(|h| vec_norm(h)).collect()
    }

    pub fn input_norms(&self) -> Vec<f64> {
        self.u.iter().map(|u| vec_norm(u)).collect()
    }

    /// Grid node nearest to `t` (ties resolve to the later node).
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = self.grid.partition_point(|&g| g < t);
        if i == 0 {
            0
        } else if i == self.grid.len() {
            i - 1
        } else if (self.grid[i] - t) <= (t - self.grid[i - 1]) {
            i
        } else {
            i - 1
        }
    }

    /// CSV with header `t,h_1..h_N,u_1..u_d,y_1..y_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let all_real = self
            .h
            .iter()
            .chain(&self.u)
            .chain(&self.y)
            .all(|row| row.iter().all(|z| z.im == 0.0));
        if !all_real {
            return Err(SsmError::ComplexExport);
        }
        let n = self.h.first().map_or(0, Vec::len);
        let d_in = self.u.first().map_or(0, Vec::len);
        let d_out = self.y.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("h_{i}")));
        header.extend((1..=d_in).map(|i| format!("u_{i}")));
        header.extend((1..=d_out).map(|i| format!("y_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![sig17(self.grid[i])];
            row.extend(self.h[i].iter().map(|z| sig17(z.re)));
            row.extend(self.u[i].iter().map(|z| sig17(z.re)));
            row.extend(self.y[i].iter().map(|z| sig17(z.re)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Uniform grid `t_start + i·dt` with `t_end` and every `extra` point in
/// `(t_start, t_end)` added exactly. Uniform nodes within a tiny fraction of
/// `dt` of an extra point are replaced by it.
pub fn build_grid(t_start: f64, t_end: f64, dt: f64, extra: &[f64]) -> Vec<f64> {
    let snap = SNAP_FRACTION * dt;
    let n = ((t_end - t_start) / dt + SNAP_FRACTION).floor() as usize;
    // (time, pinned)
    let mut pts: Vec<(f64, bool)> = (0..=n).map(|i| (t_start + i as f64 * dt, i == 0)).collect();
    pts.push((t_end, true));
    pts.extend(
        extra
            .iter()
            .filter(|&&e| e > t_start + snap && e < t_end - snap)
            .map(|&e| (e, true)),
    );
    pts.retain(|&(t, _)| t <= t_end + snap);
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut grid: Vec<(f64, bool)> = Vec::with_capacity(pts.len());
    for p in pts {
        match grid.last_mut() {
            Some(last) if p.0 - last.0 <= snap => {
                if p.1 && !last.1 {
                    *last = p;
                }
            }
            _ => grid.push(p),
        }
    }
    if let Some(last) = grid.last_mut() {
        last.0 = t_end;
    }
    grid.into_iter().map(|p| p.0).collect()
}

/// One grid node as seen by an integration observer.
pub struct NodeSample<'a> {
    pub index: usize,
    pub t: f64,
    pub h: &'a [C64],
    pub u: &'a [C64],
    pub y: &'a [C64],
}

fn validate_run(
    sys: &SelectiveSystem,
    sched: &Schedule,
    input: &InputSignal,
    h0: &[C64],
    dt: f64,
    horizon: (f64, f64),
) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SsmError::InvalidStep(dt));
    }
    if h0.len() != sys.state_dim() {
        return Err(SsmError::Dimension(format!(
            "h0 has length {}, state dimension is {}",
            h0.len(),
            sys.state_dim()
        )));
    }
    if input.dim() != sys.in_dim() {
        return Err(SsmError::Dimension(format!(
            "input width {} vs system input width {}",
            input.dim(),
            sys.in_dim()
        )));
    }
    let (t0, t1) = horizon;
    if !(t1 > t0) {
        return Err(SsmError::InvalidSchedule(format!("empty horizon [{t0}, {t1}]")));
    }
    sched.check_horizon(t0)?;
    sched.check_horizon(t1)?;
    Ok(())
}

/// Fixed-step RK4 integration calling `observe` at every grid node.
///
/// Fails with [`SsmError::Divergence`] (carrying an empty partial trajectory)
/// as soon as the state norm exceeds [`DIVERGENCE_NORM`].
pub fn integrate<F>(
    sys: &SelectiveSystem,
    sched: &Schedule,
    input: &InputSignal,
    h0: &[C64],
    dt: f64,
    horizon: (f64, f64),
    mut observe: F,
) -> Result<()>
where
    F: FnMut(&NodeSample<'_>),
{
    validate_run(sys, sched, input, h0, dt, horizon)?;
    let (t0, t1) = horizon;
    let mut extra: Vec<f64> = sched.breakpoints().to_vec();
    extra.extend(input.breakpoints());
    let grid = build_grid(t0, t1, dt, &extra);

    let seg_params: Vec<Params> = sched
        .values()
        .iter()
        .map(|&v| sys.params_at(v))
        .collect::<Result<_>>()?;

    let n = sys.state_dim();
    let mut h = h0.to_vec();
    let mut u = vec![C64::new(0.0, 0.0); sys.in_dim()];
    let mut y = vec![C64::new(0.0, 0.0); sys.out_dim()];
    let mut bu = vec![C64::new(0.0, 0.0); n];
    let mut k = [(); 4].map(|_| vec![C64::new(0.0, 0.0); n]);
    let mut stage = vec![C64::new(0.0, 0.0); n];

    for (i, &t) in grid.iter().enumerate() {
        let p = &seg_params[sched.segment_index(t)?];
        input.value_at(t, sched, &mut u)?;
        mul_vec_into(&p.c, &h, &mut y);
        observe(&NodeSample {
            index: i,
            t,
            h: &h,
            u: &u,
            y: &y,
        });
        let Some(&t_next) = grid.get(i + 1) else {
            break;
        };
        let step = t_next - t;
        mul_vec_into(&p.b, &u, &mut bu);

        let rhs = |x: &[C64], out: &mut [C64]| {
            mul_vec_into(&p.a, x, out);
            for (o, b) in out.iter_mut().zip(&bu) {
                *o += b;
            }
        };
        rhs(&h, &mut k[0]);
        for (s, (&hi, &ki)) in stage.iter_mut().zip(h.iter().zip(&k[0])) {
            *s = hi + ki * (0.5 * step);
        }
        rhs(&stage, &mut k[1]);
        for (s, (&hi, &ki)) in stage.iter_mut().zip(h.iter().zip(&k[1])) {
            *s = hi + ki * (0.5 * step);
        }
        rhs(&stage, &mut k[2]);
        for (s, (&hi, &ki)) in stage.iter_mut().zip(h.iter().zip(&k[2])) {
            *s = hi + ki * step;
        }
        rhs(&stage, &mut k[3]);
        for j in 0..n {
            h[j] += (k[0][j] + (k[1][j] + k[2][j]) * 2.0 + k[3][j]) * (step / 6.0);
        }

        let norm = vec_norm(&h);
        if !(norm <= DIVERGENCE_NORM) {
            return Err(SsmError::Divergence {
                t: t_next,
                partial: Box::new(Trajectory {
                    grid: Vec::new(),
                    h: Vec::new(),
                    u: Vec::new(),
                    y: Vec::new(),
                    dt,
                }),
            });
        }
    }
    Ok(())
}

/// Integrates the system and records every grid node.
///
/// On divergence the error carries the trajectory up to the last finite node.
pub fn simulate(
    sys: &SelectiveSystem,
    sched: &Schedule,
    input: &InputSignal,
    h0: &[C64],
    dt: f64,
    horizon: (f64, f64),
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        grid: Vec::new(),
        h: Vec::new(),
        u: Vec::new(),
        y: Vec::new(),
        dt,
    };
    let res = integrate(sys, sched, input, h0, dt, horizon, |s| {
        traj.grid.push(s.t);
        traj.h.push(s.h.to_vec());
        traj.u.push(s.u.to_vec());
        traj.y.push(s.y.to_vec());
    });
    match res {
        Ok(()) => Ok(traj),
        Err(SsmError::Divergence { t, .. }) => Err(SsmError::Divergence {
            t,
            partial: Box::new(traj),
        }),
        Err(e) => Err(e),
    }
}

/// Trapezoidal `∫ Re⟨u, y⟩ dτ` over the nodes nearest to the window ends.
pub fn supply_integral(traj: &Trajectory, window: (f64, f64)) -> f64 {
    if traj.is_empty() {
        return 0.0;
    }
    let i0 = traj.nearest_index(window.0);
    let i1 = traj.nearest_index(window.1);
    if i1 <= i0 {
        return 0.0;
    }
    let power = |i: usize| -> f64 {
        traj.u[i]
            .iter()
            .zip(&traj.y[i])
            .map(|(u, y)| (y.conj() * u).re)
            .sum()
    };
    (i0..i1)
        .map(|i| 0.5 * (power(i) + power(i + 1)) * (traj.grid[i + 1] - traj.grid[i]))
        .sum()
}

/// `V(t) = ½ h(t)ᴴ Q(t) h(t)` at every node.
pub fn energy_trace(traj: &Trajectory, storage: &StorageCertificate) -> Result<Vec<f64>> {
    for seg in storage.segments() {
        numlin::rank_with_tol(&seg.q, storage.rank_tol())
            .map_err(|e| SsmError::InvalidStorage(format!("segment at t = {}: {e}", seg.start)))?;
    }
    traj.grid
        .iter()
        .zip(&traj.h)
        .map(|(&t, h)| {
            let q = storage
                .q_at(t)
                .map_err(|e| SsmError::InvalidStorage(e.to_string()))?;
            let v = 0.5 * q.quadratic_form(h);
            if v < ENERGY_FLOOR {
                return Err(SsmError::InvalidStorage(format!("negative energy {v:e} at t = {t}")));
            }
            Ok(v)
        })
        .collect()
}
