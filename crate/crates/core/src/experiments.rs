//! The three reference studies: initializer energy landscapes, irreversible
//! forgetting under rank-deficient gating, and LMI-regularized training.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{
    self, assemble_lmi, build_report, decay_fit, lmi_violation, rank_profile, CertificateReport, CertifyError,
    DecayFit, RankProfile, StorageCertificate,
};
use crate::numlin::{
    cond_number, lambda_max, lambda_min, lyapunov_solve, real_vec, spectral_abscissa, vec_norm, DenseMatrix,
    HermitianMatrix, NumlinError, C64,
};
use crate::ssm::{
    self, gen_spiky_reference, integrate, simulate, Gate, InputSignal, Mode, Schedule, SelectiveSystem, Selection,
    SsmError, Trajectory,
};

/// Loss assigned to a training rollout that blows up.
pub const DIVERGED_LOSS: f64 = 1e6;
const MAX_RESAMPLES: usize = 100_000;
/// Off-diagonal shear of the realified HiPPO-style rotation blocks.
pub const HIPPO_SHEAR: f64 = 2.0;
/// Contraction rate checked on trained Exp. 3 models.
pub const CONTRACTION_DELTA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("hippo_like initializer needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("{kind:?} initializer found no admissible draw in {attempts} attempts")]
    Resample { kind: InitKind, attempts: usize },
    #[error("probe divergence: loss is {value} when perturbing coordinate {coordinate}")]
    ProbeDivergence { coordinate: usize, value: f64 },
    #[error("loss is not finite at the base point ({0})")]
    NonFiniteLoss(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numlin(#[from] NumlinError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Evenly spaced grid `min, …, max` with `points` entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        match self.points {
            0 => Vec::new(),
            1 => vec![self.min],
            n => (0..n)
                .map(|k| self.min + (self.max - self.min) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: -3.0,
            max: 3.0,
            points: 61,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    HippoLike,
    RandomStable,
    RandomUnstable,
}

impl InitKind {
    pub const ALL: [InitKind; 3] = [InitKind::HippoLike, InitKind::RandomStable, InitKind::RandomUnstable];

    pub fn name(self) -> &'static str {
        match self {
            InitKind::HippoLike => "hippo_like",
            InitKind::RandomStable => "random_stable",
            InitKind::RandomUnstable => "random_unstable",
        }
    }

    fn stream(self) -> u64 {
        match self {
            InitKind::HippoLike => 11,
            InitKind::RandomStable => 12,
            InitKind::RandomUnstable => 13,
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, n, n, 1.0).qr();
    let r = qr.r();
    let mut q = qr.q();
    // sign fix so the draw is Haar distributed
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn to_dense(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| C64::new(m[(i, j)], 0.0))
}

/// Mirrors every eigenvalue with positive real part across the imaginary
/// axis, keeping the eigenvectors: `V·diag(λ')·V⁻¹`.
///
/// Returns `None` when the eigenvector basis is numerically singular.
fn reflect_unstable(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let ac = a.map(|v| C64::new(v, 0.0));
    let lambdas = a.complex_eigenvalues();
    let mut vecs = DMatrix::<C64>::zeros(n, n);
    for (j, &l) in lambdas.iter().enumerate() {
        let shifted = &ac - DMatrix::<C64>::identity(n, n) * l;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let k = svd.singular_values.argmin().0;
        for i in 0..n {
            vecs[(i, j)] = v_t[(k, i)].conj();
        }
    }
    let inv = vecs.clone().try_inverse()?;
    let mirrored = DMatrix::<C64>::from_diagonal(&lambdas.map(|l| if l.re > 0.0 { -l.conj() } else { l }));
    let r = &vecs * mirrored * inv;
    let scale = r.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
    if r.iter().any(|z| !(z.im.abs() <= 1e-8 * scale)) {
        return None;
    }
    Some(r.map(|z| z.re))
}

/// Builds a seeded `N×N` state matrix of the requested family.
///
/// * `hippo_like`: pairs `a_k ± iπk` with `a_k` evenly spaced on
///   `[−0.5, −0.1]`, realified as sheared rotation blocks and conjugated by
///   a random orthogonal matrix.
/// * `random_stable`: Gaussian entries scaled `1/√N`, unstable eigenvalues
///   reflected, resampled until the rightmost real part is in `[−0.8, −0.3]`.
/// * `random_unstable`: same sampling without reflection, resampled until
///   the rightmost real part is in `[0.3, 1.2]`.
pub fn build_initializer(kind: InitKind, n: usize, seed: u64) -> Result<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.stream());
    match kind {
        InitKind::HippoLike => {
            if n % 2 != 0 || n == 0 {
                return Err(ExperimentError::OddDimension(n));
            }
            let pairs = n / 2;
            let mut block = DMatrix::<f64>::zeros(n, n);
            for k in 0..pairs {
                let re = if pairs == 1 {
                    -0.1
                } else {
                    -0.1 - 0.4 * k as f64 / (pairs - 1) as f64
                };
                let im = std::f64::consts::PI * (k + 1) as f64;
                let o = 2 * k;
                block[(o, o)] = re;
                block[(o + 1, o + 1)] = re;
                block[(o, o + 1)] = HIPPO_SHEAR * im;
                block[(o + 1, o)] = -im / HIPPO_SHEAR;
            }
            let v = random_orthogonal(&mut rng, n);
            Ok(to_dense(&(&v * block * v.transpose())))
        }
        InitKind::RandomStable | InitKind::RandomUnstable => {
            let scale = 1.0 / (n as f64).sqrt();
            let band = if kind == InitKind::RandomStable {
                (-0.8, -0.3)
            } else {
                (0.3, 1.2)
            };
            for _ in 0..MAX_RESAMPLES {
                let mut g = gaussian_matrix(&mut rng, n, n, scale);
                if kind == InitKind::RandomStable {
                    match reflect_unstable(&g) {
                        Some(r) => g = r,
                        None => continue,
                    }
                }
                let a = to_dense(&g);
                let rightmost = spectral_abscissa(&a)?;
                if rightmost >= band.0 && rightmost <= band.1 {
                    return Ok(a);
                }
            }
            Err(ExperimentError::Resample {
                kind,
                attempts: MAX_RESAMPLES,
            })
        }
    }
}

/// Sampled traces kept for artifact export.
#[derive(Clone, Debug, Default)]
pub struct Traces {
    pub t: Vec<f64>,
    pub norm: Vec<f64>,
    /// `½ hᵀQ₀h`, absent when no Lyapunov solution exists.
    pub energy: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Exp1Condition {
    pub kind: InitKind,
    pub a: Vec<Vec<f64>>,
    pub rightmost_real: f64,
    pub lyapunov_solved: bool,
    pub lyapunov_error: Option<String>,
    pub q_min_eigenvalue: Option<f64>,
    pub q_max_eigenvalue: Option<f64>,
    pub q_positive_definite: bool,
    pub cond_number: Option<f64>,
    /// Numerical blow-up (`‖h‖ > 1e12`) or growth of `‖h‖` over the
    /// free-decay phase.
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    pub decay_fit: Option<DecayFit>,
    /// `−d ln V / dt` over the fit window.
    pub energy_decay_rate: Option<f64>,
    /// Time after the cutoff until `‖h‖` stays below 1% of its cutoff value.
    pub two_decade_time: Option<f64>,
    /// The two-decade level was not reached before the horizon; the reported
    /// time is then the remaining horizon, a lower bound.
    pub two_decade_censored: bool,
    /// Same measurement on `V = ½hᵀQ₀h` instead of `‖h‖`.
    pub energy_two_decade_time: Option<f64>,
    pub energy_two_decade_censored: bool,
    #[serde(skip)]
    pub traces: Traces,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Exp1Config {
    pub seed: u64,
    pub dim: usize,
    pub dt: f64,
    pub horizon: f64,
    pub input_cutoff: f64,
    pub noise_amplitude: f64,
    pub noise_sample_dt: f64,
    pub fit_start: f64,
    /// Every `trace_stride`-th node is kept in the exported traces.
    pub trace_stride: usize,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 8,
            dt: ssm::DEFAULT_DT,
            horizon: 40.0,
            input_cutoff: 5.0,
            noise_amplitude: 1.0,
            noise_sample_dt: 1e-2,
            fit_start: 7.0,
            trace_stride: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Exp1Report {
    pub config: Exp1Config,
    pub conditions: Vec<Exp1Condition>,
    /// Two-decade norm decay time of random_stable over hippo_like.
    pub decay_time_ratio: Option<f64>,
    /// True when the hippo_like time is censored, making the ratio an upper bound.
    pub decay_time_ratio_is_upper_bound: bool,
    /// Two-decade energy decay time of random_stable over hippo_like.
    pub energy_decay_time_ratio: Option<f64>,
    pub energy_decay_time_ratio_is_upper_bound: bool,
}

fn two_decade_time(t: &[f64], norms: &[f64], cutoff: f64) -> (Option<f64>, bool) {
    let Some(ic) = t.iter().position(|&s| s >= cutoff) else {
        return (None, false);
    };
    let level = 0.01 * norms[ic];
    match (ic..t.len()).rev().find(|&i| norms[i] > level) {
        None => (Some(0.0), false),
        Some(i) if i + 1 < t.len() => (Some(t[i + 1] - cutoff), false),
        Some(_) => (Some(t[t.len() - 1] - cutoff), true),
    }
}

/// Energy-landscape comparison of the three initializers on an 8-D
/// frozen-selection system driven by white noise until the cutoff.
pub fn run_experiment1(cfg: &Exp1Config) -> Result<Exp1Report> {
    if !(cfg.dt > 0.0 && cfg.horizon > cfg.fit_start && cfg.fit_start >= cfg.input_cutoff && cfg.trace_stride > 0) {
        return Err(ExperimentError::InvalidConfig(format!("{cfg:?}")));
    }
    let n = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(14);
    let b = to_dense(&gaussian_matrix(&mut rng, n, 1, 1.0 / (n as f64).sqrt()));
    let c = b.transpose();
    let w = HermitianMatrix::identity(n);

    let mut conditions = Vec::new();
    for kind in InitKind::ALL {
        let a = build_initializer(kind, n, cfg.seed)?;
        let rightmost_real = spectral_abscissa(&a)?;
        let (q, lyapunov_error) = match lyapunov_solve(&a, &w) {
            Ok(q) => (Some(q), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let q_min = q.as_ref().map(lambda_min);
        let q_max = q.as_ref().map(lambda_max);
        let q_pd = q_min.is_some_and(|m| m > 0.0);
        let cond = match &q {
            Some(q) if q_pd => Some(cond_number(q)?),
            _ => None,
        };

        let sys = SelectiveSystem::lti(a.clone(), b.clone(), c.clone())?;
        let sched = Schedule::constant(0.0, cfg.horizon, Selection::Mode(0))?;
        let input = InputSignal::white_noise(cfg.noise_amplitude, cfg.seed, cfg.noise_sample_dt, 1, 0.0, cfg.horizon)
            .with_cutoff(cfg.input_cutoff);
        let h0 = vec![C64::new(0.0, 0.0); n];
        let (traj, divergence_time) = match simulate(&sys, &sched, &input, &h0, cfg.dt, (0.0, cfg.horizon)) {
            Ok(tr) => (tr, None),
            Err(SsmError::Divergence { t, partial }) => (*partial, Some(t)),
            Err(e) => return Err(e.into()),
        };
        let norms = traj.state_norms();
        let energies: Option<Vec<f64>> = q.as_ref().map(|q| traj.h.iter().map(|h| 0.5 * q.quadratic_form(h)).collect());

        let ic = traj.nearest_index(cfg.input_cutoff);
        let grew = norms.last().copied().unwrap_or(f64::INFINITY) > norms[ic];
        let diverged = divergence_time.is_some() || grew;

        let fit_window = (cfg.fit_start, cfg.horizon);
        let (energy_time, energy_censored) = match (&energies, q_pd && !diverged) {
            (Some(v), true) => two_decade_time(&traj.grid, v, cfg.input_cutoff),
            _ => (None, false),
        };
        let (fit, energy_rate, decay_time, censored) = if diverged {
            (None, None, None, false)
        } else {
            let fit = decay_fit(&traj.grid, &norms, fit_window).ok();
            let energy_rate = match (&energies, q_pd) {
                (Some(v), true) => decay_fit(&traj.grid, v, fit_window).ok().map(|f| f.gamma_fit),
                _ => None,
            };
            let (time, censored) = two_decade_time(&traj.grid, &norms, cfg.input_cutoff);
            (fit, energy_rate, time, censored)
        };

        let keep = |i: &usize| i % cfg.trace_stride == 0 || *i + 1 == traj.len();
        let pick = |v: &[f64]| -> Vec<f64> { (0..v.len()).filter(keep).map(|i| v[i]).collect() };
        conditions.push(Exp1Condition {
            kind,
            a: a.real_rows(),
            rightmost_real,
            lyapunov_solved: q.is_some(),
            lyapunov_error,
            q_min_eigenvalue: q_min,
            q_max_eigenvalue: q_max,
            q_positive_definite: q_pd,
            cond_number: cond,
            diverged,
            divergence_time,
            decay_fit: fit,
            energy_decay_rate: energy_rate,
            two_decade_time: decay_time,
            two_decade_censored: censored,
            energy_two_decade_time: energy_time,
            energy_two_decade_censored: energy_censored,
            traces: Traces {
                t: pick(&traj.grid),
                norm: pick(&norms),
                energy: energies.as_deref().map(pick),
            },
        });
    }

    let hippo = &conditions[0];
    let stable = &conditions[1];
    let ratio = |s: Option<f64>, h: Option<f64>| match (s, h) {
        (Some(s), Some(h)) if h > 0.0 => Some(s / h),
        _ => None,
    };
    let decay_time_ratio = ratio(stable.two_decade_time, hippo.two_decade_time);
    let energy_decay_time_ratio = ratio(stable.energy_two_decade_time, hippo.energy_two_decade_time);
    Ok(Exp1Report {
        config: cfg.clone(),
        energy_decay_time_ratio,
        energy_decay_time_ratio_is_upper_bound: hippo.energy_two_decade_censored,
        decay_time_ratio_is_upper_bound: hippo.two_decade_censored,
        decay_time_ratio,
        conditions,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Exp2Config {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub trace_stride: usize,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            seed: 7,
            dt: ssm::DEFAULT_DT,
            horizon: 15.0,
            trace_stride: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Exp2Report {
    pub config: Exp2Config,
    pub h0: Vec<f64>,
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub honest: RankProfile,
    pub violating: RankProfile,
    pub max_abs_h3_after_6: f64,
    pub abs_h3_at_10: f64,
    pub abs_h3_final: f64,
    pub honest_certificate: CertificateReport,
    pub violating_certificate: CertificateReport,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

/// The two modes: full-rank storage and rank-deficient storage.
pub fn exp2_modes() -> [Mode; 2] {
    [
        Mode {
            a: DenseMatrix::from_real_diag(&[-0.2, -0.3, -0.4]),
            b: DenseMatrix::zeros(3, 3),
            c: DenseMatrix::identity(3),
        },
        Mode {
            a: DenseMatrix::from_real_diag(&[-0.2, -0.3, -15.0]),
            b: DenseMatrix::zeros(3, 3),
            c: DenseMatrix::from_real_diag(&[1.0, 1.0, 0.0]),
        },
    ]
}

/// Seeded initial state with entries `±1`.
pub fn exp2_initial_state(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    (0..3).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Irreversible forgetting: modes 1, 2, 1 on `[0, 5)`, `[5, 10)`, `[10, T]`.
pub fn run_experiment2(cfg: &Exp2Config) -> Result<Exp2Report> {
    if !(cfg.horizon > 10.0 && cfg.dt > 0.0 && cfg.trace_stride > 0) {
        return Err(ExperimentError::InvalidConfig(format!("{cfg:?}")));
    }
    let modes = exp2_modes();
    let storage: Vec<HermitianMatrix> = modes
        .iter()
        .map(|m| {
            let ctc = HermitianMatrix::symmetrize(&m.c.adjoint().matmul(&m.c)?)?;
            lyapunov_solve(&m.a, &ctc)
        })
        .collect::<std::result::Result<_, _>>()?;
    let (q1, q2) = (storage[0].clone(), storage[1].clone());

    let sys = SelectiveSystem::mode_switched(modes.to_vec())?;
    let sched = Schedule::new(
        0.0,
        cfg.horizon,
        vec![5.0, 10.0],
        vec![Selection::Mode(0), Selection::Mode(1), Selection::Mode(0)],
    )?;
    let h0 = exp2_initial_state(cfg.seed);
    let traj = simulate(&sys, &sched, &InputSignal::zero(3), &real_vec(&h0), cfg.dt, (0.0, cfg.horizon))?;

    let edges = [0.0, 5.0, 10.0, cfg.horizon];
    let honest = StorageCertificate::piecewise(&edges, vec![q1.clone(), q2.clone(), q2.clone()], 0.0)?;
    let violating = StorageCertificate::piecewise(&edges, vec![q1.clone(), q2.clone(), q1.clone()], 0.0)?;

    let h3: Vec<f64> = traj.h.iter().map(|h| h[2].norm()).collect();
    let after = |t0: f64| {
        traj.grid
            .iter()
            .zip(&h3)
            .filter(|(&t, _)| t >= t0)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max)
    };
    let x_grid: Vec<f64> = Vec::new();
    Ok(Exp2Report {
        config: cfg.clone(),
        q1: q1.as_matrix().real_rows(),
        q2: q2.as_matrix().real_rows(),
        honest: rank_profile(&honest)?,
        violating: rank_profile(&violating)?,
        max_abs_h3_after_6: after(6.0),
        abs_h3_at_10: h3[traj.nearest_index(10.0)],
        abs_h3_final: *h3.last().expect("non-empty trajectory"),
        honest_certificate: build_report(&sys, &sched, &traj, &honest, &x_grid, None)?,
        violating_certificate: build_report(&sys, &sched, &traj, &violating, &x_grid, None)?,
        h0,
        trajectory: traj,
    })
}

/// Central-difference gradient with per-coordinate step
/// `fd_step·max(1, |p_i|)`.
pub fn fd_gradient(loss: impl Fn(&[f64]) -> f64, params: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) {
        return Err(ExperimentError::InvalidConfig(format!("fd_step = {fd_step}")));
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(ExperimentError::NonFiniteLoss(base));
    }
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let h = fd_step * params[i].abs().max(1.0);
            p[i] = params[i] + h;
            let up = loss(&p);
            p[i] = params[i] - h;
            let down = loss(&p);
            p[i] = params[i];
            for v in [up, down] {
                if !v.is_finite() {
                    return Err(ExperimentError::ProbeDivergence { coordinate: i, value: v });
                }
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// `A(x) = A_base + tanh(x)·A_sel` with learned `B`, `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableModel {
    pub a_base: Vec<Vec<f64>>,
    pub a_sel: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl TrainableModel {
    /// Gaussian entries of standard deviation 0.1.
    pub fn seeded(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(31);
        let mut draw = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            0.1 * z
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            a_base: draw(n, n),
            a_sel: draw(n, n),
            b: draw(n, d),
            c: draw(d, n),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_base.len()
    }

    pub fn in_dim(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.a_base, &self.a_sel, &self.b, &self.c]
            .into_iter()
            .flat_map(|m| m.iter().flatten().copied())
            .collect()
    }

    /// Same shapes as `self`, entries from `p` in [`Self::to_vec`] order.
    pub fn with_vec(&self, p: &[f64]) -> Self {
        let mut it = p.iter().copied();
        let mut fill = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.iter()
                .map(|row| row.iter().map(|_| it.next().expect("parameter count")).collect())
                .collect()
        };
        Self {
            a_base: fill(&self.a_base),
            a_sel: fill(&self.a_sel),
            b: fill(&self.b),
            c: fill(&self.c),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn system(&self) -> Result<SelectiveSystem> {
        Ok(SelectiveSystem::affine_gated(
            DenseMatrix::from_real_rows(&self.a_base),
            DenseMatrix::from_real_rows(&self.a_sel),
            DenseMatrix::from_real_rows(&self.b),
            DenseMatrix::from_real_rows(&self.c),
            Gate::Tanh,
        )?)
    }

    /// `max_x max(0, λ_max(L(x)))` with `Q = I`, `Q̇ = 0`, `β = 0`.
    pub fn lmi_penalty(&self, x_grid: &[f64]) -> Result<f64> {
        let sys = self.system()?;
        let n = self.state_dim();
        let q = HermitianMatrix::identity(n);
        let qdot = HermitianMatrix::zeros(n);
        let mut worst: f64 = 0.0;
        for &x in x_grid {
            let p = sys.params_at(Selection::Value(x))?;
            worst = worst.max(lmi_violation(&assemble_lmi(&q, &qdot, &p.a, &p.b, &p.c, 0.0)?));
        }
        Ok(worst)
    }
}

/// Update rule applied to the finite-difference gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `p ← p − lr·g`.
    Gd,
    /// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub lr: f64,
    pub iters: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub x_grid: GridSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            gamma: 0.01,
            lr: 1e-2,
            iters: 500,
            fd_step: 1e-4,
            seed: 7,
            dt: ssm::DEFAULT_DT,
            horizon: 20.0,
            x_grid: GridSpec::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.lr > 0.0
            && self.fd_step > 0.0
            && self.dt > 0.0
            && self.horizon > self.dt
            && self.x_grid.points > 0;
        if ok {
            Ok(())
        } else {
            Err(ExperimentError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Scalar tracking task with `u ≡ x ≡ r`.
#[derive(Clone, Debug)]
pub struct TrackingTask {
    sched: Schedule,
    horizon: f64,
    dt: f64,
}

impl TrackingTask {
    pub fn new(seed: u64, dt: f64, horizon: f64) -> Result<Self> {
        let r = gen_spiky_reference(seed, 0.0, horizon, dt);
        Ok(Self {
            sched: Schedule::from_samples(0.0, horizon, dt, &r)?,
            horizon,
            dt,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.sched
    }

    /// Rolls the model out from rest.
    pub fn rollout(&self, model: &TrainableModel) -> Result<Rollout> {
        let sys = model.system()?;
        let h0 = vec![C64::new(0.0, 0.0); model.state_dim()];
        let input = InputSignal::coupled_to_selection(model.in_dim());
        let mut sq_err = 0.0;
        let mut nodes = 0usize;
        let mut max_norm: f64 = 0.0;
        let res = integrate(&sys, &self.sched, &input, &h0, self.dt, (0.0, self.horizon), |s| {
            sq_err += (s.y[0].re - s.u[0].re).powi(2);
            nodes += 1;
            max_norm = max_norm.max(vec_norm(s.h));
        });
        match res {
            Ok(()) => Ok(Rollout {
                mse: sq_err / nodes as f64,
                max_state_norm: max_norm,
                diverged: false,
            }),
            Err(SsmError::Divergence { .. }) => Ok(Rollout {
                mse: f64::INFINITY,
                max_state_norm: f64::INFINITY,
                diverged: true,
            }),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Rollout {
    pub mse: f64,
    pub max_state_norm: f64,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrainStep {
    pub iter: usize,
    pub task_loss: f64,
    pub lmi_penalty: f64,
    pub total_loss: f64,
    pub max_state_norm: f64,
    pub diverged: bool,
}

fn total_loss(task: &TrackingTask, model: &TrainableModel, gamma: f64, x_grid: &[f64]) -> Result<(f64, TrainStep)> {
    let roll = task.rollout(model)?;
    let task_loss = if roll.diverged { DIVERGED_LOSS } else { roll.mse.min(DIVERGED_LOSS) };
    let lmi = model.lmi_penalty(x_grid)?;
    let total = task_loss + gamma * lmi;
    Ok((
        total,
        TrainStep {
            iter: 0,
            task_loss,
            lmi_penalty: lmi,
            total_loss: total,
            max_state_norm: roll.max_state_norm,
            diverged: roll.diverged,
        },
    ))
}

/// Full-batch gradient descent on `L_task + γ·L_LMI` with finite-difference
/// gradients. The history has `iters + 1` entries; the last one describes
/// the returned model.
pub fn train(model: &TrainableModel, cfg: &TrainConfig) -> Result<(TrainableModel, Vec<TrainStep>)> {
    cfg.validate()?;
    if !model.is_finite() {
        return Err(ExperimentError::InvalidConfig("non-finite initial model".into()));
    }
    let task = TrackingTask::new(cfg.seed, cfg.dt, cfg.horizon)?;
    let x_grid = cfg.x_grid.values();
    let mut params = model.to_vec();
    let mut history = Vec::with_capacity(cfg.iters + 1);
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let loss = |p: &[f64]| -> f64 {
        total_loss(&task, &model.with_vec(p), cfg.gamma, &x_grid).map_or(f64::NAN, |(l, _)| l)
    };
    for iter in 0..=cfg.iters {
        let (_, mut step) = total_loss(&task, &model.with_vec(&params), cfg.gamma, &x_grid)?;
        step.iter = iter;
        history.push(step);
        if iter == cfg.iters {
            break;
        }
        let grad = fd_gradient(loss, &params, cfg.fd_step)?;
        match cfg.optimizer {
            Optimizer::Gd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.lr * g;
                }
            }
            Optimizer::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let k = (iter + 1) as i32;
                for i in 0..params.len() {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                    m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mh = m1[i] / (1.0 - b1.powi(k));
                    let vh = m2[i] / (1.0 - b2.powi(k));
                    params[i] -= cfg.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok((model.with_vec(&params), history))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConditionMetrics {
    pub task_mse_test: f64,
    pub max_state_norm: f64,
    pub max_lmi_violation: f64,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsTable {
    pub baseline: ConditionMetrics,
    pub regularized: ConditionMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Exp3Config {
    pub train: TrainConfig,
    pub eval_seed: u64,
    pub eval_dt: f64,
    pub eval_horizon: f64,
}

impl Default for Exp3Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval_seed: 8,
            eval_dt: ssm::DEFAULT_DT,
            eval_horizon: 20.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Exp3Condition {
    pub gamma: f64,
    pub model: TrainableModel,
    pub metrics: ConditionMetrics,
    /// `max_x λ_max(QA(x) + A(x)ᵀQ + 2δQ)` with `Q = I`, `δ = 0.05`.
    pub contraction_excess: f64,
    pub history: Vec<TrainStep>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Exp3Report {
    pub config: Exp3Config,
    pub initial_model: TrainableModel,
    pub table: MetricsTable,
    pub baseline: Exp3Condition,
    pub regularized: Exp3Condition,
}

/// Test-set metrics of a trained model on a held-out spiky reference.
pub fn evaluate(model: &TrainableModel, eval_seed: u64, dt: f64, horizon: f64, x_grid: &[f64]) -> Result<ConditionMetrics> {
    let roll = TrackingTask::new(eval_seed, dt, horizon)?.rollout(model)?;
    Ok(ConditionMetrics {
        task_mse_test: roll.mse,
        max_state_norm: roll.max_state_norm,
        max_lmi_violation: model.lmi_penalty(x_grid)?,
        diverged: roll.diverged,
    })
}

fn train_condition(init: &TrainableModel, cfg: &Exp3Config, gamma: f64) -> Result<Exp3Condition> {
    let train_cfg = TrainConfig {
        gamma,
        ..cfg.train.clone()
    };
    let (model, history) = train(init, &train_cfg)?;
    let metrics = evaluate(&model, cfg.eval_seed, cfg.eval_dt, cfg.eval_horizon, &cfg.train.x_grid.values())?;
    let a_list = cfg
        .train
        .x_grid
        .values()
        .into_iter()
        .map(|x| model.system()?.params_at(Selection::Value(x)).map(|p| p.a).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let n = model.state_dim();
    let contraction_excess = certify::uniform_contraction_check(
        &HermitianMatrix::identity(n),
        &HermitianMatrix::zeros(n),
        &a_list,
        CONTRACTION_DELTA,
    )?;
    Ok(Exp3Condition {
        gamma,
        model,
        metrics,
        contraction_excess,
        history,
    })
}

/// Baseline (`γ = 0`) and regularized (`γ = cfg.train.gamma`) training from
/// the same initialization; the two runs are independent and run in parallel.
pub fn run_experiment3(cfg: &Exp3Config) -> Result<Exp3Report> {
    cfg.train.validate()?;
    let init = TrainableModel::seeded(2, 1, cfg.train.seed);
    let (baseline, regularized) = std::thread::scope(|s| {
        let base = s.spawn(|| train_condition(&init, cfg, 0.0));
        let reg = train_condition(&init, cfg, cfg.train.gamma);
        (base.join().expect("baseline training thread"), reg)
    });
    let (baseline, regularized) = (baseline?, regularized?);
    Ok(Exp3Report {
        config: cfg.clone(),
        initial_model: init,
        table: MetricsTable {
            baseline: baseline.metrics,
            regularized: regularized.metrics,
        },
        baseline,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::eigenvalues;

    #[test]
    fn grid_spec_values() {
        let g = GridSpec::default().values();
        assert_eq!(g.len(), 61);
        assert_eq!(g[0], -3.0);
        assert_eq!(g[60], 3.0);
        assert!((g[30]).abs() < 1e-15);
    }

    #[test]
    fn hippo_spectrum_matches_prescription() {
        let a = build_initializer(InitKind::HippoLike, 8, 3).unwrap();
        assert!(a.is_real());
        let mut ev = eigenvalues(&a).unwrap();
        ev.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        let mut want = Vec::new();
        for k in 0..4 {
            let re = -0.1 - 0.4 * k as f64 / 3.0;
            let im = std::f64::consts::PI * (k + 1) as f64;
            want.push(C64::new(re, im));
            want.push(C64::new(re, -im));
        }
        want.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        for (g, w) in ev.iter().zip(&want) {
            assert!((g - w).norm() < 1e-8, "{g} vs {w}");
        }
        assert!(matches!(build_initializer(InitKind::HippoLike, 7, 3), Err(ExperimentError::OddDimension(7))));
    }

    #[test]
    fn random_initializers_land_in_band_and_are_deterministic() {
        for seed in 0..5 {
            let s = build_initializer(InitKind::RandomStable, 8, seed).unwrap();
            let r = spectral_abscissa(&s).unwrap();
            assert!((-0.8..=-0.3).contains(&r), "{r}");
            let u = build_initializer(InitKind::RandomUnstable, 8, seed).unwrap();
            let r = spectral_abscissa(&u).unwrap();
            assert!((0.3..=1.2).contains(&r), "{r}");
            assert_eq!(s, build_initializer(InitKind::RandomStable, 8, seed).unwrap());
        }
    }

    #[test]
    fn reflection_keeps_stable_part() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.2]);
        let r = reflect_unstable(&a).unwrap();
        let mut d: Vec<f64> = r.symmetric_eigenvalues().iter().copied().collect();
        d.sort_by(f64::total_cmp);
        assert!((d[0] + 0.5).abs() < 1e-12 && (d[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn two_decade_time_cases() {
        let t: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let decay: Vec<f64> = t.iter().map(|&s| if s < 1.0 { 1.0 } else { (-(s - 1.0)).exp() }).collect();
        let (time, censored) = two_decade_time(&t, &decay, 1.0);
        assert!(!censored);
        // ln 100 ≈ 4.605, first node after the last exceedance
        assert!((time.unwrap() - 4.7).abs() < 1e-9);
        let slow: Vec<f64> = t.iter().map(|&s| (-0.01 * s).exp()).collect();
        assert_eq!(two_decade_time(&t, &slow, 1.0), (Some(9.0), true));
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = fd_gradient(|_| 3.0, &[1.0, -5.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);

        // quadratic form ½pᵀMp + cᵀp, gradient Mp + c
        let m = [[3.0, 1.0, 0.5], [1.0, 2.0, -0.3], [0.5, -0.3, 4.0]];
        let c = [0.2, -1.0, 0.7];
        let loss = |p: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                s += c[i] * p[i];
                for j in 0..3 {
                    s += 0.5 * p[i] * m[i][j] * p[j];
                }
            }
            s
        };
        let p = [0.3, -2.0, 5.0];
        let g = fd_gradient(loss, &p, 1e-4).unwrap();
        for i in 0..3 {
            let want: f64 = c[i] + (0..3).map(|j| m[i][j] * p[j]).sum::<f64>();
            assert!((g[i] - want).abs() <= 1e-5);
        }

        let err = fd_gradient(|p| if p[1] > 0.0 { f64::NAN } else { 1.0 }, &[0.0, 0.0], 1e-4).unwrap_err();
        assert!(matches!(err, ExperimentError::ProbeDivergence { coordinate: 1, .. }));
        assert!(matches!(fd_gradient(|_| f64::INFINITY, &[0.0], 1e-4), Err(ExperimentError::NonFiniteLoss(_))));
    }

    #[test]
    fn model_vector_round_trip_and_penalty() {
        let m = TrainableModel::seeded(2, 1, 7);
        let v = m.to_vec();
        assert_eq!(v.len(), 12);
        assert_eq!(m.with_vec(&v), m);

        let passive = TrainableModel {
            a_base: vec![vec![-2.0, 0.0], vec![0.0, -2.0]],
            a_sel: vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
            b: vec![vec![0.5], vec![0.1]],
            c: vec![vec![0.5, 0.1]],
        };
        assert_eq!(passive.lmi_penalty(&GridSpec::default().values()).unwrap(), 0.0);
        let mismatched = TrainableModel {
            c: vec![vec![0.0, 0.1]],
            ..passive
        };
        assert!(mismatched.lmi_penalty(&GridSpec::default().values()).unwrap() > 0.0);
    }

    #[test]
    fn short_training_is_deterministic_and_gamma_zero_ignores_penalty() {
        let cfg = TrainConfig {
            iters: 3,
            dt: 1e-2,
            horizon: 4.0,
            gamma: 0.0,
            ..TrainConfig::default()
        };
        let init = TrainableModel::seeded(2, 1, 7);
        let (m1, h1) = train(&init, &cfg).unwrap();
        let (m2, h2) = train(&init, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 4);
        assert!(h1.iter().zip(&h2).all(|(a, b)| a.total_loss.to_bits() == b.total_loss.to_bits()));
        assert!(h1.iter().all(|s| s.total_loss == s.task_loss));
    }

    #[test]
    fn experiment2_closed_forms() {
        let r = run_experiment2(&Exp2Config::default()).unwrap();
        let want1 = [2.5, 5.0 / 3.0, 1.25];
        let want2 = [2.5, 5.0 / 3.0, 0.0];
        for i in 0..3 {
            for j in 0..3 {
                let (w1, w2) = if i == j { (want1[i], want2[i]) } else { (0.0, 0.0) };
                assert!((r.q1[i][j] - w1).abs() < 1e-10);
                assert!((r.q2[i][j] - w2).abs() < 1e-10);
            }
        }
        assert_eq!(r.honest.ranks, vec![3, 2, 2]);
        assert!(r.honest.monotone_nonincreasing && r.honest.jump_loewner_ok);
        assert_eq!(r.violating.ranks, vec![3, 2, 3]);
        assert!(!r.violating.monotone_nonincreasing && !r.violating.jump_loewner_ok);
        assert!(r.max_abs_h3_after_6 < 1e-6);
        assert!(r.violating_certificate.dissipation.iter().any(|d| d.residual.is_none()));
        assert!(r.honest_certificate.dissipation.iter().all(|d| d.residual.is_some()));
    }
}
