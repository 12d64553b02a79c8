//! Energy certificates evaluated along simulated trajectories and over
//! selection grids.
//!
//! Storage matrices are piecewise constant in time (`Q̇ = 0` inside each
//! segment). Regularity of `Q(·)` is checked at the jumps only: the rank may
//! not increase and every jump must be non-increasing in the Loewner order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numlin::{
    self, lambda_max, lambda_min, loewner_gap, rank_with_tol, sym_eigen, vec_norm, DenseMatrix,
    HermitianMatrix, NumlinError, C64, DEFAULT_RANK_TOL,
};
use crate::ssm::{self, Schedule, SelectiveSystem, Selection, SsmError, Trajectory};

/// Loewner tolerance applied at storage jumps.
pub const JUMP_TOL: f64 = 1e-9;
/// Pass threshold for kernel and contraction residuals.
pub const KERNEL_TOL: f64 = 1e-8;
pub const CONTRACTION_TOL: f64 = 1e-8;
/// ISS margins above this (negative) value pass.
pub const ISS_MARGIN_TOL: f64 = -1e-6;
/// Relative floor below which an LMI eigenvalue counts as zero.
const LMI_ROUNDOFF: f64 = 1e-12;
/// Shortest dyadic window used by default.
pub const MIN_DYADIC_WINDOW: f64 = 0.25;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("invalid jump at t = {t}: λ_min(Q(t−) − Q(t+)) = {gap:.3e}, storage would inject energy")]
    InvalidJump { t: f64, gap: f64 },
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-positive norm at t = {t}: underflow, shrink window")]
    Underflow { t: f64 },
    #[error("decay fit needs at least two samples in the window")]
    TooFewSamples,
    #[error("k1 bound violated: storage not positive definite (λ_min = {min_eigenvalue:.3e})")]
    K1Violated { min_eigenvalue: f64 },
    #[error("invalid constant: {0}")]
    InvalidConstant(String),
    #[error(transparent)]
    Numlin(#[from] NumlinError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
}

pub type Result<T> = std::result::Result<T, CertifyError>;

#[derive(Clone, Debug)]
pub struct StorageSegment {
    pub start: f64,
    pub end: f64,
    pub q: HermitianMatrix,
}

/// Piecewise-constant quadratic storage `V = ½ hᴴ Q(t) h` with dissipation
/// rate `beta`.
#[derive(Clone, Debug)]
pub struct StorageCertificate {
    segments: Vec<StorageSegment>,
    beta: f64,
    rank_tol: f64,
}

impl StorageCertificate {
    pub fn new(segments: Vec<StorageSegment>, beta: f64, rank_tol: f64) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| CertifyError::InvalidCertificate("no segments".into()))?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(CertifyError::InvalidCertificate(format!("beta = {beta}")));
        }
        if !(rank_tol > 0.0) {
            return Err(CertifyError::InvalidCertificate(format!("rank_tol = {rank_tol}")));
        }
        let n = first.q.dim();
        for (i, s) in segments.iter().enumerate() {
            if !(s.end > s.start) {
                return Err(CertifyError::InvalidCertificate(format!(
                    "segment {i} is empty: [{}, {})",
                    s.start, s.end
                )));
            }
            if s.q.dim() != n {
                return Err(CertifyError::Dimension(format!(
                    "segment {i} storage is {0}x{0}, expected {n}x{n}",
                    s.q.dim()
                )));
            }
            if i > 0 && s.start != segments[i - 1].end {
                return Err(CertifyError::InvalidCertificate(format!(
                    "segments {} and {i} do not abut",
                    i - 1
                )));
            }
            rank_with_tol(&s.q, rank_tol).map_err(|e| {
                CertifyError::InvalidCertificate(format!("segment {i} storage: {e}"))
            })?;
        }
        Ok(Self {
            segments,
            beta,
            rank_tol,
        })
    }

    pub fn constant(t_start: f64, t_end: f64, q: HermitianMatrix, beta: f64) -> Result<Self> {
        Self::new(
            vec![StorageSegment {
                start: t_start,
                end: t_end,
                q,
            }],
            beta,
            DEFAULT_RANK_TOL,
        )
    }

    /// Segments `[edges[k], edges[k+1])` carrying `qs[k]`.
    pub fn piecewise(edges: &[f64], qs: Vec<HermitianMatrix>, beta: f64) -> Result<Self> {
        if edges.len() != qs.len() + 1 {
            return Err(CertifyError::InvalidCertificate(format!(
                "{} edges for {} storage matrices",
                edges.len(),
                qs.len()
            )));
        }
        let segments = qs
            .into_iter()
            .enumerate()
            .map(|(k, q)| StorageSegment {
                start: edges[k],
                end: edges[k + 1],
                q,
            })
            .collect();
        Self::new(segments, beta, DEFAULT_RANK_TOL)
    }

    pub fn segments(&self) -> &[StorageSegment] {
        &self.segments
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn dim(&self) -> usize {
        self.segments[0].q.dim()
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.segments[0].start, self.segments.last().expect("non-empty").end)
    }

    fn segment_index(&self, t: f64) -> Result<usize> {
        let (t0, t1) = self.horizon();
        let eps = 1e-12 * (t1 - t0).max(1.0);
        if t < t0 - eps || t > t1 + eps {
            return Err(CertifyError::InvalidCertificate(format!(
                "t = {t} outside storage horizon [{t0}, {t1}]"
            )));
        }
        let idx = self.segments.partition_point(|s| s.start <= t);
        Ok(idx.saturating_sub(1))
    }

    /// Right-continuous `Q(t)`.
    pub fn q_at(&self, t: f64) -> Result<&HermitianMatrix> {
        Ok(&self.segments[self.segment_index(t)?].q)
    }

    /// `(t, Q(t−), Q(t+))` at every segment boundary.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, &HermitianMatrix, &HermitianMatrix)> {
        self.segments
            .windows(2)
            .map(|w| (w[1].start, &w[0].q, &w[1].q))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowResidual {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t1: f64,
    pub residual: f64,
    pub tol: f64,
    pub holds: bool,
}

/// Every dyadic subinterval of `[t0, t1]` whose length is at least `min_len`.
pub fn dyadic_windows(t0: f64, t1: f64, min_len: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let total = t1 - t0;
    let mut pieces = 1usize;
    while total / pieces as f64 >= min_len {
        let len = total / pieces as f64;
        out.extend((0..pieces).map(|k| (t0 + k as f64 * len, t0 + (k + 1) as f64 * len)));
        pieces *= 2;
    }
    out
}

fn trapezoid(times: &[f64], f: impl Fn(usize) -> f64, i0: usize, i1: usize) -> f64 {
    (i0..i1)
        .map(|i| 0.5 * (f(i) + f(i + 1)) * (times[i + 1] - times[i]))
        .sum()
}

/// Dissipation-inequality residual per window:
/// `r = V(T) − V(t0) − ∫Re⟨u,y⟩ + β∫‖h‖²`, which must be ≤ `1e-6·(1 + T − t0)`.
///
/// Window ends are snapped to the nearest trajectory nodes. A window that
/// crosses a storage jump failing the Loewner check is rejected.
pub fn dissipation_residual(
    traj: &Trajectory,
    cert: &StorageCertificate,
    windows: &[(f64, f64)],
) -> Result<Vec<WindowResidual>> {
    let (c0, c1) = cert.horizon();
    let eps = 1e-9 * (c1 - c0).max(1.0);
    if traj.is_empty() || traj.t_start() < c0 - eps || traj.t_end() > c1 + eps {
        return Err(CertifyError::InvalidCertificate(
            "certificate does not cover the trajectory horizon".into(),
        ));
    }
    if traj.h[0].len() != cert.dim() {
        return Err(CertifyError::Dimension(format!(
            "state dimension {} vs storage dimension {}",
            traj.h[0].len(),
            cert.dim()
        )));
    }
    let bad_jumps: Vec<(f64, f64)> = cert
        .jumps()
        .map(|(t, before, after)| Ok((t, loewner_gap(before, after)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&(_, gap)| gap < -JUMP_TOL)
        .collect();

    let energy = |i: usize| -> Result<f64> { Ok(0.5 * cert.q_at(traj.grid[i])?.quadratic_form(&traj.h[i])) };
    let beta = cert.beta();

    windows
        .iter()
        .map(|&(t0, t1)| {
            let i0 = traj.nearest_index(t0);
            let i1 = traj.nearest_index(t1);
            let (s0, s1) = (traj.grid[i0], traj.grid[i1]);
            if let Some(&(t, gap)) = bad_jumps.iter().find(|&&(t, _)| s0 < t && t <= s1) {
                return Err(CertifyError::InvalidJump { t, gap });
            }
            let residual = if i1 <= i0 {
                0.0
            } else {
                let supply = ssm::supply_integral(traj, (s0, s1));
                let drain = if beta > 0.0 {
                    beta * trapezoid(&traj.grid, |i| vec_norm(&traj.h[i]).powi(2), i0, i1)
                } else {
                    0.0
                };
                energy(i1)? - energy(i0)? - supply + drain
            };
            let tol = 1e-6 * (1.0 + (t1 - t0));
            Ok(WindowResidual {
                t0,
                t1,
                residual,
                tol,
                holds: residual <= tol,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayFit {
    /// Transient constant in `‖h(t)‖ ≈ C e^{−γ(t−t0)} ‖h(t0)‖`.
    pub c_fit: f64,
    pub gamma_fit: f64,
    pub r_squared: f64,
    pub samples: usize,
}

/// Least-squares line through `(t, ln x(t))` on the window; `gamma_fit` is
/// the negated slope.
pub fn decay_fit(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(CertifyError::Dimension(format!(
            "{} times vs {} values",
            times.len(),
            values.len()
        )));
    }
    let idx: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= window.0 && times[i] <= window.1)
        .collect();
    if idx.len() < 2 {
        return Err(CertifyError::TooFewSamples);
    }
    if let Some(&i) = idx.iter().find(|&&i| !(values[i] > 0.0 && values[i].is_finite())) {
        return Err(CertifyError::Underflow { t: times[i] });
    }
    let t_ref = times[idx[0]];
    let n = idx.len() as f64;
    let xs: Vec<f64> = idx.iter().map(|&i| times[i] - t_ref).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| values[i].ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayFit {
        c_fit: intercept.exp() / values[idx[0]],
        gamma_fit: -slope,
        r_squared,
        samples: idx.len(),
    })
}

/// The parametric passivity LMI block (dimension `N + d`):
///
/// ```text
/// [ Q̇ + QA + AᴴQ + 2βI   QB − Cᴴ ]
/// [ BᴴQ − C               0      ]
/// ```
///
/// returned symmetrized.
pub fn assemble_lmi(
    q: &HermitianMatrix,
    qdot: &HermitianMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
    beta: f64,
) -> Result<HermitianMatrix> {
    let n = q.dim();
    let d = b.cols();
    if qdot.dim() != n || a.rows() != n || a.cols() != n || b.rows() != n || c.rows() != d || c.cols() != n {
        return Err(CertifyError::Dimension(format!(
            "Q {n}x{n}, Q̇ {0}x{0}, A {1}x{2}, B {3}x{4}, C {5}x{6}",
            qdot.dim(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let qm = q.as_matrix();
    let qa = qm.matmul(a)?;
    let top_left = qdot
        .as_matrix()
        .add(&qa)?
        .add(&qa.adjoint())?
        .add(&DenseMatrix::identity(n).scale(2.0 * beta))?;
    let top_right = qm.matmul(b)?.sub(&c.adjoint())?;
    let block = DenseMatrix::from_fn(n + d, n + d, |i, j| match (i < n, j < n) {
        (true, true) => top_left[(i, j)],
        (true, false) => top_right[(i, j - n)],
        (false, true) => top_right[(j, i - n)].conj(),
        (false, false) => C64::new(0.0, 0.0),
    });
    Ok(HermitianMatrix::symmetrize(&block)?)
}

/// `max(0, λ_max(L))`, with eigenvalues within round-off of zero reported as 0.
pub fn lmi_violation(block: &HermitianMatrix) -> f64 {
    let lmax = lambda_max(block);
    if lmax <= LMI_ROUNDOFF * block.as_matrix().norm_max().max(1.0) {
        0.0
    } else {
        lmax
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LmiSample {
    pub t: f64,
    pub x: Selection,
    pub violation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LmiReport {
    pub samples: Vec<LmiSample>,
    pub max_violation: f64,
    pub violating_fraction: f64,
}

/// Evaluates the LMI at every `(t, x)` pair (`t` outer, `x` inner) with
/// `Q = Q(t)` from the certificate and `Q̇ = 0`.
pub fn lmi_violation_sweep(
    sys: &SelectiveSystem,
    cert: &StorageCertificate,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<LmiReport> {
    let selections = sys.admissible_selections(x_grid);
    let params: Vec<_> = selections
        .iter()
        .map(|&s| sys.params_at(s))
        .collect::<std::result::Result<_, _>>()?;
    let qdot = HermitianMatrix::zeros(sys.state_dim());
    let mut samples = Vec::with_capacity(t_grid.len() * selections.len());
    for &t in t_grid {
        let q = cert.q_at(t)?;
        for (&x, p) in selections.iter().zip(&params) {
            let block = assemble_lmi(q, &qdot, &p.a, &p.b, &p.c, cert.beta())?;
            samples.push(LmiSample {
                t,
                x,
                violation: lmi_violation(&block),
            });
        }
    }
    let max_violation = samples.iter().map(|s| s.violation).fold(0.0, f64::max);
    let violating = samples.iter().filter(|s| s.violation > 0.0).count();
    let violating_fraction = if samples.is_empty() {
        0.0
    } else {
        violating as f64 / samples.len() as f64
    };
    Ok(LmiReport {
        samples,
        max_violation,
        violating_fraction,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KernelCheck {
    pub residual: f64,
    pub threshold: f64,
    pub holds: bool,
}

/// `max ‖C v‖` over an orthonormal kernel basis of `Q` and every `C`.
/// An empty kernel gives residual 0.
pub fn kernel_output_residual(q: &HermitianMatrix, c_list: &[DenseMatrix], rank_tol: f64) -> Result<KernelCheck> {
    let kernel = rank_with_tol(q, rank_tol)?.kernel_vectors();
    let mut residual: f64 = 0.0;
    let mut c_norm: f64 = 0.0;
    for c in c_list {
        if c.cols() != q.dim() {
            return Err(CertifyError::Dimension(format!(
                "C has {} columns, storage is {}x{}",
                c.cols(),
                q.dim(),
                q.dim()
            )));
        }
        c_norm = c_norm.max(numlin::spectral_norm(c));
        for v in &kernel {
            residual = residual.max(vec_norm(&c.mul_vec(v)?));
        }
    }
    let threshold = KERNEL_TOL * c_norm.max(1.0);
    Ok(KernelCheck {
        residual,
        threshold,
        holds: residual <= threshold,
    })
}

/// `max (vᴴQ̇v + 2β)` over unit kernel directions of `Q`; 0 for an empty kernel.
pub fn kernel_energy_residual(q: &HermitianMatrix, qdot: &HermitianMatrix, beta: f64, rank_tol: f64) -> Result<KernelCheck> {
    if qdot.dim() != q.dim() {
        return Err(CertifyError::Dimension("Q̇ and Q differ in size".into()));
    }
    let kernel = rank_with_tol(q, rank_tol)?.kernel_vectors();
    let residual = kernel
        .iter()
        .map(|v| qdot.quadratic_form(v) + 2.0 * beta)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
        .unwrap_or(0.0);
    Ok(KernelCheck {
        residual,
        threshold: KERNEL_TOL,
        holds: residual <= KERNEL_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct JumpCheck {
    pub t: f64,
    pub rank_before: usize,
    pub rank_after: usize,
    pub loewner_gap: f64,
    pub loewner_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RankProfile {
    /// Segment start times.
    pub times: Vec<f64>,
    pub ranks: Vec<usize>,
    pub monotone_nonincreasing: bool,
    pub jump_loewner_ok: bool,
    pub jumps: Vec<JumpCheck>,
}

pub fn rank_profile(cert: &StorageCertificate) -> Result<RankProfile> {
    let ranks: Vec<usize> = cert
        .segments()
        .iter()
        .map(|s| rank_with_tol(&s.q, cert.rank_tol()).map(|r| r.rank))
        .collect::<std::result::Result<_, _>>()?;
    let jumps: Vec<JumpCheck> = cert
        .jumps()
        .zip(ranks.windows(2))
        .map(|((t, before, after), r)| {
            let gap = loewner_gap(before, after)?;
            Ok(JumpCheck {
                t,
                rank_before: r[0],
                rank_after: r[1],
                loewner_gap: gap,
                loewner_ok: gap >= -JUMP_TOL,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RankProfile {
        times: cert.segments().iter().map(|s| s.start).collect(),
        monotone_nonincreasing: ranks.windows(2).all(|w| w[1] <= w[0]),
        jump_loewner_ok: jumps.iter().all(|j| j.loewner_ok),
        ranks,
        jumps,
    })
}

/// `max_x λ_max(Q̇ + QA(x) + A(x)ᴴQ + 2δQ)`; the uniform contraction
/// condition holds iff this is ≤ [`CONTRACTION_TOL`].
pub fn uniform_contraction_check(
    q: &HermitianMatrix,
    qdot: &HermitianMatrix,
    a_list: &[DenseMatrix],
    delta: f64,
) -> Result<f64> {
    let min_eigenvalue = lambda_min(q);
    if min_eigenvalue <= 0.0 {
        return Err(CertifyError::K1Violated { min_eigenvalue });
    }
    let n = q.dim();
    let mut excess = f64::NEG_INFINITY;
    for a in a_list {
        if a.rows() != n || a.cols() != n || qdot.dim() != n {
            return Err(CertifyError::Dimension(format!(
                "A is {}x{}, Q is {n}x{n}",
                a.rows(),
                a.cols()
            )));
        }
        let qa = q.as_matrix().matmul(a)?;
        let m = qdot
            .as_matrix()
            .add(&qa)?
            .add(&qa.adjoint())?
            .add(&q.as_matrix().scale(2.0 * delta))?;
        excess = excess.max(lambda_max(&HermitianMatrix::symmetrize(&m)?));
    }
    Ok(excess)
}

/// Constants of a uniform contraction certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssConstants {
    pub k1: f64,
    pub k2: f64,
    pub delta: f64,
    #[serde(rename = "M_B")]
    pub m_b: f64,
}

impl IssConstants {
    /// `k1 = λ_min(Q)`, `k2 = λ_max(Q)`, `M_B = max ‖B‖₂`.
    pub fn from_storage(q: &HermitianMatrix, b_list: &[DenseMatrix], delta: f64) -> Self {
        let eig = sym_eigen(q);
        Self {
            k1: eig.min(),
            k2: eig.max(),
            delta,
            m_b: b_list.iter().map(numlin::spectral_norm).fold(0.0, f64::max),
        }
    }

    pub fn c_tilde(&self) -> f64 {
        (self.k2 / self.k1).sqrt()
    }

    pub fn k_prime(&self) -> f64 {
        self.k2 * self.m_b / (self.delta * self.k1)
    }

    /// `K = √(2/k1)·k2·M_B`, the gain in the `√V` comparison inequality.
    pub fn comparison_gain(&self) -> f64 {
        (2.0 / self.k1).sqrt() * self.k2 * self.m_b
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IssCheckReport {
    pub constants: IssConstants,
    pub c_tilde: f64,
    pub gamma_tilde: f64,
    pub k_prime: f64,
    /// `bound(t) − ‖h(t)‖` at every node.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub holds: bool,
}

/// Checks `‖h(t)‖ ≤ √(k2/k1)·e^{−δ(t−t0)}‖h(t0)‖ + K'·max_{τ≤t}‖u(τ)‖`
/// with `K' = k2·M_B/(δ·k1)` at every node.
pub fn iss_bound_check(traj: &Trajectory, constants: IssConstants) -> Result<IssCheckReport> {
    let IssConstants { k1, k2, delta, m_b } = constants;
    if !(k1 > 0.0 && k2 > 0.0 && delta > 0.0 && m_b >= 0.0) {
        return Err(CertifyError::InvalidConstant(format!(
            "need k1, k2, delta > 0 and M_B ≥ 0, got {constants:?}"
        )));
    }
    if k2 < k1 {
        return Err(CertifyError::InvalidConstant(format!("k2 = {k2} < k1 = {k1}")));
    }
    if traj.is_empty() {
        return Err(CertifyError::TooFewSamples);
    }
    let c_tilde = constants.c_tilde();
    let k_prime = constants.k_prime();
    let t0 = traj.t_start();
    let h0 = vec_norm(&traj.h[0]);
    let mut sup_u: f64 = 0.0;
    let margins: Vec<f64> = (0..traj.len())
        .map(|i| {
            sup_u = sup_u.max(vec_norm(&traj.u[i]));
            let bound = c_tilde * (-delta * (traj.grid[i] - t0)).exp() * h0 + k_prime * sup_u;
            bound - vec_norm(&traj.h[i])
        })
        .collect();
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(IssCheckReport {
        constants,
        c_tilde,
        gamma_tilde: delta,
        k_prime,
        min_margin,
        holds: min_margin >= ISS_MARGIN_TOL,
        margins,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub margins: Vec<f64>,
    pub min_margin: f64,
}

/// Checks `Ψ(t) ≤ e^{−δ(t−t0)}Ψ(t0) + ∫_{t0}^{t} e^{−δ(t−τ)} (K/2)‖u(τ)‖ dτ`
/// with the convolution evaluated recursively by the trapezoid rule.
pub fn comparison_bound_check(
    times: &[f64],
    psi: &[f64],
    delta: f64,
    gain: f64,
    u_norms: &[f64],
) -> Result<ComparisonReport> {
    if times.len() != psi.len() || times.len() != u_norms.len() {
        return Err(CertifyError::Dimension("times, Ψ and ‖u‖ must align".into()));
    }
    if times.is_empty() {
        return Err(CertifyError::TooFewSamples);
    }
    if !(gain >= 0.0) || psi.iter().any(|&p| p < 0.0) {
        return Err(CertifyError::InvalidConstant("need K ≥ 0 and Ψ ≥ 0".into()));
    }
    let forcing = |i: usize| 0.5 * gain * u_norms[i];
    let mut conv = 0.0;
    let mut margins = Vec::with_capacity(times.len());
    margins.push(0.0);
    for i in 1..times.len() {
        let step = times[i] - times[i - 1];
        let decay = (-delta * step).exp();
        conv = decay * conv + 0.5 * step * (decay * forcing(i - 1) + forcing(i));
        let rhs = (-delta * (times[i] - times[0])).exp() * psi[0] + conv;
        margins.push(rhs - psi[i]);
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ComparisonReport { margins, min_margin })
}

#[derive(Clone, Debug, Serialize)]
pub struct RankPoint {
    pub t: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationEntry {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t1: f64,
    /// `None` (JSON `null`) when the window crosses an invalid jump.
    pub residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IssSummary {
    pub k1: f64,
    pub k2: f64,
    pub delta: f64,
    #[serde(rename = "M_B")]
    pub m_b: f64,
    pub min_margin: f64,
}

/// Aggregate certificate for one run, exported as `summary.json`.
#[derive(Clone, Debug, Serialize)]
pub struct CertificateReport {
    pub max_lmi_violation: f64,
    pub violating_fraction: f64,
    pub kernel_output_residual: f64,
    pub kernel_energy_residual: f64,
    pub rank_profile: Vec<RankPoint>,
    pub monotone: bool,
    pub loewner_ok: bool,
    pub dissipation: Vec<DissipationEntry>,
    pub iss: Option<IssSummary>,
}

/// Runs every certificate check on a simulated trajectory.
///
/// `iss` is evaluated only when constants are supplied.
pub fn build_report(
    sys: &SelectiveSystem,
    sched: &Schedule,
    traj: &Trajectory,
    cert: &StorageCertificate,
    x_grid: &[f64],
    iss: Option<IssConstants>,
) -> Result<CertificateReport> {
    let t_grid: Vec<f64> = cert.segments().iter().map(|s| s.start).collect();
    let lmi = lmi_violation_sweep(sys, cert, x_grid, &t_grid)?;

    let qdot = HermitianMatrix::zeros(cert.dim());
    let mut k_out: f64 = 0.0;
    let mut k_energy = f64::NEG_INFINITY;
    for seg in cert.segments() {
        // outputs the schedule can actually produce while this storage is active
        let mut selections: Vec<Selection> = sched
            .segments()
            .into_iter()
            .filter(|&(s0, s1, _)| s0 < seg.end && s1 > seg.start)
            .map(|(_, _, sel)| sel)
            .collect();
        if matches!(sys.form(), ssm::SystemForm::AffineGated { .. }) {
            selections.extend(sys.admissible_selections(x_grid));
        }
        let c_list = selections
            .into_iter()
            .map(|sel| sys.params_at(sel).map(|p| p.c))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        k_out = k_out.max(kernel_output_residual(&seg.q, &c_list, cert.rank_tol())?.residual);
        k_energy = k_energy.max(kernel_energy_residual(&seg.q, &qdot, cert.beta(), cert.rank_tol())?.residual);
    }

    let profile = rank_profile(cert)?;
    let windows = dyadic_windows(sched.t_start().max(traj.t_start()), traj.t_end(), MIN_DYADIC_WINDOW);
    let dissipation = windows
        .iter()
        .map(|&w| match dissipation_residual(traj, cert, &[w]) {
            Ok(r) => Ok(DissipationEntry {
                t0: w.0,
                t1: w.1,
                residual: Some(r[0].residual),
            }),
            Err(CertifyError::InvalidJump { .. }) => Ok(DissipationEntry {
                t0: w.0,
                t1: w.1,
                residual: None,
            }),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;

    let iss = iss
        .map(|c| {
            iss_bound_check(traj, c).map(|r| IssSummary {
                k1: c.k1,
                k2: c.k2,
                delta: c.delta,
                m_b: c.m_b,
                min_margin: r.min_margin,
            })
        })
        .transpose()?;

    Ok(CertificateReport {
        max_lmi_violation: lmi.max_violation,
        violating_fraction: lmi.violating_fraction,
        kernel_output_residual: k_out,
        kernel_energy_residual: k_energy,
        rank_profile: profile
            .times
            .iter()
            .zip(&profile.ranks)
            .map(|(&t, &rank)| RankPoint { t, rank })
            .collect(),
        monotone: profile.monotone_nonincreasing,
        loewner_ok: profile.jump_loewner_ok,
        dissipation,
        iss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::real_vec;
    use crate::ssm::{simulate, Gate, InputSignal, Mode};

    fn scalar_run(a: f64, horizon: f64) -> Trajectory {
        let sys = SelectiveSystem::lti(
            DenseMatrix::from_real(1, 1, &[a]),
            DenseMatrix::from_real(1, 1, &[1.0]),
            DenseMatrix::from_real(1, 1, &[1.0]),
        )
        .unwrap();
        let sched = Schedule::constant(0.0, horizon, Selection::Mode(0)).unwrap();
        simulate(&sys, &sched, &InputSignal::zero(1), &real_vec(&[1.0]), 1e-3, (0.0, horizon)).unwrap()
    }

    #[test]
    fn dissipation_pure_decay_and_growth() {
        let cert = StorageCertificate::constant(0.0, 2.0, HermitianMatrix::identity(1), 0.0).unwrap();
        let windows = dyadic_windows(0.0, 2.0, MIN_DYADIC_WINDOW);
        assert_eq!(windows.len(), 1 + 2 + 4 + 8);

        let decay = dissipation_residual(&scalar_run(-1.0, 2.0), &cert, &windows).unwrap();
        assert!(decay.iter().all(|w| w.holds && w.residual <= 0.0));
        let full = &decay[0];
        let want = 0.5 * ((-4.0f64).exp() - 1.0);
        assert!((full.residual - want).abs() < 1e-10);

        let growth = dissipation_residual(&scalar_run(1.0, 2.0), &cert, &windows).unwrap();
        assert!(growth.iter().all(|w| !w.holds && w.residual > 0.0));
    }

    #[test]
    fn dissipation_rejects_energy_injecting_jump() {
        let traj = scalar_run(-1.0, 2.0);
        let cert = StorageCertificate::piecewise(
            &[0.0, 1.0, 2.0],
            vec![HermitianMatrix::identity(1), HermitianMatrix::identity(1).scale(2.0)],
            0.0,
        )
        .unwrap();
        assert!(dissipation_residual(&traj, &cert, &[(0.0, 0.5), (1.0, 2.0)]).is_ok());
        match dissipation_residual(&traj, &cert, &[(0.5, 1.5)]) {
            Err(CertifyError::InvalidJump { t, gap }) => {
                assert_eq!(t, 1.0);
                assert!((gap + 1.0).abs() < 1e-14);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn beta_drain_enters_residual() {
        let traj = scalar_run(-1.0, 1.0);
        let strict = StorageCertificate::constant(0.0, 1.0, HermitianMatrix::identity(1), 0.5).unwrap();
        let r = dissipation_residual(&traj, &strict, &[(0.0, 1.0)]).unwrap()[0].residual;
        // ½(e^{-2} − 1) + ½∫e^{-2t} = ½(e^{-2} − 1) + ¼(1 − e^{-2})
        let want = -0.25 * (1.0 - (-2.0f64).exp());
        assert!((r - want).abs() < 1e-7, "{r} vs {want}");
    }

    #[test]
    fn decay_fit_exact_exponential() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let v: Vec<f64> = t.iter().map(|&s| 3.0 * (-s).exp()).collect();
        let f = decay_fit(&t, &v, (1.0, 9.0)).unwrap();
        assert!((f.gamma_fit - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!((f.c_fit - 1.0).abs() < 1e-10);

        let mut z = v.clone();
        z[100] = 0.0;
        assert!(matches!(decay_fit(&t, &z, (1.0, 9.0)), Err(CertifyError::Underflow { .. })));
        assert!(matches!(decay_fit(&t, &v, (20.0, 30.0)), Err(CertifyError::TooFewSamples)));
    }

    #[test]
    fn lmi_block_examples() {
        let i = HermitianMatrix::identity(2);
        let z = HermitianMatrix::zeros(2);
        let id = DenseMatrix::identity(2);
        let block = assemble_lmi(&i, &z, &id.scale(-1.0), &id, &id, 0.0).unwrap();
        let want = DenseMatrix::from_real_diag(&[-2.0, -2.0, 0.0, 0.0]);
        assert_eq!(block.as_matrix(), &want);
        assert_eq!(lmi_violation(&block), 0.0);

        let block = assemble_lmi(&i, &z, &DenseMatrix::zeros(2, 2), &id, &DenseMatrix::zeros(2, 2), 0.0).unwrap();
        assert!((lambda_max(&block) - 1.0).abs() < 1e-14);

        assert!(matches!(
            assemble_lmi(&i, &z, &id, &DenseMatrix::zeros(3, 1), &id, 0.0),
            Err(CertifyError::Dimension(_))
        ));
    }

    fn passive_gated(n: usize) -> SelectiveSystem {
        let b = DenseMatrix::from_fn(n, 1, |i, _| C64::new(0.3 * (i as f64 + 1.0), 0.0));
        SelectiveSystem::affine_gated(
            DenseMatrix::identity(n).scale(-2.0),
            DenseMatrix::identity(n).scale(-1.0),
            b.clone(),
            b.adjoint(),
            Gate::Tanh,
        )
        .unwrap()
    }

    #[test]
    fn lmi_sweep_passive_and_strict() {
        let sys = passive_gated(3);
        let x_grid: Vec<f64> = (0..61).map(|k| -3.0 + 0.1 * k as f64).collect();
        let cert = StorageCertificate::constant(0.0, 1.0, HermitianMatrix::identity(3), 0.0).unwrap();
        let rep = lmi_violation_sweep(&sys, &cert, &x_grid, &[0.0]).unwrap();
        assert_eq!(rep.samples.len(), 61);
        assert_eq!(rep.max_violation, 0.0);
        assert_eq!(rep.violating_fraction, 0.0);

        // β = 3: top-left block is (2β − 2(2 + tanh x))I > 0
        let cert = StorageCertificate::constant(0.0, 1.0, HermitianMatrix::identity(3), 3.0).unwrap();
        let rep = lmi_violation_sweep(&sys, &cert, &x_grid, &[0.0]).unwrap();
        assert_eq!(rep.violating_fraction, 1.0);
        let x = -3.0f64;
        assert!((rep.samples[0].violation - (6.0 - 2.0 * (2.0 + x.tanh()))).abs() < 1e-12);
    }

    #[test]
    fn kernel_examples() {
        let q = HermitianMatrix::from_real_diag(&[1.0, 1.0, 0.0]);
        let c_masked = DenseMatrix::from_real_diag(&[1.0, 1.0, 0.0]);
        let k = kernel_output_residual(&q, &[c_masked], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(k.residual, 0.0);
        assert!(k.holds);
        let k = kernel_output_residual(&q, &[DenseMatrix::identity(3)], DEFAULT_RANK_TOL).unwrap();
        assert!((k.residual - 1.0).abs() < 1e-15);
        assert!(!k.holds);
        let k = kernel_output_residual(&HermitianMatrix::identity(3), &[DenseMatrix::identity(3)], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(k.residual, 0.0);

        let zero = HermitianMatrix::zeros(3);
        assert_eq!(kernel_energy_residual(&q, &zero, 0.0, DEFAULT_RANK_TOL).unwrap().residual, 0.0);
        let e = kernel_energy_residual(&q, &zero, 0.1, DEFAULT_RANK_TOL).unwrap();
        assert!((e.residual - 0.2).abs() < 1e-15);
        assert!(!e.holds);
        let minus_i = HermitianMatrix::identity(3).scale(-1.0);
        let e = kernel_energy_residual(&q, &minus_i, 0.1, DEFAULT_RANK_TOL).unwrap();
        assert!((e.residual + 0.8).abs() < 1e-15);
        assert!(e.holds);
    }

    #[test]
    fn rank_profile_examples() {
        let q1 = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 1.25]);
        let q2 = HermitianMatrix::from_real_diag(&[2.5, 5.0 / 3.0, 0.0]);
        let honest = StorageCertificate::piecewise(&[0.0, 5.0, 10.0], vec![q1.clone(), q2.clone()], 0.0).unwrap();
        let p = rank_profile(&honest).unwrap();
        assert_eq!(p.ranks, vec![3, 2]);
        assert!(p.monotone_nonincreasing && p.jump_loewner_ok);

        let bad = StorageCertificate::piecewise(&[0.0, 5.0, 10.0, 15.0], vec![q1.clone(), q2, q1.clone()], 0.0).unwrap();
        let p = rank_profile(&bad).unwrap();
        assert_eq!(p.ranks, vec![3, 2, 3]);
        assert!(!p.monotone_nonincreasing);
        assert!(!p.jump_loewner_ok);
        assert!(!p.jumps[1].loewner_ok && p.jumps[0].loewner_ok);

        let constant = StorageCertificate::piecewise(&[0.0, 1.0, 2.0], vec![q1.clone(), q1], 0.0).unwrap();
        assert!(rank_profile(&constant).unwrap().monotone_nonincreasing);
    }

    #[test]
    fn contraction_examples() {
        let delta = 0.3;
        let q = HermitianMatrix::identity(2);
        let z = HermitianMatrix::zeros(2);
        let a = DenseMatrix::identity(2).scale(-(delta + 1.0));
        let ex = uniform_contraction_check(&q, &z, &[a], delta).unwrap();
        assert!((ex + 2.0).abs() < 1e-14);
        let ex = uniform_contraction_check(&q, &z, &[DenseMatrix::zeros(2, 2)], delta).unwrap();
        assert!((ex - 2.0 * delta).abs() < 1e-14);
        assert!(matches!(
            uniform_contraction_check(&HermitianMatrix::from_real_diag(&[1.0, 0.0]), &z, &[], delta),
            Err(CertifyError::K1Violated { .. })
        ));
    }

    #[test]
    fn iss_zero_input_is_exponential_envelope() {
        let traj = scalar_run(-1.0, 5.0);
        let c = IssConstants {
            k1: 1.0,
            k2: 1.0,
            delta: 1.0,
            m_b: 1.0,
        };
        let r = iss_bound_check(&traj, c).unwrap();
        assert!(r.holds);
        assert!(r.min_margin.abs() < 1e-9);
        assert_eq!(r.c_tilde, 1.0);
        assert_eq!(r.k_prime, 1.0);
        let bad = IssConstants { k2: 0.5, ..c };
        assert!(iss_bound_check(&traj, bad).is_err());
    }

    #[test]
    fn comparison_examples() {
        let t: Vec<f64> = (0..1001).map(|i| i as f64 * 1e-2).collect();
        let u0 = vec![0.0; t.len()];
        let psi: Vec<f64> = t.iter().map(|&s| (-0.7 * s).exp()).collect();
        let r = comparison_bound_check(&t, &psi, 0.5, 1.0, &u0).unwrap();
        assert!(r.min_margin >= 0.0);

        let growing: Vec<f64> = t.iter().map(|&s| (0.1 * s).exp()).collect();
        let r = comparison_bound_check(&t, &growing, 0.5, 0.0, &u0).unwrap();
        assert!(r.min_margin < 0.0);
    }

    #[test]
    fn report_for_switched_system() {
        let zero = DenseMatrix::zeros(2, 2);
        let sys = SelectiveSystem::mode_switched(vec![
            Mode {
                a: DenseMatrix::from_real_diag(&[-1.0, -2.0]),
                b: zero.clone(),
                c: DenseMatrix::identity(2),
            },
            Mode {
                a: DenseMatrix::from_real_diag(&[-1.0, -9.0]),
                b: zero,
                c: DenseMatrix::from_real_diag(&[1.0, 0.0]),
            },
        ])
        .unwrap();
        let sched = Schedule::new(0.0, 2.0, vec![1.0], vec![Selection::Mode(0), Selection::Mode(1)]).unwrap();
        let traj = simulate(&sys, &sched, &InputSignal::zero(2), &real_vec(&[1.0, 1.0]), 1e-3, (0.0, 2.0)).unwrap();
        let cert = StorageCertificate::piecewise(
            &[0.0, 1.0, 2.0],
            vec![
                HermitianMatrix::from_real_diag(&[0.5, 0.25]),
                HermitianMatrix::from_real_diag(&[0.5, 0.0]),
            ],
            0.0,
        )
        .unwrap();
        let rep = build_report(&sys, &sched, &traj, &cert, &[], None).unwrap();
        assert_eq!(rep.rank_profile.len(), 2);
        assert!(rep.monotone && rep.loewner_ok);
        assert!(rep.dissipation.iter().all(|d| d.residual.unwrap() <= 1e-6));
        assert_eq!(rep.kernel_output_residual, 0.0);
        assert!(rep.iss.is_none());
    }
}
