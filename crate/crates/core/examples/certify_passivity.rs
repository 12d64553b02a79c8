//! Full certificate report for a passive gated system.

use ssmlab::certify::{build_report, IssConstants, StorageCertificate};
use ssmlab::format::to_json_string;
use ssmlab::numlin::{real_vec, DenseMatrix, HermitianMatrix};
use ssmlab::ssm::{simulate, Gate, InputSignal, Schedule, SelectiveSystem, Selection};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A(x) = −(2 + tanh x)·I with B = Cᵀ is passive with Q = I.
    let b = DenseMatrix::from_real_rows(&[vec![0.6], vec![-0.3]]);
    let sys = SelectiveSystem::affine_gated(
        DenseMatrix::identity(2).scale(-2.0),
        DenseMatrix::identity(2).scale(-1.0),
        b.clone(),
        b.transpose(),
        Gate::Tanh,
    )?;
    let sched = Schedule::new(0.0, 4.0, vec![1.5], vec![Selection::Value(-1.0), Selection::Value(2.0)])?;
    let input = InputSignal::white_noise(1.0, 3, 0.05, 1, 0.0, 4.0);
    let traj = simulate(&sys, &sched, &input, &real_vec(&[1.0, 0.5]), 1e-3, (0.0, 4.0))?;

    let q = HermitianMatrix::identity(2);
    let cert = StorageCertificate::constant(0.0, 4.0, q.clone(), 0.0)?;
    let x_grid: Vec<f64> = (0..=60).map(|k| -3.0 + 0.1 * k as f64).collect();
    let iss = IssConstants::from_storage(&q, &[b], 1.0);
    let report = build_report(&sys, &sched, &traj, &cert, &x_grid, Some(iss))?;
    print!("{}", to_json_string(&report)?);
    Ok(())
}
