//! ISS bound and comparison-principle check on a contracting system.

use ssmlab::certify::{comparison_bound_check, iss_bound_check, uniform_contraction_check, IssConstants};
use ssmlab::numlin::{real_vec, DenseMatrix, HermitianMatrix};
use ssmlab::ssm::{simulate, InputSignal, Schedule, SelectiveSystem, Selection};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let delta = 0.5;
    let a = DenseMatrix::from_real_rows(&[vec![-1.0, 1.0], vec![-1.0, -1.0]]);
    let b = DenseMatrix::from_real_rows(&[vec![1.0], vec![0.5]]);
    let q = HermitianMatrix::identity(2);
    let excess = uniform_contraction_check(&q, &HermitianMatrix::zeros(2), std::slice::from_ref(&a), delta)?;
    println!("contraction excess {excess:.3} (must be <= 0)");

    let sys = SelectiveSystem::lti(a, b.clone(), DenseMatrix::zeros(1, 2))?;
    let sched = Schedule::constant(0.0, 20.0, Selection::Mode(0))?;
    let input = InputSignal::white_noise(2.0, 11, 0.05, 1, 0.0, 20.0);
    let traj = simulate(&sys, &sched, &input, &real_vec(&[3.0, -2.0]), 1e-3, (0.0, 20.0))?;

    let constants = IssConstants::from_storage(&q, &[b], delta);
    let iss = iss_bound_check(&traj, constants)?;
    println!("C~ = {:.3}, K' = {:.3}, min margin {:.4}, holds {}", iss.c_tilde, iss.k_prime, iss.min_margin, iss.holds);

    // Ψ = √V with V = ½hᵀQh.
    let psi: Vec<f64> = traj.h.iter().map(|h| (0.5 * q.quadratic_form(h)).sqrt()).collect();
    let cmp = comparison_bound_check(&traj.grid, &psi, delta, constants.comparison_gain(), &traj.input_norms())?;
    println!("comparison min margin {:.4}", cmp.min_margin);
    Ok(())
}
