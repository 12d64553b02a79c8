//! LMI violation over the selection grid for a system that loses passivity
//! for large positive x.

use ssmlab::certify::{lmi_violation_sweep, StorageCertificate};
use ssmlab::numlin::{DenseMatrix, HermitianMatrix};
use ssmlab::ssm::{Gate, SelectiveSystem, Selection};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A(x) = (−0.2 + 0.5·tanh x)·I crosses zero near x = 0.42.
    let b = DenseMatrix::from_real_rows(&[vec![1.0], vec![0.0]]);
    let sys = SelectiveSystem::affine_gated(
        DenseMatrix::identity(2).scale(-0.2),
        DenseMatrix::identity(2).scale(0.5),
        b.clone(),
        b.transpose(),
        Gate::Tanh,
    )?;
    let cert = StorageCertificate::constant(0.0, 1.0, HermitianMatrix::identity(2), 0.0)?;
    let x_grid: Vec<f64> = (0..=12).map(|k| -3.0 + 0.5 * k as f64).collect();
    let rep = lmi_violation_sweep(&sys, &cert, &x_grid, &[0.0])?;
    for s in &rep.samples {
        if let Selection::Value(x) = s.x {
            println!("x = {x:+.1}  violation = {:.4}", s.violation);
        }
    }
    println!("max {:.4}, violating fraction {:.3}", rep.max_violation, rep.violating_fraction);
    Ok(())
}
