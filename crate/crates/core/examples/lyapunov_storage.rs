//! Quadratic storage for a stable LTI system via the Lyapunov equation.

use ssmlab::numlin::{cond_number, lyapunov_residual, lyapunov_solve, sym_eigen, DenseMatrix, HermitianMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = DenseMatrix::from_real_rows(&[vec![-0.5, 2.0], vec![-1.0, -0.8]]);
    let w = HermitianMatrix::identity(2);
    let q = lyapunov_solve(&a, &w)?;
    println!("Q = {:?}", q.as_matrix().real_rows());
    println!("eigenvalues {:?}", sym_eigen(&q).values);
    println!("cond(Q) = {:.4}", cond_number(&q)?);
    println!("residual = {:.3e}", lyapunov_residual(&a, &q, &w)?);
    Ok(())
}
