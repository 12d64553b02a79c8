//! Mode-switched simulation with a breakpoint-aligned RK4 grid.

use ssmlab::numlin::{real_vec, DenseMatrix};
use ssmlab::ssm::{simulate, InputSignal, Mode, Schedule, SelectiveSystem, Selection};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let slow = Mode {
        a: DenseMatrix::from_real_diag(&[-0.2, -0.3]),
        b: DenseMatrix::from_real_rows(&[vec![1.0], vec![0.5]]),
        c: DenseMatrix::from_real_rows(&[vec![1.0, 0.5]]),
    };
    let fast = Mode {
        a: DenseMatrix::from_real_diag(&[-0.2, -10.0]),
        ..slow.clone()
    };
    let sys = SelectiveSystem::mode_switched(vec![slow, fast])?;
    let sched = Schedule::new(0.0, 6.0, vec![2.0, 4.0], vec![Selection::Mode(0), Selection::Mode(1), Selection::Mode(0)])?;
    let input = InputSignal::constant(vec![0.5]).with_cutoff(3.0);
    let traj = simulate(&sys, &sched, &input, &real_vec(&[1.0, -1.0]), 1e-3, (0.0, 6.0))?;
    for t in [0.0, 2.0, 4.0, 6.0] {
        let i = traj.nearest_index(t);
        println!("t = {t:.1}  h = ({:+.5}, {:+.5})", traj.h[i][0].re, traj.h[i][1].re);
    }
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    for line in String::from_utf8(csv)?.lines().take(3) {
        println!("{line}");
    }
    Ok(())
}
