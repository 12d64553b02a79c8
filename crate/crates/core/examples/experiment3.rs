//! Baseline vs LMI-regularized training on the spiky tracking task.
//!
//! Takes about a minute in release mode; pass an iteration count to shorten it.

use ssmlab::experiments::{run_experiment3, Exp3Config, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(500);
    let cfg = Exp3Config {
        train: TrainConfig {
            iters,
            ..TrainConfig::default()
        },
        ..Exp3Config::default()
    };
    let r = run_experiment3(&cfg)?;
    for (name, m) in [("baseline", r.table.baseline), ("regularized", r.table.regularized)] {
        println!(
            "{name:<12} test MSE {:>12.4}  max |h| {:>10.3}  max LMI violation {:.4}",
            m.task_mse_test, m.max_state_norm, m.max_lmi_violation
        );
    }
    Ok(())
}
