//! Initializer energy landscapes: HiPPO-style, random stable, random unstable.

use ssmlab::experiments::{run_experiment1, Exp1Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = run_experiment1(&Exp1Config::default())?;
    for c in &report.conditions {
        println!(
            "{:<16} rightmost {:+.4}  Q0 pd {:<5}  cond {:>8}  gamma_fit {:>8}  energy 2-decade {:?}",
            c.kind.name(),
            c.rightmost_real,
            c.q_positive_definite,
            c.cond_number.map_or("-".into(), |k| format!("{k:.2}")),
            c.decay_fit.map_or("-".into(), |f| format!("{:.4}", f.gamma_fit)),
            c.energy_two_decade_time,
        );
    }
    println!("energy decay-time ratio (stable / hippo): {:?}", report.energy_decay_time_ratio);
    Ok(())
}
