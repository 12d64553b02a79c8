//! Irreversible forgetting: a rank-deficient storage segment that cannot be
//! undone.

use ssmlab::experiments::{run_experiment2, Exp2Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let r = run_experiment2(&Exp2Config::default())?;
    println!("h0 = {:?}", r.h0);
    println!("Q1 = {:?}", r.q1);
    println!("Q2 = {:?}", r.q2);
    println!("honest ranks {:?}, loewner ok {}", r.honest.ranks, r.honest.jump_loewner_ok);
    println!("violating ranks {:?}, loewner ok {}", r.violating.ranks, r.violating.jump_loewner_ok);
    println!("|h3| at t = 10: {:.3e}, max after t = 6: {:.3e}", r.abs_h3_at_10, r.max_abs_h3_after_6);
    Ok(())
}
