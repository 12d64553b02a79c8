//! Simulation and certification toolkit for continuous-time selective
//! state-space models.

pub mod certify;
pub mod cli;
pub mod experiments;
pub mod format;
pub mod numlin;
pub mod ssm;
