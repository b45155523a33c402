//! Continuous-time structural equation modelling from high-frequency data.

pub mod fixtures;
pub mod harness;
pub mod inference;
pub mod lisrel;
pub mod matrix;
pub mod optim;
pub mod qmle;
pub mod realized;
pub mod sde;
pub mod sparse;
