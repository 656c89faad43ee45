//! Split federated learning with zeroth-order updates on both sides of the
//! cut and unbalanced server updates (`tau` server steps per client round).
//!
//! Everything runs in one process against a simulated clock.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod trace;
pub mod verify;
pub mod zo;
