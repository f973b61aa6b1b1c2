//! Robust auto-tuning of an MPC + Kalman filter feed-velocity loop with
//! two-stage (min-max) Bayesian optimisation.

pub mod bo;
pub mod closedloop;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod seed;
pub mod tuner;

pub use error::{Error, Result};
