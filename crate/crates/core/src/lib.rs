//! Tube model predictive control with distributionally robust CVaR
//! constraint tightening learned from a mixture of Gaussian-process experts.

pub mod config;
pub mod conic;
pub mod drcvar;
pub mod geometry;
pub mod mpc;
pub mod mogp;
pub mod sim;
