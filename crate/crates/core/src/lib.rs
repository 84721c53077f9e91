//! Fixed-point state reconstruction for nonlinear time-varying systems
//! `ẋ = A(t,y,u)x + f(t,y,x,u)`, `y = C(t,u)x`.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: uniform grids, RK4, cumulative trapezoid, SPD solves.
//! - [`expression`]: the small expression language used by scenario files.
//! - [`system`]: system models, the triangular builder and its checks.
//! - [`reconstruction`]: fundamental matrix, Gramian, correction map and the
//!   contraction operator whose fixed point is the unknown trajectory.
//! - [`estimator`]: the known-bound and diagonal estimation schemes.
//! - [`hybrid`]: the reset observer driven by the estimate sequence.

pub mod error;
pub mod estimator;
pub mod expression;
pub mod hybrid;
pub mod numerics;
pub mod reconstruction;
pub mod system;

pub use error::{Error, Result};
