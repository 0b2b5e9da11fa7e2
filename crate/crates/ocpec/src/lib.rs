//! Optimal control with complementarity constraints.
//!
//! This crate simulates, solves, and audits control problems whose path
//! constraints include a complementarity condition `0 ≤ G(t,x,u) ⊥ H(t,x,u) ≥ 0`.
//! It provides:
//!
//! * problem definitions with analytic derivatives ([`problem`]),
//! * the pointwise geometry of the complementarity cone ([`compgeom`]),
//! * a pivoting solver for linear complementarity subproblems ([`lcp`]),
//! * a relaxation-homotopy solver for the time-discretized problem
//!   ([`transcribe`]),
//! * adjoint and multiplier recovery with node-by-node stationarity grading
//!   ([`stationarity`]),
//! * constraint-qualification audits ([`cq`]), and
//! * an end-to-end pipeline with a serializable report ([`pipeline`],
//!   [`report`]).

pub mod compgeom;
pub mod cq;
pub mod error;
pub mod lcp;
mod linalg;
pub mod pipeline;
pub mod problem;
pub mod report;
pub mod stationarity;
pub mod transcribe;

pub use error::{Error, Result};
