//! Robust power system state estimation with a differentiable conic layer.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: Matpower case parsing, branch π-model parameters, nodal admittance.
//! - [`powerflow`]: Newton-Raphson AC power flow, measurement functions, noisy datasets.
//! - [`conic`]: a homogeneous self-dual interior-point solver for zero / nonnegative /
//!   second-order cone programs.
//! - [`conic_diff`]: forward and adjoint derivatives of the cone program solution map.
//! - [`rse`]: the relaxed WLAV estimation problem, rank-one recovery, WLS baseline and
//!   exactness diagnostics.
//! - [`learn`]: the end-to-end model (optimisation layer + dense post-processing),
//!   hybrid Huber loss, Adam, and fully connected baselines.
//! - [`cli`]: the experiment driver behind the `rse` binary.

pub mod cli;
pub mod conic;
pub mod conic_diff;
pub mod grid;
pub mod learn;
pub mod powerflow;
pub mod rse;
pub mod sparse;

pub use conic::{ConeSpec, ConicProgram, ConicSolution, ConicSolver, SolveStatus, SolverSettings};
pub use grid::{AdmittanceModel, BranchRecord, BusRecord, BusType, DerivedBranchParams, GridCase};
pub use powerflow::{Dataset, MeasurementKind, MeasurementMeta, MeasurementSample, StateVector};

/// Bundled Matpower cases, compiled into the binary.
pub mod cases {
    pub const CASE9: &str = include_str!("../cases/case9.m");
    pub const CASE14: &str = include_str!("../cases/case14.m");
    pub const CASE33BW: &str = include_str!("../cases/case33bw.m");
    pub const CASE3_TOY: &str = include_str!("../cases/case3_toy.m");

    /// Looks up a bundled case by its short id (`case9`, `ieee9`, `9`, ...).
    pub fn bundled(id: &str) -> Option<&'static str> {
        match id.to_ascii_lowercase().as_str() {
            "case9" | "ieee9" | "ieee-9" | "9" => Some(CASE9),
            "case14" | "ieee14" | "ieee-14" | "14" => Some(CASE14),
            "case33bw" | "case33" | "ieee33" | "ieee-33" | "33" => Some(CASE33BW),
            "case3_toy" | "toy3" | "3" => Some(CASE3_TOY),
            _ => None,
        }
    }

    pub const ALL: [&str; 4] = ["case9", "case14", "case33bw", "case3_toy"];
}
