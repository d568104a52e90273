//! Path-following control for a general 2-trailer with a car-like tractor.
//!
//! The crate contains the kinematic vehicle model, nominal path handling,
//! the Frenet-frame path-following error model and its linearization, a
//! dense QP solver, a constrained MPC and an LQ baseline, joint-angle region
//! analysis, and a closed-loop simulator.

pub mod error;
pub mod error_model;
pub mod mpc;
pub mod path;
pub mod qp;
pub mod region;
pub mod riccati;
pub mod sim;
pub mod vehicle;

pub use error::{Error, Result};
pub use error_model::{compute_error, linearize, wrap_angle, LinearizedModel, PathError};
pub use mpc::{
    design_cost, design_default, Controller, CostMatrices, JointAnglePolytope, LqController, MpcConfig, MpcController,
    StepDiagnostics,
};
pub use path::{generate_figure_eight, generate_figure_eight_laps, generate_straight, NominalPath, PathSample};
pub use qp::{ActiveBound, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
pub use region::{fit_inner_polytope, sensing_region, stability_sweep, GridSpec, RegionGrid, SensingGeometry};
pub use sim::{run, run_suite, ControllerKind, ExperimentSpec, PathSpec, RunLog, RunStatus, SimContext};
pub use vehicle::{ControlInput, Pose, SegmentPoses, VehicleParams, VehicleState};
