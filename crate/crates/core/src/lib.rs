//! Projected Gauss-Newton solver for optimal tracking control and parameter
//! identification of ODE systems.

pub mod aux;
pub mod commands;
pub mod config;
pub mod error;
pub mod grid;
pub mod linearization;
pub mod model;
pub mod ode;
pub mod outer;
pub mod problem;
pub mod profile;

pub use error::{Error, Result};
pub use grid::{l2_inner, l2_norm, l2_norm_sq, GridMatrixFunction, GridSignal, TimeGrid, Trajectory};
pub use model::{
    check_jacobians, finite_difference_jacobians, input_to_output, input_to_state, Dims, InputPair, LinearModel, Model,
    ParameterUnits, QuarterCar, QuarterCarParams, QUARTER_CAR_P_REF,
};
pub use ode::{integrate_backward, integrate_forward, integrate_matrix_backward, integrate_symmetric_matrix_backward};
pub use linearization::{adjoint_apply, linearize, normal_equation_residual, sensitivity_apply, LinearizedModel};
pub use problem::{generate_reference, project, BoxBounds, CostBreakdown, TrackingProblem, Weights};
pub use aux::{
    assemble_riccati_data, aux_gradient, solve_aux_gd, solve_aux_riccati, AuxProblem, AuxSolution, GdSettings, InnerStop,
    RiccatiSolveArtifacts,
};
pub use outer::{
    cost_gradient, descent_certificates, direct_gradient_solve, gauss_newton_solve, CertificateSummary, CostGradient,
    DirectGdConfig, GaussNewtonConfig, InnerSolver, SolveReport, Termination,
};
pub use profile::{road_profile, RoadProfileSpec};
