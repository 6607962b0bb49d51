//! Adjoint BSDE and coupled FBSDE solvers by least-squares Monte Carlo.

pub mod regression;
mod solution;
mod solver;

pub use regression::{StepDiagnostics, StepFit};
pub use solution::{
    s_distance, s_norm, BackwardDiagnostics, BackwardSolution, SolutionBundle, TerminalCheck, TerminalCondition,
    TerminalRule,
};
pub use solver::{
    backward_pass, solve_bsde_given_control, solve_fbsde_given_m, solve_system, AdjointPolicy, ForwardBackwardSystem,
    PicardOptions,
};
