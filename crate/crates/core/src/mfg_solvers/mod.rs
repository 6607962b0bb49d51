//! Mean-field FBSDE solvers: continuation in the coupling strength, and
//! small-interval fixed points stitched by decoupling fields.

mod continuation;
mod gamma;
mod input;
mod stitching;
mod uniqueness;

pub use continuation::{
    continuation_input, polish, solve_continuation, ContinuationOptions, ContinuationState, ContinuationStep,
    MAX_RATIO, MIN_ETA,
};
pub use gamma::solve_e_gamma;
pub use input::InputPerturbation;
pub use stitching::{
    fit_decoupling_field, interval_fixed_point, picard_map_phi, solve_stitched, DecouplingField, IntervalReport,
    StitchOptions, StitchReport, MAX_HALVINGS,
};
pub use uniqueness::{random_controls, solve_with, uniqueness_check, Method, UniquenessReport};
