//! Time grid, reproducible Brownian increments and the conditional
//! McKean–Vlasov particle system.

mod ensemble;
mod grid;
mod noise;
mod simulate;

pub use ensemble::{statistics, EnsembleStatistics, InitialLaw, ParticleEnsemble, PathTable};
pub use grid::TimeGrid;
pub use noise::{stream, NoiseBundle};
pub use simulate::{
    simulate_forward, simulate_window, ControlRule, FeedbackControl, ForwardConfig, MeasureSource,
};
