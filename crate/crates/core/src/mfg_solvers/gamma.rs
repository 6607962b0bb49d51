use crate::bsde::{solve_system, ForwardBackwardSystem, PicardOptions, SolutionBundle, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward_sim::{ControlRule, MeasureSource, NoiseBundle};
use crate::model::ModelSpec;

use super::InputPerturbation;

/// Solves E(γ, ξ, I): the γ-scaled mean-field FBSDE with additive inputs,
/// the conditional law recomputed from the particles every sweep. At γ = 0
/// forward and backward equations decouple and one pass suffices.
///
/// `warm_start` supplies the controls applied on the first sweep.
pub fn solve_e_gamma(
    spec: &ModelSpec,
    gamma: f64,
    x0: &[f64],
    input: Option<&InputPerturbation>,
    warm_start: Option<&SolutionBundle>,
    noise: &NoiseBundle,
    opts: &PicardOptions,
) -> Result<SolutionBundle> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter {
            name: "gamma".into(),
            reason: format!("{gamma} outside [0, 1]"),
        });
    }
    let sys = ForwardBackwardSystem {
        spec,
        noise,
        grid: noise.grid(),
        x0,
        gamma,
        forcing: input,
        terminal: TerminalCondition::cost_gradient(spec),
        measure: MeasureSource::SelfConsistent,
    };
    let init = match warm_start {
        Some(b) => ControlRule::Table(b.controls()),
        None => ControlRule::Zero,
    };
    solve_system(&sys, init, opts)
}
