use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{solve_continuation, solve_stitched, ContinuationOptions, StitchOptions};
use crate::bsde::{PicardOptions, SolutionBundle};
use crate::error::Result;
use crate::forward_sim::{InitialLaw, NoiseBundle, PathTable};
use crate::model::{sufficient_condition_report, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Continuation,
    Stitched,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Continuation => "continuation",
            Method::Stitched => "stitched",
        }
    }
}

/// Runs `method` with default options and the given Picard settings,
/// optionally started from `init`.
pub fn solve_with(
    method: Method,
    spec: &ModelSpec,
    xi0: &InitialLaw,
    noise: &NoiseBundle,
    picard: &PicardOptions,
    init: Option<PathTable>,
) -> Result<SolutionBundle> {
    match method {
        Method::Continuation => {
            let opts = ContinuationOptions {
                picard: *picard,
                init,
                ..ContinuationOptions::default()
            };
            solve_continuation(spec, xi0, noise, &opts).map(|(b, _)| b)
        }
        Method::Stitched => {
            let opts = StitchOptions {
                picard: *picard,
                init,
                ..StitchOptions::default()
            };
            solve_stitched(spec, xi0, noise, &opts).map(|(b, _)| b)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub method: Method,
    pub starts: usize,
    pub tol: f64,
    /// Pairwise rms control distances, in start order.
    pub distances: Vec<f64>,
    pub max_distance: f64,
    /// Whether L_m/C_f is below the conservative δ.
    pub condition_holds: bool,
    /// Set when some start failed to converge.
    pub inconclusive: Option<String>,
    pub passed: bool,
}

/// Control table with i.i.d. N(0, scale²) entries, reproducible from `seed`.
pub fn random_controls(paths: usize, particles: usize, steps: usize, scale: f64, seed: u64) -> PathTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = PathTable::zeros(paths, particles, steps);
    for j in 0..paths {
        for n in 0..steps {
            for v in t.slice_mut(j, n) {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    t
}

/// Solves from `starts` initializations (the first from zero, the others
/// from random control tables) and compares the converged controls. With
/// `first` given, it stands in for the zero-start solve.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_check(
    method: Method,
    spec: &ModelSpec,
    xi0: &InitialLaw,
    noise: &NoiseBundle,
    starts: usize,
    picard: &PicardOptions,
    seed: u64,
    first: Option<&SolutionBundle>,
) -> UniquenessReport {
    let cond = sufficient_condition_report(spec);
    let mut report = UniquenessReport {
        method,
        starts,
        tol: picard.tol,
        distances: Vec::new(),
        max_distance: 0.0,
        condition_holds: cond.continuation_ok,
        inconclusive: None,
        passed: false,
    };
    let (mp, kp, steps) = (noise.paths(), noise.particles(), noise.grid().steps());
    let mut controls: Vec<PathTable> = Vec::with_capacity(starts);
    for s in 0..starts {
        let solved = match (s, first) {
            (0, Some(b)) => Ok(b.clone()),
            (0, None) => solve_with(method, spec, xi0, noise, picard, None),
            _ => {
                let init = random_controls(mp, kp, steps, 1.0, seed.wrapping_add(s as u64));
                solve_with(method, spec, xi0, noise, picard, Some(init))
            }
        };
        match solved {
            Ok(b) => controls.push(b.ensemble.controls),
            Err(e) => {
                report.inconclusive = Some(format!("start {s}: {e}"));
                return report;
            }
        }
    }
    for a in 0..controls.len() {
        for b in a + 1..controls.len() {
            report.distances.push(controls[a].rms_distance(&controls[b]));
        }
    }
    report.max_distance = report.distances.iter().copied().fold(0.0, f64::max);
    report.passed = report.max_distance <= 5.0 * picard.tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_sim::TimeGrid;

    #[test]
    fn single_start_has_zero_distance() {
        let spec = ModelSpec::preset_default("lq").unwrap();
        let noise = NoiseBundle::new(1, 4, 16, TimeGrid::new(1.0, 8).unwrap()).unwrap();
        let xi0 = InitialLaw::Constant { value: 1.0 };
        let r = uniqueness_check(Method::Stitched, &spec, &xi0, &noise, 1, &PicardOptions::default(), 0, None);
        assert!(r.inconclusive.is_none(), "{r:?}");
        assert_eq!(r.max_distance, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn random_controls_are_reproducible() {
        let a = random_controls(2, 3, 4, 1.0, 9);
        assert_eq!(a, random_controls(2, 3, 4, 1.0, 9));
        assert_ne!(a, random_controls(2, 3, 4, 1.0, 10));
    }
}
