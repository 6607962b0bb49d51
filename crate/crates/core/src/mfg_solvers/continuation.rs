//! Continuation in the coupling strength γ.
//!
//! From a solution Θ of E(γ, ξ, 0), the solution at γ + η is the fixed point
//! of Θ ↦ Θ′, where Θ′ solves E(γ, ξ, I′(Θ)) with the frozen inputs
//! I′ = η·(b, σ, σ̃, H_x, g_x)(Θ). The map contracts for small η; the step is
//! adapted from the observed ratio of successive control updates.

use rayon::prelude::*;
use serde::Serialize;

use super::gamma::solve_e_gamma;
use super::InputPerturbation;
use crate::bsde::{PicardOptions, SolutionBundle};
use crate::error::{Error, Result};
use crate::forward_sim::{InitialLaw, NoiseBundle, PathTable};
use crate::model::ModelSpec;

/// Step ratio at or above which η is halved.
pub const MAX_RATIO: f64 = 0.9;
/// Smallest admissible η.
pub const MIN_ETA: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationOptions {
    pub eta0: f64,
    pub picard: PicardOptions,
    /// Iteration budget of the fixed point at each γ-step.
    pub max_outer: usize,
    /// Controls substituted into the γ = 0 solution before the first step,
    /// used to start the iteration from a different point.
    #[serde(skip)]
    pub init: Option<PathTable>,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            eta0: 0.25,
            picard: PicardOptions::default(),
            max_outer: 40,
            init: None,
        }
    }
}

/// One attempted γ-step.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuationStep {
    pub gamma_from: f64,
    pub eta: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// Largest ratio of successive residuals above the noise floor.
    pub ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationState {
    pub gamma: f64,
    pub eta: f64,
    pub history: Vec<ContinuationStep>,
    /// Control residuals of the closing solve at γ = 1.
    pub polish: Vec<f64>,
    #[serde(skip)]
    pub bundle: Option<SolutionBundle>,
}

impl ContinuationState {
    /// γ values reached, in order.
    pub fn gammas(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.gamma_from + s.eta)
            .collect()
    }

    pub fn max_accepted_ratio(&self) -> f64 {
        self.history
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.ratio)
            .fold(0.0, f64::max)
    }
}

/// `η·(b, σ, σ̃, H_x)` along Θ and `η·g_x(X_T, m_T)` at the end.
pub fn continuation_input(spec: &ModelSpec, theta: &SolutionBundle, eta: f64) -> InputPerturbation {
    let grid = theta.grid();
    let (x, u) = (theta.states(), theta.controls());
    let back = &theta.backward;
    let (mp, kp, steps) = (x.paths(), x.particles(), grid.steps());
    let rows: Vec<[Vec<f64>; 4]> = (0..mp)
        .into_par_iter()
        .map(|j| {
            let mut out: [Vec<f64>; 4] = Default::default();
            for v in out.iter_mut() {
                v.reserve(steps * kp);
            }
            for n in 0..steps {
                let t = grid.time(n);
                let m = theta.measure.moments(n, j);
                for k in 0..kp {
                    let (xv, uv) = (x.get(j, k, n), u.get(j, k, n));
                    let (p, q, qt) = (back.p.get(j, k, n), back.q.get(j, k, n), back.q_tilde.get(j, k, n));
                    out[0].push(eta * spec.drift(t, xv, uv, &m));
                    out[1].push(eta * spec.vol(t, xv, uv, &m));
                    out[2].push(eta * spec.vol_common(t, xv, uv, &m));
                    out[3].push(eta * spec.hamiltonian_x(t, xv, p, q, qt, uv, &m));
                }
            }
            out
        })
        .collect();
    let table = |c: usize| PathTable::from_fn(mp, kp, steps, |j, n, k| rows[j][c][n * kp + k]);
    let mut g = Vec::with_capacity(mp * kp);
    for j in 0..mp {
        let m = theta.measure.moments(steps, j);
        for k in 0..kp {
            g.push(eta * spec.cost.gx(x.get(j, k, steps), &m));
        }
    }
    InputPerturbation {
        b: table(0),
        sigma: table(1),
        sigma_tilde: table(2),
        f: table(3),
        g,
    }
}

/// Per-iteration contraction rate: the largest `(r_{i+2}/r_i)^{1/2}` with
/// `r_i ≥ 10·tol`, or `r_1/r_0` while only two residuals exist.
///
/// Forward and backward halves update with a one-iterate lag, so residuals
/// tend to fall in pairs and a single-step ratio can sit near 1 while the
/// iteration contracts quickly over two steps.
pub(crate) fn observed_ratio(residuals: &[f64], tol: f64) -> f64 {
    if residuals.len() < 3 {
        return residuals
            .windows(2)
            .filter(|w| w[0] >= 10.0 * tol)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max);
    }
    residuals
        .windows(3)
        .filter(|w| w[0] >= 10.0 * tol)
        .map(|w| (w[2] / w[0]).sqrt())
        .fold(0.0, f64::max)
}

/// Fixed point at γ + η starting from Θ at γ.
fn step(
    spec: &ModelSpec,
    theta: &SolutionBundle,
    gamma: f64,
    eta: f64,
    x0: &[f64],
    noise: &NoiseBundle,
    opts: &ContinuationOptions,
) -> (Option<SolutionBundle>, ContinuationStep) {
    let dt = theta.grid().dt();
    let tol = opts.picard.tol;
    // the inner solve must be tighter than the outer test it feeds
    let inner = PicardOptions {
        tol: 0.25 * tol,
        ..opts.picard
    };
    let mut record = ContinuationStep {
        gamma_from: gamma,
        eta,
        iterations: 0,
        residuals: Vec::new(),
        ratio: 0.0,
        accepted: false,
    };
    let mut cur = theta.clone();
    for _ in 0..opts.max_outer {
        let input = continuation_input(spec, &cur, eta);
        let next = match solve_e_gamma(spec, gamma, x0, Some(&input), Some(&cur), noise, &inner) {
            Ok(b) => b,
            Err(_) => return (None, record),
        };
        let d = next.controls().l2_distance(cur.controls(), dt);
        record.iterations += 1;
        record.residuals.push(d);
        record.ratio = observed_ratio(&record.residuals, tol);
        cur = next;
        if !d.is_finite() || record.ratio >= MAX_RATIO {
            return (None, record);
        }
        if d <= tol {
            record.accepted = true;
            return (Some(cur), record);
        }
    }
    (None, record)
}

/// Method One: continuation from the decoupled system at γ = 0 to the
/// mean-field FBSDE at γ = 1, closed by a direct solve at γ = 1 warm-started
/// from the continuation endpoint.
pub fn solve_continuation(
    spec: &ModelSpec,
    xi0: &InitialLaw,
    noise: &NoiseBundle,
    opts: &ContinuationOptions,
) -> Result<(SolutionBundle, ContinuationState)> {
    if !(opts.eta0 > 0.0 && opts.eta0 <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "eta0".into(),
            reason: format!("{} outside (0, 1]", opts.eta0),
        });
    }
    let x0 = xi0.sample(noise);
    let mut theta = solve_e_gamma(spec, 0.0, &x0, None, None, noise, &opts.picard)?;
    if let Some(init) = &opts.init {
        if !init.same_shape(theta.controls()) {
            return Err(Error::DimensionMismatch("initial control table does not match the ensemble".into()));
        }
        theta.ensemble.controls = init.clone();
    }
    let mut state = ContinuationState {
        gamma: 0.0,
        eta: opts.eta0,
        history: Vec::new(),
        polish: Vec::new(),
        bundle: None,
    };
    let mut clean = 0;
    while state.gamma < 1.0 {
        let eta = state.eta.min(1.0 - state.gamma);
        let (next, record) = step(spec, &theta, state.gamma, eta, &x0, noise, opts);
        state.history.push(record);
        match next {
            Some(b) => {
                theta = b;
                state.gamma = if eta >= 1.0 - state.gamma { 1.0 } else { state.gamma + eta };
                clean += 1;
                if clean >= 2 {
                    state.eta = (state.eta * 2.0).min(opts.eta0);
                    clean = 0;
                }
            }
            None => {
                clean = 0;
                state.eta *= 0.5;
                if state.eta < MIN_ETA {
                    return Err(Error::ContinuationStalled {
                        gamma: state.gamma,
                        eta: state.eta,
                    });
                }
            }
        }
    }
    let bundle = polish(spec, &theta, &x0, noise, &opts.picard)?;
    state.polish = bundle.history.clone();
    state.bundle = Some(bundle.clone());
    Ok((bundle, state))
}

/// Direct γ = 1 solve warm-started from a bundle: turns the continuation
/// endpoint, whose feedback still carries frozen inputs, into a bundle with
/// a plain γ = 1 feedback. From a converged bundle it stops after one sweep.
pub fn polish(
    spec: &ModelSpec,
    warm: &SolutionBundle,
    x0: &[f64],
    noise: &NoiseBundle,
    picard: &PicardOptions,
) -> Result<SolutionBundle> {
    solve_e_gamma(spec, 1.0, x0, None, Some(warm), noise, picard)
}
