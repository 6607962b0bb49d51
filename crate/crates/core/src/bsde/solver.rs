use rayon::prelude::*;
use serde::Serialize;

use super::regression::{fit_step, StepData, StepFit};
use super::solution::{BackwardDiagnostics, BackwardSolution, SolutionBundle, TerminalCondition, TerminalRule};
use crate::error::{Error, Result};
use crate::forward_sim::{
    simulate_window, ControlRule, FeedbackControl, ForwardConfig, InitialLaw, MeasureSource, NoiseBundle,
    ParticleEnsemble, PathTable, TimeGrid,
};
use crate::measures::{MeasureFlow, MeasureMoments};
use crate::mfg_solvers::InputPerturbation;
use crate::model::ModelSpec;

/// A forward-backward system on a window of the noise grid:
///
/// ```text
/// dX = (γb + I^b)dt + (γσ + I^σ)dW + (γσ̃ + I^σ̃)dW̃,   X_start = x0
/// dp = −(γH_x + I^f)dt + q dW + q̃ dW̃,                 p_end = γ·v(X_end, m_end) + I^g
/// u  = û(t, X, p, q, q̃)
/// ```
///
/// with m either frozen or the conditional law of X itself.
#[derive(Clone, Copy)]
pub struct ForwardBackwardSystem<'a> {
    pub spec: &'a ModelSpec,
    pub noise: &'a NoiseBundle,
    pub grid: TimeGrid,
    pub x0: &'a [f64],
    pub gamma: f64,
    pub forcing: Option<&'a InputPerturbation>,
    pub terminal: TerminalCondition,
    pub measure: MeasureSource<'a>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PicardOptions {
    /// Stop when the L²(dt×dP) control update falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub damping_floor: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 60,
            damping_floor: 0.25,
        }
    }
}

impl PicardOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    /// Default tolerance for a model: 1e-4 for linear-quadratic models,
    /// 1e-3 otherwise.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self::with_tol(if spec.is_linear_quadratic() { 1e-4 } else { 1e-3 })
    }
}

/// The feedback `x ↦ û(t, x, p̂(x), q̂(x), q̃̂(x))` built from the regression
/// fits of a backward pass.
pub struct AdjointPolicy<'a> {
    spec: &'a ModelSpec,
    grid: TimeGrid,
    gamma: f64,
    forcing: Option<&'a InputPerturbation>,
    fits: Vec<StepFit>,
    self_weight: f64,
}

impl<'a> AdjointPolicy<'a> {
    pub fn new(spec: &'a ModelSpec, grid: TimeGrid, gamma: f64, forcing: Option<&'a InputPerturbation>, fits: Vec<StepFit>) -> Self {
        Self {
            spec,
            grid,
            gamma,
            forcing,
            fits,
            self_weight: 0.0,
        }
    }

    /// Adds the self-influence term of a particle that carries weight `w` in
    /// the measure it sees.
    pub fn with_self_weight(mut self, w: f64) -> Self {
        self.self_weight = w;
        self
    }

    pub fn fits(&self) -> &[StepFit] {
        &self.fits
    }

    fn blend(&self, fresh: &[StepFit], theta: f64) -> Vec<StepFit> {
        self.fits.iter().zip(fresh).map(|(a, b)| a.blend(b, theta)).collect()
    }

    /// (u, p, q, q̃) at local step n.
    #[inline]
    fn evaluate(&self, n: usize, x: f64, m: &MeasureMoments, j: usize, k: usize) -> (f64, f64, f64, f64) {
        let fit = &self.fits[n];
        let t = self.grid.time(n);
        // fits regress on the mean of the others
        let w = self.self_weight;
        let mean = if w > 0.0 { (m.mean - w * x) / (1.0 - w) } else { m.mean };
        let y = fit.p_hat(x, mean);
        let q = fit.q_hat(x, mean);
        let qt = fit.q_tilde_hat(x, mean);
        let spec = self.spec;
        let u_pred = spec.minimize_hamiltonian(t, x, y, q, qt).unwrap_or(f64::NAN);
        let mut drive = self.gamma
            * (spec.hamiltonian_x(t, x, y, q, qt, u_pred, m)
                + spec.hamiltonian_self_influence(t, x, y, q, qt, u_pred, m, self.self_weight));
        if let Some(f) = self.forcing {
            drive += f.f.get(j, k, n);
        }
        let p = y + self.grid.dt() * drive;
        let u = spec.minimize_hamiltonian(t, x, p, q, qt).unwrap_or(f64::NAN);
        (u, p, q, qt)
    }
}

impl FeedbackControl for AdjointPolicy<'_> {
    fn control(&self, n: usize, x: f64, m: &MeasureMoments, j: usize, k: usize) -> f64 {
        self.evaluate(n - self.grid.offset(), x, m, j, k).0
    }
}

/// Backward induction for p, q, q̃ along a simulated ensemble, with the
/// measure argument read from `flow` (the others' flow when the system's
/// measure includes each particle's own atom).
pub fn backward_pass(sys: &ForwardBackwardSystem<'_>, ensemble: &ParticleEnsemble, flow: &MeasureFlow) -> Result<BackwardSolution> {
    let spec = sys.spec;
    let grid = sys.grid;
    let x = &ensemble.states;
    let u = &ensemble.controls;
    let (mp, kp) = (x.paths(), x.particles());
    let steps = grid.steps();
    if ensemble.grid != grid || flow.nodes() != grid.nodes() || flow.paths() != mp {
        return Err(Error::GridMismatch("ensemble, measure flow and system grid differ".into()));
    }
    let dt = grid.dt();
    let mut p = PathTable::zeros(mp, kp, steps + 1);
    let mut q = PathTable::zeros(mp, kp, steps);
    let mut qt = PathTable::zeros(mp, kp, steps);

    let w = sys.measure.self_weight();
    let own_terminal = w > 0.0 && sys.terminal.rule == TerminalRule::CostGradient;
    for j in 0..mp {
        let base = flow.moments(steps, j);
        for k in 0..kp {
            let xv = x.get(j, k, steps);
            let m = sys.measure.particle_moments(&base, xv);
            let mut v = sys.terminal.eval(spec, xv, &m);
            if own_terminal {
                v += spec.terminal_self_influence(xv, &m, w);
            }
            v *= sys.gamma;
            if let Some(f) = sys.forcing {
                v += f.g[j * kp + k];
            }
            p.set(j, k, steps, v);
        }
    }

    let mut fits = vec![StepFit::default(); steps];
    let mut diags = vec![Default::default(); steps];
    for n in (0..steps).rev() {
        let gn = grid.offset() + n;
        let means = flow.means_at(n);
        let dwc: Vec<f64> = (0..mp).map(|j| sys.noise.dw_common(j, gn)).collect();
        let xs = |j: usize| x.slice(j, n);
        let p_ref = &p;
        let ys = |j: usize| p_ref.slice(j, n + 1);
        let dws = |j: usize| sys.noise.dw(j, gn);
        let data = StepData {
            paths: mp,
            particles: kp,
            x: &xs,
            y: &ys,
            mean: &means,
            dw: &dws,
            dw_common: &dwc,
            dt,
        };
        let (fit, diag) = fit_step(&data);
        fits[n] = fit;
        diags[n] = diag;

        let t = grid.time(n);
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..mp)
            .into_par_iter()
            .map(|j| {
                let base = flow.moments(n, j);
                let xs = x.slice(j, n);
                let us = u.slice(j, n);
                let mut pr = vec![0.0; kp];
                let mut qr = vec![0.0; kp];
                let mut qtr = vec![0.0; kp];
                for k in 0..kp {
                    let xv = xs[k];
                    let m = sys.measure.particle_moments(&base, xv);
                    let y = fit.p_hat(xv, base.mean);
                    let qv = fit.q_hat(xv, base.mean);
                    let qtv = fit.q_tilde_hat(xv, base.mean);
                    let mut drive = sys.gamma
                        * (spec.hamiltonian_x(t, xv, y, qv, qtv, us[k], &m)
                            + spec.hamiltonian_self_influence(t, xv, y, qv, qtv, us[k], &m, w));
                    if let Some(f) = sys.forcing {
                        drive += f.f.get(j, k, n);
                    }
                    pr[k] = y + dt * drive;
                    qr[k] = qv;
                    qtr[k] = qtv;
                }
                (pr, qr, qtr)
            })
            .collect();
        for (j, (pr, qr, qtr)) in rows.into_iter().enumerate() {
            p.slice_mut(j, n).copy_from_slice(&pr);
            q.slice_mut(j, n).copy_from_slice(&qr);
            qt.slice_mut(j, n).copy_from_slice(&qtr);
        }
    }

    Ok(BackwardSolution {
        grid,
        p,
        q,
        q_tilde: qt,
        fits,
        diagnostics: BackwardDiagnostics { steps: diags },
    })
}

/// û evaluated pointwise along a backward solution.
fn pointwise_controls(spec: &ModelSpec, ens: &ParticleEnsemble, back: &BackwardSolution) -> Result<PathTable> {
    let grid = ens.grid;
    let x = &ens.states;
    let mut out = PathTable::zeros(x.paths(), x.particles(), grid.steps());
    for j in 0..x.paths() {
        for n in 0..grid.steps() {
            let t = grid.time(n);
            for k in 0..x.particles() {
                let u = spec.minimize_hamiltonian(t, x.get(j, k, n), back.p.get(j, k, n), back.q.get(j, k, n), back.q_tilde.get(j, k, n))?;
                out.set(j, k, n, u);
            }
        }
    }
    Ok(out)
}

fn forward(sys: &ForwardBackwardSystem<'_>, rule: ControlRule<'_>) -> Result<(ParticleEnsemble, MeasureFlow)> {
    let cfg = ForwardConfig {
        gamma: sys.gamma,
        forcing: sys.forcing,
        measure: sys.measure,
    };
    simulate_window(sys.spec, rule, sys.noise, sys.grid, sys.x0, &cfg)
}

/// Picard iteration on the control. Each sweep simulates the forward
/// equation under the current feedback (the initial rule on the first
/// sweep), runs the backward pass, and rebuilds the feedback from the new
/// fits, damped by θ (halved whenever the residual grows, never below the
/// floor). Stops when the control update is below `tol`.
///
/// With a self-consistent measure the flow is recomputed every sweep, and
/// three consecutive increases of the flow distance abort the solve.
pub fn solve_system(sys: &ForwardBackwardSystem<'_>, init: ControlRule<'_>, opts: &PicardOptions) -> Result<SolutionBundle> {
    let dt = sys.grid.dt();
    if sys.gamma == 0.0 {
        // no coupling: X does not depend on u
        let (mut ens, flow) = forward(sys, ControlRule::Zero)?;
        let m = sys.measure.flow().cloned().unwrap_or(flow);
        let back = backward_pass(sys, &ens, &m)?;
        ens.controls = pointwise_controls(sys.spec, &ens, &back)?;
        return Ok(SolutionBundle::new(ens, back, m, vec![0.0]));
    }

    let mut policy: Option<AdjointPolicy<'_>> = None;
    let mut theta = 1.0_f64;
    let mut history = Vec::new();
    let mut flow_history = Vec::new();
    let mut prev_flow: Option<MeasureFlow> = None;
    let mut rising = 0;

    for _ in 0..opts.max_iter {
        let rule = match &policy {
            Some(p) => ControlRule::Feedback(p),
            None => init,
        };
        let (ens, flow) = forward(sys, rule)?;
        if let MeasureSource::SelfConsistent = sys.measure {
            if let Some(prev) = &prev_flow {
                let d = flow.distance(prev)?;
                if let Some(&last) = flow_history.last() {
                    rising = if d > last && d > 1e-10 { rising + 1 } else { 0 };
                }
                flow_history.push(d);
                if rising >= 3 {
                    return Err(Error::Diverged {
                        iterations: history.len() + 1,
                        history: flow_history,
                    });
                }
            }
        }
        let m_used = sys.measure.flow().unwrap_or(&flow);
        let back = backward_pass(sys, &ens, m_used)?;
        let fresh = AdjointPolicy::new(sys.spec, sys.grid, sys.gamma, sys.forcing, back.fits.clone())
            .with_self_weight(sys.measure.self_weight());
        let proposal = proposal_controls(&fresh, &ens, m_used, sys.measure);
        let res = proposal.l2_distance(&ens.controls, dt);
        if !res.is_finite() {
            return Err(Error::Diverged {
                iterations: history.len() + 1,
                history,
            });
        }
        if let Some(&last) = history.last() {
            if res > last {
                theta = (theta * 0.5).max(opts.damping_floor);
            }
        }
        history.push(res);
        if res <= opts.tol {
            let m = sys.measure.flow().cloned().unwrap_or(flow);
            return Ok(SolutionBundle::new(ens, back, m, history));
        }
        policy = Some(match policy {
            Some(old) if theta < 1.0 => {
                let fits = old.blend(&back.fits, theta);
                AdjointPolicy::new(sys.spec, sys.grid, sys.gamma, sys.forcing, fits)
                    .with_self_weight(sys.measure.self_weight())
            }
            _ => fresh,
        });
        if let MeasureSource::SelfConsistent = sys.measure {
            prev_flow = Some(flow);
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// The controls the fresh feedback would apply at the simulated states.
fn proposal_controls(policy: &AdjointPolicy<'_>, ens: &ParticleEnsemble, flow: &MeasureFlow, source: MeasureSource<'_>) -> PathTable {
    let x = &ens.states;
    let (mp, kp) = (x.paths(), x.particles());
    let steps = ens.grid.steps();
    let rows: Vec<Vec<f64>> = (0..mp)
        .into_par_iter()
        .map(|j| {
            let mut row = Vec::with_capacity(steps * kp);
            for n in 0..steps {
                let base = flow.moments(n, j);
                for (k, &xv) in x.slice(j, n).iter().enumerate() {
                    row.push(policy.evaluate(n, xv, &source.particle_moments(&base, xv), j, k).0);
                }
            }
            row
        })
        .collect();
    PathTable::from_fn(mp, kp, steps, |j, n, k| rows[j][n * kp + k])
}

/// Adjoint of a given controlled ensemble under a frozen measure flow.
pub fn solve_bsde_given_control(
    spec: &ModelSpec,
    ensemble: &ParticleEnsemble,
    m: &MeasureFlow,
    terminal: TerminalCondition,
    noise: &NoiseBundle,
) -> Result<BackwardSolution> {
    let x0 = ensemble.states.column(0);
    let sys = ForwardBackwardSystem {
        spec,
        noise,
        grid: ensemble.grid,
        x0: &x0,
        gamma: 1.0,
        forcing: None,
        terminal,
        measure: MeasureSource::Frozen(m),
    };
    backward_pass(&sys, ensemble, m)
}

/// Optimal control of the single-agent problem against a frozen flow m.
pub fn solve_fbsde_given_m(
    spec: &ModelSpec,
    m: &MeasureFlow,
    xi0: &InitialLaw,
    terminal: TerminalCondition,
    noise: &NoiseBundle,
    opts: &PicardOptions,
) -> Result<SolutionBundle> {
    let x0 = xi0.sample(noise);
    let sys = ForwardBackwardSystem {
        spec,
        noise,
        grid: noise.grid(),
        x0: &x0,
        gamma: 1.0,
        forcing: None,
        terminal,
        measure: MeasureSource::Frozen(m),
    };
    solve_system(&sys, ControlRule::Zero, opts)
}
