//! Small-interval fixed points stitched backward in time.
//!
//! On [s, τ] the map Φ takes a control û, simulates the conditional
//! McKean–Vlasov system under û to get m̂, and returns the optimal control
//! of the FBSDE with m̂ frozen and terminal p_τ = v(X_τ, m̂_τ). For short
//! intervals Φ contracts. Intervals are solved from the last one backward,
//! each fitting an affine decoupling field at its left end that becomes the
//! terminal condition of the interval before it. A forward sweep from the
//! actual initial law then solves every interval again from the states
//! produced by its predecessor.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::continuation::{observed_ratio, MAX_RATIO};
use crate::bsde::{
    solve_system, BackwardDiagnostics, BackwardSolution, ForwardBackwardSystem, PicardOptions, SolutionBundle,
    StepFit, TerminalCheck, TerminalCondition,
};
use crate::error::{Error, Result};
use crate::forward_sim::{
    simulate_forward, simulate_window, ControlRule, ForwardConfig, InitialLaw, MeasureSource, NoiseBundle,
    ParticleEnsemble, PathTable, TimeGrid,
};
use crate::measures::MeasureFlow;
use crate::model::{ModelSpec, TOL_MONO};

/// Halvings of the interval length allowed before giving up.
pub const MAX_HALVINGS: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct StitchOptions {
    pub picard: PicardOptions,
    /// Initial number of intervals.
    pub intervals: usize,
    /// Φ-iteration budget per interval.
    pub max_iter: usize,
    /// Standard deviation of the per-path shifts added to the provisional
    /// boundary states, so that the conditional mean varies enough to fit
    /// the field's m̄ coefficient.
    pub boundary_spread: f64,
    /// Initial controls on [0, T], used to start every interval's iteration
    /// from a different point.
    #[serde(skip)]
    pub init: Option<PathTable>,
}

impl Default for StitchOptions {
    fn default() -> Self {
        Self {
            picard: PicardOptions::default(),
            intervals: 4,
            max_iter: 40,
            boundary_spread: 0.5,
            init: None,
        }
    }
}

/// Affine fit `v(x, m) ≈ α0 + α1·x + α2·mean(m)` of the adjoint at an
/// interval's left end.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecouplingField {
    pub tau: f64,
    /// Node index on the full grid.
    pub node: usize,
    pub alpha: [f64; 3],
    /// Declared Lipschitz constant the field is checked against.
    pub c_v: f64,
    pub monotone: bool,
    pub r2: f64,
    /// Largest per-path-pair ratio of adjoint to state differences in the
    /// solved samples, conditional expectations taken by averaging over the
    /// particles of a path.
    pub empirical_lipschitz: f64,
    pub check: TerminalCheck,
}

impl DecouplingField {
    pub fn slope(&self) -> f64 {
        self.alpha[1]
    }

    pub fn terminal(&self) -> TerminalCondition {
        TerminalCondition {
            c_v: self.c_v,
            monotone: self.monotone,
            ..TerminalCondition::affine(self.alpha[0], self.alpha[1], self.alpha[2])
        }
    }

    /// Slope and Lipschitz invariants.
    pub fn is_valid(&self) -> bool {
        self.alpha[1] >= -TOL_MONO && self.check.lipschitz_ok
    }
}

/// Least squares of y on {1, x, m̄}. The m̄ column is left out when the
/// conditional mean does not vary.
fn affine_fit(x: &[f64], mb: &[f64], y: &[f64]) -> ([f64; 3], f64) {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, mm, my) = (mean(x), mean(mb), mean(y));
    let mut g = Matrix3::zeros();
    let mut b = Vector3::zeros();
    let mut syy = 0.0;
    for i in 0..x.len() {
        let z = Vector3::new(1.0, x[i] - mx, mb[i] - mm);
        g += z * z.transpose();
        b += z * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    let var_m = g[(2, 2)] / n;
    let use_m = var_m > 1e-18 * (1.0 + mm * mm);
    let var_x = g[(1, 1)] / n;
    let use_x = var_x > 1e-18 * (1.0 + mx * mx);
    let (a1, a2) = match (use_x, use_m) {
        (true, true) => {
            let det = g[(1, 1)] * g[(2, 2)] - g[(1, 2)] * g[(1, 2)];
            if det.abs() <= 1e-12 * g[(1, 1)] * g[(2, 2)] {
                (b[1] / g[(1, 1)], 0.0)
            } else {
                (
                    (b[1] * g[(2, 2)] - b[2] * g[(1, 2)]) / det,
                    (b[2] * g[(1, 1)] - b[1] * g[(1, 2)]) / det,
                )
            }
        }
        (true, false) => (b[1] / g[(1, 1)], 0.0),
        (false, true) => (0.0, b[2] / g[(2, 2)]),
        (false, false) => (0.0, 0.0),
    };
    let ss_res = syy - a1 * b[1] - a2 * b[2];
    let r2 = if syy > 0.0 { 1.0 - ss_res.max(0.0) / syy } else { 1.0 };
    ([my - a1 * mx - a2 * mm, a1, a2], r2)
}

/// Fits the decoupling field at node 0 of an interval solution.
pub fn fit_decoupling_field(spec: &ModelSpec, bundle: &SolutionBundle, node: usize, c_v: f64) -> DecouplingField {
    let x = bundle.states();
    let (mp, kp) = (x.paths(), x.particles());
    let xs = x.column(0);
    let ps = bundle.backward.p.column(0);
    let means = bundle.measure.means_at(0);
    let mb: Vec<f64> = (0..mp * kp).map(|i| means[i / kp]).collect();
    let (alpha, r2) = affine_fit(&xs, &mb, &ps);

    let mut lip = 0.0_f64;
    for j in 1..mp {
        let sorted = |j: usize| {
            let mut idx: Vec<usize> = (0..kp).collect();
            idx.sort_by(|&a, &b| x.get(j, a, 0).total_cmp(&x.get(j, b, 0)));
            idx
        };
        let (ia, ib) = (sorted(j - 1), sorted(j));
        let (mut num, mut den) = (0.0, 0.0);
        for (&a, &b) in ia.iter().zip(&ib) {
            num += (bundle.backward.p.get(j - 1, a, 0) - bundle.backward.p.get(j, b, 0)).powi(2);
            den += (x.get(j - 1, a, 0) - x.get(j, b, 0)).powi(2);
        }
        den = den / kp as f64 + (means[j - 1] - means[j]).powi(2);
        if den > 0.0 {
            lip = lip.max((num / kp as f64 / den).sqrt());
        }
    }
    let monotone = alpha[1] >= -TOL_MONO;
    let cond = TerminalCondition {
        c_v,
        monotone: true,
        ..TerminalCondition::affine(alpha[0], alpha[1], alpha[2])
    };
    DecouplingField {
        tau: bundle.grid().time(0),
        node,
        alpha,
        c_v,
        monotone,
        r2,
        empirical_lipschitz: lip,
        check: cond.check(spec, 5.0, TOL_MONO),
    }
}

/// Φ on the window `grid`: simulate under `u_hat` from `x_s`, freeze the
/// resulting conditional law, and solve the optimal control problem against
/// it with terminal `terminal`. The returned bundle holds the new controls.
pub fn picard_map_phi(
    spec: &ModelSpec,
    u_hat: ControlRule<'_>,
    grid: TimeGrid,
    x_s: &[f64],
    terminal: TerminalCondition,
    noise: &NoiseBundle,
    opts: &PicardOptions,
) -> Result<SolutionBundle> {
    let (_, m_hat) = simulate_window(spec, u_hat, noise, grid, x_s, &ForwardConfig::default())?;
    let sys = ForwardBackwardSystem {
        spec,
        noise,
        grid,
        x0: x_s,
        gamma: 1.0,
        forcing: None,
        terminal,
        measure: MeasureSource::Frozen(&m_hat),
    };
    solve_system(&sys, u_hat, opts)
}

/// Fixed point of Φ on one interval.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalReport {
    pub start: f64,
    pub end: f64,
    pub residuals: Vec<f64>,
    pub ratio: f64,
    pub converged: bool,
}

pub fn interval_fixed_point(
    spec: &ModelSpec,
    grid: TimeGrid,
    x_s: &[f64],
    terminal: TerminalCondition,
    noise: &NoiseBundle,
    picard: &PicardOptions,
    max_iter: usize,
    init: Option<&PathTable>,
) -> (Result<SolutionBundle>, IntervalReport) {
    let tol = picard.tol;
    let inner = PicardOptions {
        tol: 0.25 * tol,
        ..*picard
    };
    let mut report = IntervalReport {
        start: grid.start(),
        end: grid.end(),
        residuals: Vec::new(),
        ratio: 0.0,
        converged: false,
    };
    let (mp, kp) = (noise.paths(), noise.particles());
    let mut u = init.cloned().unwrap_or_else(|| PathTable::zeros(mp, kp, grid.steps()));
    for _ in 0..max_iter {
        let b = match picard_map_phi(spec, ControlRule::Table(&u), grid, x_s, terminal, noise, &inner) {
            Ok(b) => b,
            Err(e) => return (Err(e), report),
        };
        let d = b.controls().l2_distance(&u, grid.dt());
        report.residuals.push(d);
        report.ratio = observed_ratio(&report.residuals, tol);
        if !d.is_finite() || report.ratio > MAX_RATIO {
            let e = Error::NotConverged {
                iterations: report.residuals.len(),
                last: d,
                history: report.residuals.clone(),
            };
            return (Err(e), report);
        }
        if d <= tol {
            report.converged = true;
            return (Ok(b), report);
        }
        u = b.ensemble.controls;
    }
    let e = Error::NotConverged {
        iterations: max_iter,
        last: report.residuals.last().copied().unwrap_or(f64::NAN),
        history: report.residuals.clone(),
    };
    (Err(e), report)
}

#[derive(Debug, Clone, Serialize)]
pub struct StitchReport {
    pub halvings: usize,
    /// Interval boundaries as node indices.
    pub boundaries: Vec<usize>,
    pub backward: Vec<IntervalReport>,
    pub forward: Vec<IntervalReport>,
    /// Fields fitted in the forward sweep, at every interior boundary.
    pub fields: Vec<DecouplingField>,
    /// Fields fitted in the backward sweep and used as terminal conditions.
    pub backward_fields: Vec<DecouplingField>,
}

impl StitchReport {
    pub fn max_ratio(&self) -> f64 {
        self.backward
            .iter()
            .chain(&self.forward)
            .map(|r| r.ratio)
            .fold(0.0, f64::max)
    }
}

/// Boundaries `0 = n_0 < … < n_I = N` built from the end with `len` steps
/// per interval; the first interval takes the remainder.
fn partition(steps: usize, len: usize) -> Vec<usize> {
    let mut b = vec![steps];
    let mut n = steps;
    while n > len {
        n -= len;
        b.push(n);
    }
    b.push(0);
    b.reverse();
    b
}

fn provisional_states(spec: &ModelSpec, xi0: &InitialLaw, noise: &NoiseBundle, spread: f64) -> Result<ParticleEnsemble> {
    let (mut ens, _) = simulate_forward(spec, ControlRule::Zero, noise, xi0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed() ^ 0x5717_c4ed);
    let normal = Normal::new(0.0, spread).map_err(|e| Error::InvalidParameter {
        name: "boundary_spread".into(),
        reason: e.to_string(),
    })?;
    let steps = ens.grid.steps();
    for j in 0..ens.paths() {
        let shift = normal.sample(&mut rng);
        for n in 1..=steps {
            for v in ens.states.slice_mut(j, n) {
                *v += shift;
            }
        }
    }
    Ok(ens)
}

fn attempt(
    spec: &ModelSpec,
    xi0: &InitialLaw,
    noise: &NoiseBundle,
    opts: &StitchOptions,
    len: usize,
    halvings: usize,
) -> std::result::Result<(SolutionBundle, StitchReport), (Error, f64, f64)> {
    let grid = noise.grid();
    let bounds = partition(grid.steps(), len);
    let c_v = crate::model::sufficient_condition_report(spec).c_v;
    let fail = |e: Error, a: usize, b: usize| (e, grid.time(a), grid.time(b));
    let init_window = |a: usize, b: usize| opts.init.as_ref().map(|t| t.window(a, b));

    let provisional = provisional_states(spec, xi0, noise, opts.boundary_spread).map_err(|e| fail(e, 0, grid.steps()))?;
    let mut report = StitchReport {
        halvings,
        boundaries: bounds.clone(),
        backward: Vec::new(),
        forward: Vec::new(),
        fields: Vec::new(),
        backward_fields: Vec::new(),
    };

    // terminal[i] is the terminal condition of interval i
    let count = bounds.len() - 1;
    let mut terminal = vec![TerminalCondition::cost_gradient(spec); count];
    for i in (1..count).rev() {
        let (a, b) = (bounds[i], bounds[i + 1]);
        let x_s = provisional.states.column(a);
        let init = init_window(a, b);
        let (res, rep) =
            interval_fixed_point(spec, grid.window(a, b), &x_s, terminal[i], noise, &opts.picard, opts.max_iter, init.as_ref());
        report.backward.push(rep);
        let sol = res.map_err(|e| fail(e, a, b))?;
        let field = fit_decoupling_field(spec, &sol, a, c_v);
        terminal[i - 1] = field.terminal();
        report.backward_fields.push(field);
    }
    report.backward_fields.reverse();

    let (mp, kp, steps) = (noise.paths(), noise.particles(), grid.steps());
    let mut states = PathTable::zeros(mp, kp, steps + 1);
    let mut controls = PathTable::zeros(mp, kp, steps);
    let mut p = PathTable::zeros(mp, kp, steps + 1);
    let mut q = PathTable::zeros(mp, kp, steps);
    let mut qt = PathTable::zeros(mp, kp, steps);
    let mut fits: Vec<StepFit> = Vec::with_capacity(steps);
    let mut diags = Vec::with_capacity(steps);
    let mut history = Vec::new();
    let mut x_s = xi0.sample(noise);
    for i in 0..count {
        let (a, b) = (bounds[i], bounds[i + 1]);
        let init = init_window(a, b);
        let (res, rep) =
            interval_fixed_point(spec, grid.window(a, b), &x_s, terminal[i], noise, &opts.picard, opts.max_iter, init.as_ref());
        history.extend(&rep.residuals);
        report.forward.push(rep);
        let sol = res.map_err(|e| fail(e, a, b))?;
        if i > 0 {
            report.fields.push(fit_decoupling_field(spec, &sol, a, c_v));
        }
        states.write_window(a, sol.states());
        controls.write_window(a, sol.controls());
        p.write_window(a, &sol.backward.p);
        q.write_window(a, &sol.backward.q);
        qt.write_window(a, &sol.backward.q_tilde);
        fits.extend_from_slice(&sol.backward.fits);
        diags.extend_from_slice(&sol.backward.diagnostics.steps);
        x_s = sol.states().column(b - a);
    }

    let flow = MeasureFlow::from_ensemble(&ParticleEnsemble {
        grid,
        states: states.clone(),
        controls: controls.clone(),
    });
    let bundle = SolutionBundle::new(
        ParticleEnsemble {
            grid,
            states,
            controls,
        },
        BackwardSolution {
            grid,
            p,
            q,
            q_tilde: qt,
            fits,
            diagnostics: BackwardDiagnostics { steps: diags },
        },
        flow,
        history,
    );
    Ok((bundle, report))
}

/// Method Two on [0, T]. Intervals start at T/`intervals` and are halved,
/// up to `MAX_HALVINGS` times, whenever some interval fails to contract.
pub fn solve_stitched(
    spec: &ModelSpec,
    xi0: &InitialLaw,
    noise: &NoiseBundle,
    opts: &StitchOptions,
) -> Result<(SolutionBundle, StitchReport)> {
    let steps = noise.grid().steps();
    if let Some(init) = &opts.init {
        if init.paths() != noise.paths() || init.particles() != noise.particles() || init.len() != steps {
            return Err(Error::DimensionMismatch("initial control table does not match the ensemble".into()));
        }
    }
    let mut len = steps.div_ceil(opts.intervals.max(1)).max(1);
    let mut halvings = 0;
    loop {
        match attempt(spec, xi0, noise, opts, len, halvings) {
            Ok(out) => return Ok(out),
            Err((e, start, end)) => {
                let contraction = matches!(e, Error::NotConverged { .. } | Error::Diverged { .. });
                if !contraction {
                    return Err(e);
                }
                if halvings >= MAX_HALVINGS || len == 1 {
                    return Err(Error::StitchingFailed { start, end, halvings });
                }
                halvings += 1;
                len = len.div_ceil(2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_from_the_end() {
        assert_eq!(partition(100, 25), vec![0, 25, 50, 75, 100]);
        assert_eq!(partition(10, 4), vec![0, 2, 6, 10]);
        assert_eq!(partition(3, 5), vec![0, 3]);
    }

    #[test]
    fn affine_fit_recovers_plane() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let m: Vec<f64> = (0..40).map(|i| (i / 10) as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().zip(&m).map(|(x, m)| 0.3 + 1.5 * x - 0.7 * m).collect();
        let (a, r2) = affine_fit(&x, &m, &y);
        for (got, want) in a.iter().zip([0.3, 1.5, -0.7]) {
            assert!((got - want).abs() < 1e-10, "{a:?}");
        }
        assert!((r2 - 1.0).abs() < 1e-10);
        let (a, _) = affine_fit(&x, &vec![2.0; 40], &x);
        assert!((a[1] - 1.0).abs() < 1e-12 && a[2] == 0.0);
    }
}
