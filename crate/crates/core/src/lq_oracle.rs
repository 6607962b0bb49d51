//! Closed-form reference for linear-quadratic models.
//!
//! The adjoint is sought as `p = a(t)·X + β(t)·m̄ + c(t)` with m̄ the
//! conditional mean. Substituting into the first-order condition gives an
//! affine feedback, and matching the coefficients of X, m̄ and 1 in the
//! adjoint drift gives three backward ODEs. The derivation is written out in
//! `docs/lq_oracle.md`.

use serde::Serialize;

use crate::bsde::{BackwardDiagnostics, BackwardSolution, SolutionBundle};
use crate::error::{Error, Result};
use crate::forward_sim::{
    simulate_window, ControlRule, FeedbackControl, ForwardConfig, InitialLaw, MeasureSource, NoiseBundle, PathTable,
    TimeGrid,
};
use crate::measures::{MeasureFlow, MeasureMoments};
use crate::model::ModelSpec;

/// Refinement of the solver grid used by the RK4 integration.
pub const FINE_FACTOR: usize = 10;

/// Coefficient magnitude treated as finite-time escape.
const BLOW_UP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqParameters {
    pub b0: f64,
    pub b_mean: f64,
    pub b1: f64,
    pub b2: f64,
    pub s0: f64,
    pub s_mean: f64,
    pub s1: f64,
    pub s2: f64,
    pub t0: f64,
    pub t_mean: f64,
    pub t1: f64,
    pub t2: f64,
    pub h: f64,
    pub r: f64,
    pub w: f64,
    pub s: f64,
    pub w_terminal: f64,
    pub s_terminal: f64,
    pub horizon: f64,
}

impl LqParameters {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        if !spec.is_linear_quadratic() {
            return Err(Error::NoOracle(format!(
                "model `{}` is not linear-quadratic",
                spec.name
            )));
        }
        Ok(Self {
            b0: spec.b.phi0.constant,
            b_mean: spec.b.phi0.mean_coeff,
            b1: spec.b.phi1,
            b2: spec.b.phi2,
            s0: spec.sigma.phi0.constant,
            s_mean: spec.sigma.phi0.mean_coeff,
            s1: spec.sigma.phi1,
            s2: spec.sigma.phi2,
            t0: spec.sigma_tilde.phi0.constant,
            t_mean: spec.sigma_tilde.phi0.mean_coeff,
            t1: spec.sigma_tilde.phi1,
            t2: spec.sigma_tilde.phi2,
            h: spec.cost.h,
            r: spec.cost.r,
            w: spec.cost.w,
            s: spec.cost.s,
            w_terminal: spec.cost.w_terminal,
            s_terminal: spec.cost.s_terminal,
            horizon: spec.horizon,
        })
    }
}

/// Affine closed-loop quantities implied by (a, β, c).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedLoop {
    /// u = ux·X + um·m̄ + u0
    pub ux: f64,
    pub um: f64,
    pub u0: f64,
    /// drift = bx·X + bm·m̄ + b0
    pub bx: f64,
    pub bm: f64,
    pub b0: f64,
    /// σ = sx·X + sm·m̄ + s0
    pub sx: f64,
    pub sm: f64,
    pub s0: f64,
    /// σ̃ = tx·X + tm·m̄ + t0
    pub tx: f64,
    pub tm: f64,
    pub t0: f64,
}

impl LqParameters {
    pub fn closed_loop(&self, a: f64, beta: f64, c: f64) -> Result<ClosedLoop> {
        let px = self.b2 * a + a * (self.s2 * self.s1 + self.t2 * self.t1);
        let pm = self.b2 * beta + a * (self.s2 * self.s_mean + self.t2 * self.t_mean) + self.t2 * beta * (self.t_mean + self.t1);
        let p0 = self.b2 * c + a * (self.s2 * self.s0 + self.t2 * self.t0) + self.t2 * beta * self.t0;
        let d = 2.0 * self.r + a * self.s2 * self.s2 + a * self.t2 * self.t2;
        let e = self.t2 * self.t2 * beta;
        if d <= 0.0 || d + e <= 0.0 {
            return Err(Error::NonSolvableLq(format!(
                "first-order condition degenerate (D = {d:.3e}, D + E = {:.3e})",
                d + e
            )));
        }
        let ux = -px / d;
        let u_total = -(px + pm) / (d + e);
        let um = u_total - ux;
        let u0 = -p0 / (d + e);
        Ok(ClosedLoop {
            ux,
            um,
            u0,
            bx: self.b1 + self.b2 * ux,
            bm: self.b_mean + self.b2 * um,
            b0: self.b0 + self.b2 * u0,
            sx: self.s1 + self.s2 * ux,
            sm: self.s_mean + self.s2 * um,
            s0: self.s0 + self.s2 * u0,
            tx: self.t1 + self.t2 * ux,
            tm: self.t_mean + self.t2 * um,
            t0: self.t0 + self.t2 * u0,
        })
    }

    /// Time derivative of (a, β, c).
    pub fn rhs(&self, y: [f64; 3]) -> Result<[f64; 3]> {
        let [a, beta, c] = y;
        let k = self.closed_loop(a, beta, c)?;
        let da = -(self.b1 * a + self.s1 * a * k.sx + self.t1 * a * k.tx + self.h + self.w) - a * k.bx;
        let db = -(self.b1 * beta + self.s1 * a * k.sm + self.t1 * (a * k.tm + beta * (k.tx + k.tm)) - self.w * self.s)
            - a * k.bm
            - beta * (k.bx + k.bm);
        let dc = -(self.b1 * c + self.s1 * a * k.s0 + self.t1 * (a + beta) * k.t0) - (a + beta) * k.b0;
        Ok([da, db, dc])
    }

    pub fn terminal(&self) -> [f64; 3] {
        [self.w_terminal, -self.w_terminal * self.s_terminal, 0.0]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    pub params: LqParameters,
    /// Fine-grid times, ascending.
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
    pub fine_steps: usize,
}

impl RiccatiSolution {
    /// Linear interpolation of (a, β, c) at time t.
    pub fn at(&self, t: f64) -> [f64; 3] {
        let h = self.params.horizon / self.fine_steps as f64;
        let pos = (t / h).clamp(0.0, self.fine_steps as f64);
        let i = (pos.floor() as usize).min(self.fine_steps - 1);
        let w = pos - i as f64;
        let lerp = |v: &[f64]| (1.0 - w) * v[i] + w * v[i + 1];
        [lerp(&self.a), lerp(&self.beta), lerp(&self.c)]
    }

    /// Coefficients on the nodes of `grid`.
    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<[f64; 3]> {
        (0..grid.nodes()).map(|n| self.at(grid.time(n))).collect()
    }

    pub fn closed_loop_at(&self, t: f64) -> ClosedLoop {
        let [a, b, c] = self.at(t);
        self.params
            .closed_loop(a, b, c)
            .expect("closed loop was checked during integration")
    }
}

/// Backward RK4 for (a, β, c) on `steps` uniform steps over [0, T].
pub fn integrate(params: &LqParameters, steps: usize) -> Result<RiccatiSolution> {
    let h = params.horizon / steps as f64;
    let mut a = vec![0.0; steps + 1];
    let mut beta = vec![0.0; steps + 1];
    let mut c = vec![0.0; steps + 1];
    let mut y = params.terminal();
    [a[steps], beta[steps], c[steps]] = y;
    let axpy = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for i in (0..steps).rev() {
        // integrate from t_{i+1} down to t_i with step −h
        let k1 = params.rhs(y)?;
        let k2 = params.rhs(axpy(y, k1, -0.5 * h))?;
        let k3 = params.rhs(axpy(y, k2, -0.5 * h))?;
        let k4 = params.rhs(axpy(y, k3, -h))?;
        for d in 0..3 {
            y[d] -= h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::NonSolvableLq(format!(
                "Riccati coefficients escape at t = {:.4}",
                i as f64 * h
            )));
        }
        [a[i], beta[i], c[i]] = y;
    }
    Ok(RiccatiSolution {
        params: *params,
        times: (0..=steps).map(|i| i as f64 * h).collect(),
        a,
        beta,
        c,
        fine_steps: steps,
    })
}

/// Largest violation of the coefficient ODEs on the fine grid, with the time
/// derivative taken by the fourth-order central difference.
pub fn ode_residual(sol: &RiccatiSolution) -> Result<f64> {
    let n = sol.fine_steps;
    let h = sol.params.horizon / n as f64;
    let d4 = |v: &[f64], i: usize| (-v[i + 2] + 8.0 * v[i + 1] - 8.0 * v[i - 1] + v[i - 2]) / (12.0 * h);
    let mut worst = 0.0_f64;
    for i in 2..n.saturating_sub(1) {
        let f = sol.params.rhs([sol.a[i], sol.beta[i], sol.c[i]])?;
        let d = [d4(&sol.a, i), d4(&sol.beta, i), d4(&sol.c, i)];
        for (x, y) in d.iter().zip(&f) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// RK4 on a grid `FINE_FACTOR` times finer than the solver grid.
pub fn solve_riccati(params: &LqParameters, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let steps = ((params.horizon / grid.dt()).round() as usize).max(1) * FINE_FACTOR;
    integrate(params, steps)
}

struct OracleFeedback {
    grid: TimeGrid,
    loops: Vec<ClosedLoop>,
}

impl FeedbackControl for OracleFeedback {
    fn control(&self, n: usize, x: f64, m: &MeasureMoments, _j: usize, _k: usize) -> f64 {
        let k = &self.loops[n - self.grid.offset()];
        k.ux * x + k.um * m.mean + k.u0
    }
}

/// Where the oracle reads the conditional mean from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanInput {
    /// Empirical mean of the K particles on the path, as a solver sees it.
    Particles,
    /// The closed conditional-mean SDE driven by the path's common noise,
    /// started from the mean of ξ₀: the K → ∞ limit.
    Exact,
}

fn closed_loops(sol: &RiccatiSolution, grid: &TimeGrid) -> Result<(Vec<[f64; 3]>, Vec<ClosedLoop>)> {
    let coeffs = sol.on_grid(grid);
    let loops = coeffs
        .iter()
        .map(|&[a, b, c]| sol.params.closed_loop(a, b, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((coeffs, loops))
}

/// Euler scheme for `dm̄ = ((bx+bm)m̄ + b0)dt + ((tx+tm)m̄ + t0)dW̃` on the
/// bundle's common increments; one column per common path.
pub fn conditional_mean_path(sol: &RiccatiSolution, noise: &NoiseBundle, m0: f64) -> Result<PathTable> {
    let grid = noise.grid();
    let (_, loops) = closed_loops(sol, &grid)?;
    let dt = grid.dt();
    let mut out = PathTable::zeros(noise.paths(), 1, grid.nodes());
    for j in 0..noise.paths() {
        let mut m = m0;
        out.set(j, 0, 0, m);
        for (n, k) in loops.iter().enumerate().take(grid.steps()) {
            m += ((k.bx + k.bm) * m + k.b0) * dt + ((k.tx + k.tm) * m + k.t0) * noise.dw_common(j, n);
            out.set(j, 0, n + 1, m);
        }
    }
    Ok(out)
}

/// Closed-loop particle system under the oracle feedback on the given noise,
/// with adjoints from the ansatz and the conditional mean from particles.
pub fn oracle_solution(sol: &RiccatiSolution, noise: &NoiseBundle, xi0: &InitialLaw, spec: &ModelSpec) -> Result<SolutionBundle> {
    oracle_solution_with(sol, noise, xi0, spec, MeanInput::Particles)
}

pub fn oracle_solution_with(
    sol: &RiccatiSolution,
    noise: &NoiseBundle,
    xi0: &InitialLaw,
    spec: &ModelSpec,
    mean: MeanInput,
) -> Result<SolutionBundle> {
    let grid = noise.grid();
    let (coeffs, loops) = closed_loops(sol, &grid)?;
    let fb = OracleFeedback {
        grid,
        loops: loops.clone(),
    };
    let x0 = xi0.sample(noise);
    let exact = match mean {
        MeanInput::Exact => Some(MeasureFlow::from_table(grid, &conditional_mean_path(sol, noise, xi0.mean())?)),
        MeanInput::Particles => None,
    };
    let cfg = ForwardConfig {
        measure: match &exact {
            Some(f) => MeasureSource::Frozen(f),
            None => MeasureSource::SelfConsistent,
        },
        ..ForwardConfig::default()
    };
    let (ens, particle_flow) = simulate_window(spec, ControlRule::Feedback(&fb), noise, grid, &x0, &cfg)?;
    let flow = exact.unwrap_or(particle_flow);
    let x = &ens.states;
    let (mp, kp, steps) = (x.paths(), x.particles(), grid.steps());
    let mut p = PathTable::zeros(mp, kp, steps + 1);
    let mut q = PathTable::zeros(mp, kp, steps);
    let mut qt = PathTable::zeros(mp, kp, steps);
    for j in 0..mp {
        for n in 0..=steps {
            let mb = flow.moments(n, j).mean;
            let [a, beta, c] = coeffs[n];
            let k = &loops[n];
            for i in 0..kp {
                let xv = x.get(j, i, n);
                p.set(j, i, n, a * xv + beta * mb + c);
                if n < steps {
                    q.set(j, i, n, a * (k.sx * xv + k.sm * mb + k.s0));
                    let common = (k.tx + k.tm) * mb + k.t0;
                    qt.set(j, i, n, a * (k.tx * xv + k.tm * mb + k.t0) + beta * common);
                }
            }
        }
    }
    let backward = BackwardSolution {
        grid,
        p,
        q,
        q_tilde: qt,
        fits: Vec::new(),
        diagnostics: BackwardDiagnostics { steps: Vec::new() },
    };
    Ok(SolutionBundle::new(ens, backward, flow, Vec::new()))
}

/// Relative rms errors `rms(a − b)/rms(b)` of a solver bundle against an
/// oracle bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleError {
    pub control: f64,
    pub state: f64,
    pub adjoint: f64,
}

/// Compares `bundle` with `oracle` at the bundle's nodes. The oracle may live
/// on a grid refined by an integer factor (the same Brownian paths observed
/// more finely); its values are then read at every factor-th node.
pub fn oracle_errors(bundle: &SolutionBundle, oracle: &SolutionBundle) -> Result<OracleError> {
    let (g, go) = (bundle.grid(), oracle.grid());
    let factor = go.steps() / g.steps().max(1);
    let x = bundle.states();
    let xo = oracle.states();
    if factor == 0
        || go.steps() != factor * g.steps()
        || ((go.dt() * factor as f64) - g.dt()).abs() > 1e-12 * g.dt()
        || x.paths() != xo.paths()
        || x.particles() != xo.particles()
    {
        return Err(Error::GridMismatch("oracle grid is not a refinement of the solver grid".into()));
    }
    let rel = |a: &PathTable, b: &PathTable, len: usize| {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..a.paths() {
            for n in 0..len {
                for (va, vb) in a.slice(j, n).iter().zip(b.slice(j, n * factor)) {
                    num += (va - vb) * (va - vb);
                    den += vb * vb;
                }
            }
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    };
    Ok(OracleError {
        control: rel(bundle.controls(), oracle.controls(), g.steps()),
        state: rel(x, xo, g.nodes()),
        adjoint: rel(&bundle.backward.p, &oracle.backward.p, g.nodes()),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrendLevel {
    pub steps: usize,
    pub particles: usize,
    pub errors: OracleError,
}

/// Solver error against a reference `fine_factor` times finer than the
/// finest level, each level seeing the same Brownian paths through
/// coarsened increments.
#[allow(clippy::too_many_arguments)]
pub fn dt_study(
    spec: &ModelSpec,
    xi0: &InitialLaw,
    seed: u64,
    paths: usize,
    particles: usize,
    levels: &[usize],
    fine_factor: usize,
    solve: impl Fn(&NoiseBundle) -> Result<SolutionBundle>,
) -> Result<Vec<TrendLevel>> {
    let finest = levels.iter().copied().max().unwrap_or(1) * fine_factor;
    let fine_grid = TimeGrid::new(spec.horizon, finest)?;
    let fine = NoiseBundle::new(seed, paths, particles, fine_grid)?;
    let params = LqParameters::from_spec(spec)?;
    let sol = solve_riccati(&params, &fine_grid)?;
    let oracle = oracle_solution(&sol, &fine, xi0, spec)?;
    levels
        .iter()
        .map(|&steps| {
            if finest % steps != 0 {
                return Err(Error::InvalidParameter {
                    name: "levels".into(),
                    reason: format!("{steps} steps do not divide the reference grid"),
                });
            }
            let coarse = fine.coarsen(finest / steps)?;
            let bundle = solve(&coarse)?;
            Ok(TrendLevel {
                steps,
                particles,
                errors: oracle_errors(&bundle, &oracle)?,
            })
        })
        .collect()
}

/// Solver error against the exact-conditional-mean oracle on nested
/// particle subsets of one noise bundle.
#[allow(clippy::too_many_arguments)]
pub fn particle_study(
    spec: &ModelSpec,
    xi0: &InitialLaw,
    seed: u64,
    paths: usize,
    steps: usize,
    levels: &[usize],
    solve: impl Fn(&NoiseBundle) -> Result<SolutionBundle>,
) -> Result<Vec<TrendLevel>> {
    let most = levels.iter().copied().max().unwrap_or(1);
    let grid = TimeGrid::new(spec.horizon, steps)?;
    let full = NoiseBundle::new(seed, paths, most, grid)?;
    let params = LqParameters::from_spec(spec)?;
    let sol = solve_riccati(&params, &grid)?;
    levels
        .iter()
        .map(|&k| {
            let noise = full.restrict_particles(0..k)?;
            let oracle = oracle_solution_with(&sol, &noise, xi0, spec, MeanInput::Exact)?;
            let bundle = solve(&noise)?;
            Ok(TrendLevel {
                steps,
                particles: k,
                errors: oracle_errors(&bundle, &oracle)?,
            })
        })
        .collect()
}

/// Whether the control and state errors strictly decrease level by level.
pub fn is_decreasing(levels: &[TrendLevel]) -> bool {
    levels
        .windows(2)
        .all(|w| w[1].errors.control < w[0].errors.control && w[1].errors.state < w[0].errors.state)
}
