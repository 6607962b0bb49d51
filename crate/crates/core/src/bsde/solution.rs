use serde::Serialize;

use super::regression::{StepDiagnostics, StepFit};
use crate::error::{Error, Result};
use crate::forward_sim::{ParticleEnsemble, PathTable, TimeGrid};
use crate::measures::{MeasureFlow, MeasureMoments};
use crate::model::ModelSpec;

/// Terminal value of the adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalRule {
    /// `g_x(x, m)` of the model.
    CostGradient,
    /// `a0 + a1·x + a2·mean(m)`.
    Affine { a0: f64, a1: f64, a2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalCondition {
    pub rule: TerminalRule,
    /// Declared Lipschitz constant.
    pub c_v: f64,
    pub monotone: bool,
}

/// Outcome of sampled checks on a terminal condition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TerminalCheck {
    pub min_monotonicity: f64,
    pub max_lipschitz_ratio: f64,
    pub monotone_ok: bool,
    pub lipschitz_ok: bool,
}

impl TerminalCondition {
    pub fn cost_gradient(spec: &ModelSpec) -> Self {
        let w = spec.cost.w_terminal;
        Self {
            rule: TerminalRule::CostGradient,
            c_v: (w * w + (w * spec.cost.s_terminal).powi(2)).sqrt(),
            monotone: w >= 0.0,
        }
    }

    pub fn affine(a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            rule: TerminalRule::Affine { a0, a1, a2 },
            c_v: (a1 * a1 + a2 * a2).sqrt(),
            monotone: a1 >= 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::affine(c, 0.0, 0.0)
    }

    #[inline]
    pub fn eval(&self, spec: &ModelSpec, x: f64, m: &MeasureMoments) -> f64 {
        match self.rule {
            TerminalRule::CostGradient => spec.cost.gx(x, m),
            TerminalRule::Affine { a0, a1, a2 } => a0 + a1 * x + a2 * m.mean,
        }
    }

    /// Samples monotonicity in x and the Lipschitz ratio
    /// |Δv| / (|Δx|² + |Δmean|²)^{1/2} on a grid of points in [−r, r]².
    pub fn check(&self, spec: &ModelSpec, radius: f64, tol_mono: f64) -> TerminalCheck {
        let pts: Vec<f64> = (0..=10).map(|i| -radius + 2.0 * radius * i as f64 / 10.0).collect();
        let mut mono = f64::INFINITY;
        let mut lip = 0.0_f64;
        for &x in &pts {
            for &x2 in &pts {
                for &m in &pts {
                    for &m2 in &[m, -m, 0.5 * m] {
                        let (a, b) = (MeasureMoments::dirac(m), MeasureMoments::dirac(m2));
                        let dv = self.eval(spec, x2, &b) - self.eval(spec, x, &a);
                        let d = ((x2 - x).powi(2) + (m2 - m).powi(2)).sqrt();
                        if d > 0.0 {
                            lip = lip.max(dv.abs() / d);
                        }
                        if m == m2 {
                            mono = mono.min(dv * (x2 - x));
                        }
                    }
                }
            }
        }
        TerminalCheck {
            min_monotonicity: mono,
            max_lipschitz_ratio: lip,
            monotone_ok: !self.monotone || mono >= -tol_mono,
            lipschitz_ok: lip <= self.c_v * 1.01 + 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BackwardDiagnostics {
    pub steps: Vec<StepDiagnostics>,
}

impl BackwardDiagnostics {
    pub fn min_r2(&self) -> f64 {
        self.steps.iter().map(|s| s.r2).fold(f64::INFINITY, f64::min)
    }

    pub fn max_condition(&self) -> f64 {
        self.steps.iter().map(|s| s.condition).fold(0.0, f64::max)
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.iter().map(|s| s.fallbacks).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub grid: TimeGrid,
    /// N+1 nodes.
    pub p: PathTable,
    /// N steps.
    pub q: PathTable,
    pub q_tilde: PathTable,
    /// Per-step regression fits (N entries).
    pub fits: Vec<StepFit>,
    pub diagnostics: BackwardDiagnostics,
}

/// A discrete solution Θ = (X, u, m, p, q, q̃).
#[derive(Debug, Clone)]
pub struct SolutionBundle {
    pub ensemble: ParticleEnsemble,
    pub backward: BackwardSolution,
    pub measure: MeasureFlow,
    pub s_norm: f64,
    /// Control residual per inner iteration.
    pub history: Vec<f64>,
}

impl SolutionBundle {
    pub fn new(ensemble: ParticleEnsemble, backward: BackwardSolution, measure: MeasureFlow, history: Vec<f64>) -> Self {
        let mut b = Self {
            ensemble,
            backward,
            measure,
            s_norm: 0.0,
            history,
        };
        b.s_norm = s_norm(&b);
        b
    }

    pub fn grid(&self) -> TimeGrid {
        self.ensemble.grid
    }

    pub fn controls(&self) -> &PathTable {
        &self.ensemble.controls
    }

    pub fn states(&self) -> &PathTable {
        &self.ensemble.states
    }

    /// rms over (j,k,n) of b2·p + σ2·q + σ̃2·q̃ + f0u(t,x,u).
    pub fn optimality_residual(&self, spec: &ModelSpec) -> f64 {
        let (x, u) = (&self.ensemble.states, &self.ensemble.controls);
        let (p, q, qt) = (&self.backward.p, &self.backward.q, &self.backward.q_tilde);
        let grid = self.grid();
        let mut s = 0.0;
        let mut count = 0usize;
        for j in 0..x.paths() {
            for n in 0..grid.steps() {
                let t = grid.time(n);
                for k in 0..x.particles() {
                    let r = spec.optimality_residual(t, x.get(j, k, n), p.get(j, k, n), q.get(j, k, n), qt.get(j, k, n), u.get(j, k, n));
                    s += r * r;
                    count += 1;
                }
            }
        }
        (s / count.max(1) as f64).sqrt()
    }
}

struct Parts<'a> {
    x: &'a PathTable,
    p: &'a PathTable,
    u: &'a PathTable,
    q: &'a PathTable,
    qt: &'a PathTable,
}

fn parts(b: &SolutionBundle) -> Parts<'_> {
    Parts {
        x: &b.ensemble.states,
        p: &b.backward.p,
        u: &b.ensemble.controls,
        q: &b.backward.q,
        qt: &b.backward.q_tilde,
    }
}

/// `(E[sup_n (d_X² + d_p²)] + E[Σ_n (d_u² + d_q² + d_q̃²)Δt])^{1/2}` where
/// `d = a − b`, or `d = a` when `b` is `None`.
fn norm_of(a: &Parts<'_>, b: Option<&Parts<'_>>, dt: f64) -> f64 {
    let (mp, kp) = (a.x.paths(), a.x.particles());
    let nodes = a.x.len();
    let diff = |ta: &PathTable, tb: Option<&PathTable>, j: usize, k: usize, n: usize| {
        ta.get(j, k, n) - tb.map_or(0.0, |t| t.get(j, k, n))
    };
    let mut total = 0.0;
    for j in 0..mp {
        for k in 0..kp {
            let mut sup = 0.0_f64;
            for n in 0..nodes {
                let dx = diff(a.x, b.map(|b| b.x), j, k, n);
                let dp = diff(a.p, b.map(|b| b.p), j, k, n);
                sup = sup.max(dx * dx + dp * dp);
            }
            let mut int = 0.0;
            for n in 0..nodes - 1 {
                let du = diff(a.u, b.map(|b| b.u), j, k, n);
                let dq = diff(a.q, b.map(|b| b.q), j, k, n);
                let dqt = diff(a.qt, b.map(|b| b.qt), j, k, n);
                int += (du * du + dq * dq + dqt * dqt) * dt;
            }
            total += sup + int;
        }
    }
    (total / (mp * kp) as f64).sqrt()
}

pub fn s_norm(bundle: &SolutionBundle) -> f64 {
    norm_of(&parts(bundle), None, bundle.grid().dt())
}

pub fn s_distance(a: &SolutionBundle, b: &SolutionBundle) -> Result<f64> {
    if a.grid() != b.grid() || !a.ensemble.states.same_shape(&b.ensemble.states) {
        return Err(Error::GridMismatch("bundles on different grids or ensembles".into()));
    }
    Ok(norm_of(&parts(a), Some(&parts(b)), a.grid().dt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::EmpiricalMeasure;

    fn bundle(scale: f64) -> SolutionBundle {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        // two particles on one path, two steps
        let x = PathTable::from_fn(1, 2, 3, |_, n, k| scale * [[1.0, 2.0, 0.0], [-1.0, 0.5, 3.0]][k][n]);
        let p = PathTable::from_fn(1, 2, 3, |_, n, k| scale * [[0.0, 1.0, 2.0], [1.0, 1.0, 1.0]][k][n]);
        let u = PathTable::from_fn(1, 2, 2, |_, n, k| scale * [[1.0, -1.0], [2.0, 0.0]][k][n]);
        let q = PathTable::from_fn(1, 2, 2, |_, n, k| scale * [[0.5, 0.0], [0.0, 1.0]][k][n]);
        let qt = PathTable::zeros(1, 2, 2).map(|_| scale);
        let ensemble = ParticleEnsemble {
            grid,
            states: x.clone(),
            controls: u,
        };
        let backward = BackwardSolution {
            grid,
            p,
            q,
            q_tilde: qt,
            fits: vec![],
            diagnostics: BackwardDiagnostics { steps: vec![] },
        };
        let measure = MeasureFlow::constant(grid, 1, EmpiricalMeasure::dirac(0.0));
        SolutionBundle::new(ensemble, backward, measure, vec![])
    }

    #[test]
    fn s_norm_by_hand() {
        let b = bundle(1.0);
        // particle 0: sup(1, 5, 4) = 5; Σ(u²+q²+q̃²)·0.5 = (1+0.25+1 + 1+0+1)·0.5 = 2.125
        // particle 1: sup(2, 1.25, 10) = 10; (4+0+1 + 0+1+1)·0.5 = 3.5
        let expected = ((5.0 + 2.125 + 10.0 + 3.5) / 2.0f64).sqrt();
        assert!((b.s_norm - expected).abs() < 1e-14);
        assert!((s_norm(&b) - b.s_norm).abs() < 1e-10);
        assert!((bundle(3.0).s_norm - 3.0 * expected).abs() < 1e-12);
        assert_eq!(bundle(0.0).s_norm, 0.0);
        assert!((s_distance(&bundle(2.0), &b).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn terminal_checks() {
        let spec = ModelSpec::preset_default("lq").unwrap();
        let g = TerminalCondition::cost_gradient(&spec);
        let c = g.check(&spec, 5.0, 1e-9);
        assert!(c.monotone_ok && c.lipschitz_ok, "{c:?}");
        let bad = TerminalCondition {
            c_v: 0.1,
            ..TerminalCondition::affine(0.0, 1.0, 0.0)
        };
        assert!(!bad.check(&spec, 5.0, 1e-9).lipschitz_ok);
        let dec = TerminalCondition {
            monotone: true,
            ..TerminalCondition::affine(0.0, -1.0, 0.0)
        };
        assert!(!dec.check(&spec, 5.0, 1e-9).monotone_ok);
    }
}
