//! Coefficient families, the generalized Hamiltonian and its minimizer.
//!
//! Every preset lives in one structural family:
//!
//! ```text
//! φ(t,x,u,m) = φ0(m) + φ1·x + φ2·u          for φ = b, σ, σ̃
//! φ0(m)      = c0 + c1·mean(m) + κ·tanh(mean(m))
//! f0(t,x,u)  = (h/2)x² + r·u² + (c4/4)u⁴
//! f1(t,x,m)  = level + (w/2)(x − s·mean(m))² + (c/4)x⁴
//! g(x,m)     = (w_T/2)(x − s_T·mean(m))²
//! ```
//!
//! Named presets differ only in their default parameters. The measure
//! argument is read through [`MeasureMoments`].

mod validate;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bsde::SolutionBundle;
use crate::error::{Error, Result};
use crate::forward_sim::ParticleEnsemble;
use crate::measures::{MeasureFlow, MeasureMoments};

pub use validate::{
    sufficient_condition_report, validate_assumptions, CheckResult, ConditionReport, TOL_MONO,
    SamplerConfig, ValidationReport,
};

/// Absolute tolerance on the first-order condition when solving for û.
pub const TOL_ROOT: f64 = 1e-10;

/// Half-width of the state/control box on which polynomial presets are
/// given their structural constant `L`.
pub const VALIDATION_RADIUS: f64 = 5.0;

/// `c0 + c1·mean(m) + κ·tanh(mean(m))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeasureTerm {
    pub constant: f64,
    pub mean_coeff: f64,
    pub tanh_coeff: f64,
}

impl MeasureTerm {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            ..Self::default()
        }
    }

    pub fn eval(&self, m: &MeasureMoments) -> f64 {
        let mut v = self.constant + self.mean_coeff * m.mean;
        if self.tanh_coeff != 0.0 {
            v += self.tanh_coeff * m.mean.tanh();
        }
        v
    }

    /// W2-Lipschitz modulus: |mean(m) − mean(m')| ≤ W2(m, m') and tanh is
    /// 1-Lipschitz.
    pub fn lipschitz_in_measure(&self) -> f64 {
        self.mean_coeff.abs() + self.tanh_coeff.abs()
    }

    /// Smallest `L` with `|φ0(m)| ≤ L(1 + ‖m‖₂)`.
    pub fn growth_constant(&self) -> f64 {
        (self.constant.abs() + self.tanh_coeff.abs()).max(self.mean_coeff.abs())
    }
}

/// `φ0(t,m) + φ1(t)·x + φ2(t)·u`. Time dependence is not used by any preset,
/// so φ1 and φ2 are stored as constants.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LinearCoefficient {
    pub phi0: MeasureTerm,
    pub phi1: f64,
    pub phi2: f64,
}

impl LinearCoefficient {
    pub fn new(phi0: MeasureTerm, phi1: f64, phi2: f64) -> Self {
        Self { phi0, phi1, phi2 }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(MeasureTerm::constant(c), 0.0, 0.0)
    }

    #[inline]
    pub fn eval(&self, _t: f64, x: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.phi0.eval(m) + self.phi1 * x + self.phi2 * u
    }

    pub fn phi1(&self, _t: f64) -> f64 {
        self.phi1
    }

    pub fn phi2(&self, _t: f64) -> f64 {
        self.phi2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostSpec {
    pub h: f64,
    pub r: f64,
    pub c4: f64,
    pub level: f64,
    pub w: f64,
    pub s: f64,
    pub c: f64,
    pub w_terminal: f64,
    pub s_terminal: f64,
}

impl CostSpec {
    #[inline]
    pub fn f0(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.5 * self.h * x * x + self.r * u * u + 0.25 * self.c4 * u.powi(4)
    }

    #[inline]
    pub fn f0x(&self, _t: f64, x: f64, _u: f64) -> f64 {
        self.h * x
    }

    #[inline]
    pub fn f0u(&self, _t: f64, _x: f64, u: f64) -> f64 {
        2.0 * self.r * u + self.c4 * u * u * u
    }

    #[inline]
    pub fn f0uu(&self, _t: f64, _x: f64, u: f64) -> f64 {
        2.0 * self.r + 3.0 * self.c4 * u * u
    }

    #[inline]
    pub fn f1(&self, _t: f64, x: f64, m: &MeasureMoments) -> f64 {
        let d = x - self.s * m.mean;
        self.level + 0.5 * self.w * d * d + 0.25 * self.c * x.powi(4)
    }

    #[inline]
    pub fn f1x(&self, _t: f64, x: f64, m: &MeasureMoments) -> f64 {
        self.w * (x - self.s * m.mean) + self.c * x * x * x
    }

    #[inline]
    pub fn f(&self, t: f64, x: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.f0(t, x, u) + self.f1(t, x, m)
    }

    #[inline]
    pub fn g(&self, x: f64, m: &MeasureMoments) -> f64 {
        let d = x - self.s_terminal * m.mean;
        0.5 * self.w_terminal * d * d
    }

    #[inline]
    pub fn gx(&self, x: f64, m: &MeasureMoments) -> f64 {
        self.w_terminal * (x - self.s_terminal * m.mean)
    }

    /// Strict-convexity modulus of f0 in u.
    pub fn c_f(&self) -> f64 {
        self.r
    }

    pub fn is_quadratic(&self) -> bool {
        self.c4 == 0.0 && self.c == 0.0
    }
}

/// Shared structural constants of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructuralConstants {
    pub l: f64,
    pub b_u: f64,
    pub l_m: f64,
    pub c_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub horizon: f64,
    pub b: LinearCoefficient,
    pub sigma: LinearCoefficient,
    pub sigma_tilde: LinearCoefficient,
    pub cost: CostSpec,
    pub constants: StructuralConstants,
}

/// Registry names.
pub const PRESETS: [&str; 5] = ["lq", "mean_reverting", "tanh_drift", "poly_cost", "concave_terminal"];

/// Parameter names accepted by every preset.
pub const PARAMETERS: [&str; 23] = [
    "b0", "b0_mean", "b0_tanh", "b1", "b2", "sigma0", "sigma_mean", "sigma1", "sigma2",
    "sigma_tilde0", "sigma_tilde_mean", "sigma_tilde1", "sigma_tilde2", "h", "r", "c4", "level",
    "w", "s", "c", "w_T", "s_T", "sigma_tanh",
];

fn preset_defaults(name: &str) -> Result<BTreeMap<&'static str, f64>> {
    let mut p: BTreeMap<&'static str, f64> = PARAMETERS.iter().map(|&k| (k, 0.0)).collect();
    let base = [
        ("b2", 1.0),
        ("sigma0", 0.4),
        ("sigma_tilde0", 0.3),
        ("r", 1.0),
        ("w", 1.0),
        ("s", 0.5),
        ("w_T", 1.0),
        ("s_T", 0.5),
    ];
    p.extend(base);
    match name {
        "lq" => {}
        "mean_reverting" => p.extend([
            ("b0", 0.2),
            ("b0_mean", -0.5),
            ("b1", -0.2),
            ("sigma1", 0.1),
            ("sigma2", 0.01),
            ("sigma_tilde_mean", 0.05),
            ("sigma_tilde1", 0.1),
            ("sigma_tilde2", 0.005),
        ]),
        "tanh_drift" => p.extend([("b0_tanh", 0.5)]),
        "poly_cost" => p.extend([("c4", 0.05), ("c", 0.1)]),
        "concave_terminal" => p.extend([("w_T", -1.0)]),
        other => return Err(Error::UnknownPreset(other.to_string())),
    }
    Ok(p)
}

impl ModelSpec {
    /// Builds a spec and derives its structural constants.
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        b: LinearCoefficient,
        sigma: LinearCoefficient,
        sigma_tilde: LinearCoefficient,
        cost: CostSpec,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "horizon".into(),
                reason: format!("must be positive and finite, got {horizon}"),
            });
        }
        if !(cost.r > 0.0) {
            return Err(Error::InvalidParameter {
                name: "r".into(),
                reason: format!("control weight must be positive, got {}", cost.r),
            });
        }
        if cost.c4 < 0.0 {
            return Err(Error::InvalidParameter {
                name: "c4".into(),
                reason: "quartic control weight must be nonnegative".into(),
            });
        }
        let constants = structural_constants(&b, &sigma, &sigma_tilde, &cost);
        Ok(Self {
            name: name.into(),
            horizon,
            b,
            sigma,
            sigma_tilde,
            cost,
            constants,
        })
    }

    /// Looks up a registry preset, overriding defaults with `params`.
    pub fn preset(name: &str, horizon: f64, params: &BTreeMap<String, f64>) -> Result<Self> {
        let mut p = preset_defaults(name)?;
        for (k, &v) in params {
            let Some(slot) = p.get_mut(k.as_str()) else {
                return Err(Error::InvalidParameter {
                    name: k.clone(),
                    reason: format!("not a parameter of preset `{name}`"),
                });
            };
            if !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name: k.clone(),
                    reason: "must be finite".into(),
                });
            }
            *slot = v;
        }
        let term = |c0: &str, c1: &str, k: Option<&str>| MeasureTerm {
            constant: p[c0],
            mean_coeff: p[c1],
            tanh_coeff: k.map_or(0.0, |k| p[k]),
        };
        let b = LinearCoefficient::new(term("b0", "b0_mean", Some("b0_tanh")), p["b1"], p["b2"]);
        let sigma = LinearCoefficient::new(
            term("sigma0", "sigma_mean", Some("sigma_tanh")),
            p["sigma1"],
            p["sigma2"],
        );
        let sigma_tilde = LinearCoefficient::new(
            term("sigma_tilde0", "sigma_tilde_mean", None),
            p["sigma_tilde1"],
            p["sigma_tilde2"],
        );
        let cost = CostSpec {
            h: p["h"],
            r: p["r"],
            c4: p["c4"],
            level: p["level"],
            w: p["w"],
            s: p["s"],
            c: p["c"],
            w_terminal: p["w_T"],
            s_terminal: p["s_T"],
        };
        Self::new(name, horizon, b, sigma, sigma_tilde, cost)
    }

    pub fn preset_default(name: &str) -> Result<Self> {
        Self::preset(name, 1.0, &BTreeMap::new())
    }

    pub fn c_f(&self) -> f64 {
        self.cost.c_f()
    }

    /// Quadratic cost with coefficients affine in (x, u, m̄).
    pub fn is_linear_quadratic(&self) -> bool {
        let nonlinear_measure = [self.b.phi0, self.sigma.phi0, self.sigma_tilde.phi0]
            .iter()
            .any(|t| t.tanh_coeff != 0.0);
        !nonlinear_measure && self.cost.is_quadratic()
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.b.eval(t, x, u, m)
    }

    #[inline]
    pub fn vol(&self, t: f64, x: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.sigma.eval(t, x, u, m)
    }

    #[inline]
    pub fn vol_common(&self, t: f64, x: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.sigma_tilde.eval(t, x, u, m)
    }

    /// `H = b·p + σ·q + σ̃·q̃ + f`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian(&self, t: f64, x: f64, p: f64, q: f64, qt: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.drift(t, x, u, m) * p
            + self.vol(t, x, u, m) * q
            + self.vol_common(t, x, u, m) * qt
            + self.cost.f(t, x, u, m)
    }

    /// `∂_x H = b1·p + σ1·q + σ̃1·q̃ + f0x + f1x`.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn hamiltonian_x(&self, t: f64, x: f64, p: f64, q: f64, qt: f64, u: f64, m: &MeasureMoments) -> f64 {
        self.b.phi1 * p
            + self.sigma.phi1 * q
            + self.sigma_tilde.phi1 * qt
            + self.cost.f0x(t, x, u)
            + self.cost.f1x(t, x, m)
    }

    /// Derivative of H through its measure argument when `m` contains the
    /// particle itself as an atom of weight `w`: `∂_y H(x, m with x moved to y)`
    /// at `y = x`. Zero for `w = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian_self_influence(&self, t: f64, x: f64, p: f64, q: f64, qt: f64, u: f64, m: &MeasureMoments, w: f64) -> f64 {
        if w == 0.0 {
            return 0.0;
        }
        central_difference(x, |y| self.hamiltonian(t, x, p, q, qt, u, &m.move_atom(x, y, w)))
    }

    /// The terminal counterpart of [`Self::hamiltonian_self_influence`].
    pub fn terminal_self_influence(&self, x: f64, m: &MeasureMoments, w: f64) -> f64 {
        if w == 0.0 {
            return 0.0;
        }
        central_difference(x, |y| self.cost.g(x, &m.move_atom(x, y, w)))
    }

    /// `b2·p + σ2·q + σ̃2·q̃ + f0u(t,x,u)`; zero at û.
    #[inline]
    pub fn optimality_residual(&self, t: f64, x: f64, p: f64, q: f64, qt: f64, u: f64) -> f64 {
        self.b.phi2 * p + self.sigma.phi2 * q + self.sigma_tilde.phi2 * qt + self.cost.f0u(t, x, u)
    }

    /// Unique minimizer of u ↦ H(t,x,p,q,q̃,u,m): root of the first-order
    /// condition by safeguarded Newton.
    pub fn minimize_hamiltonian(&self, t: f64, x: f64, p: f64, q: f64, qt: f64) -> Result<f64> {
        let a = self.b.phi2 * p + self.sigma.phi2 * q + self.sigma_tilde.phi2 * qt;
        let cf = self.c_f();
        let l = self.constants.l;
        let fo = |u: f64| a + self.cost.f0u(t, x, u);

        // Quadratic part gives the exact root when c4 = 0.
        let guess = -a / (2.0 * self.cost.r);
        if self.cost.c4 == 0.0 && fo(guess).abs() <= TOL_ROOT {
            return Ok(guess);
        }

        let mut radius = l * (1.0 + x.abs() + p.abs() + q.abs() + qt.abs()) / (2.0 * cf) + l / (2.0 * cf);
        let mut tries = 0;
        while !(fo(-radius) <= 0.0 && fo(radius) >= 0.0) {
            radius *= 2.0;
            tries += 1;
            if tries > 60 || !radius.is_finite() {
                return Err(Error::BracketFailure {
                    lo: -radius,
                    hi: radius,
                });
            }
        }
        let (mut lo, mut hi) = (-radius, radius);
        let mut u = guess.clamp(lo, hi);
        for _ in 0..200 {
            let fu = fo(u);
            if fu.abs() <= TOL_ROOT {
                return Ok(u);
            }
            if fu < 0.0 {
                lo = u;
            } else {
                hi = u;
            }
            let step = u - fu / self.cost.f0uu(t, x, u);
            u = if step > lo && step < hi {
                step
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * (1.0 + u.abs()) {
                return Ok(u);
            }
        }
        Ok(u)
    }

    /// Largest |û(t,0,0,0,0)| allowed by the convexity bound.
    pub fn control_bound_at_origin(&self) -> f64 {
        self.constants.l / (2.0 * self.c_f())
    }
}

fn structural_constants(
    b: &LinearCoefficient,
    sigma: &LinearCoefficient,
    sigma_tilde: &LinearCoefficient,
    cost: &CostSpec,
) -> StructuralConstants {
    let r2 = VALIDATION_RADIUS * VALIDATION_RADIUS;
    let b_u = sigma.phi2.abs().max(sigma_tilde.phi2.abs());
    let l_m = b.phi0.lipschitz_in_measure()
        + sigma.phi0.lipschitz_in_measure()
        + sigma_tilde.phi0.lipschitz_in_measure();
    let candidates = [
        b.phi1.abs(),
        b.phi2.abs(),
        sigma.phi1.abs(),
        sigma.phi2.abs(),
        sigma_tilde.phi1.abs(),
        sigma_tilde.phi2.abs(),
        b.phi0.growth_constant(),
        sigma.phi0.growth_constant(),
        sigma_tilde.phi0.growth_constant(),
        // growth of f(t,0,0,m) and g(0,m)
        cost.level.abs(),
        0.5 * cost.w.abs() * cost.s * cost.s,
        0.5 * cost.w_terminal.abs() * cost.s_terminal * cost.s_terminal,
        // Lipschitz moduli of f0x, f0u, f1x, g_x in the state/control box
        cost.h.abs(),
        2.0 * cost.r + 3.0 * cost.c4 * r2,
        cost.w.abs() + 3.0 * cost.c.abs() * r2,
        cost.w_terminal.abs(),
        // derivative growth in the measure argument
        (cost.w * cost.s).abs(),
        (cost.w_terminal * cost.s_terminal).abs(),
        b_u,
        l_m,
    ];
    let l = candidates.into_iter().fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    StructuralConstants {
        l,
        b_u,
        l_m,
        c_f: cost.r,
    }
}

fn central_difference(x: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-5 * (1.0 + x.abs());
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `J(u|m) = E[Σ f(t_n, X_n, u_n, m_n)Δt + g(X_N, m_N)]` with left-endpoint
/// quadrature.
pub fn cost_functional(spec: &ModelSpec, solution: &SolutionBundle) -> Result<f64> {
    let per_path = cost_per_path(spec, solution)?;
    Ok(per_path.iter().sum::<f64>() / per_path.len() as f64)
}

/// Cost averaged over the particles of each common path.
pub fn cost_per_path(spec: &ModelSpec, solution: &SolutionBundle) -> Result<Vec<f64>> {
    let costs = particle_costs(spec, solution)?;
    let k = solution.ensemble.states.particles();
    Ok(costs
        .chunks(k)
        .map(|c| c.iter().sum::<f64>() / k as f64)
        .collect())
}

/// Realized cost of every particle, indexed `j·K + k`.
pub fn particle_costs(spec: &ModelSpec, solution: &SolutionBundle) -> Result<Vec<f64>> {
    ensemble_costs(spec, &solution.ensemble, &solution.measure)
}

/// Realized cost of every particle of an ensemble, with the measure argument
/// read from `flow`.
pub fn ensemble_costs(spec: &ModelSpec, ens: &ParticleEnsemble, flow: &MeasureFlow) -> Result<Vec<f64>> {
    ensemble_costs_with_self(spec, ens, flow, 0.0)
}

/// As [`ensemble_costs`], with each particle's own atom mixed into `flow` at
/// weight `w`.
pub fn ensemble_costs_with_self(spec: &ModelSpec, ens: &ParticleEnsemble, flow: &MeasureFlow, w: f64) -> Result<Vec<f64>> {
    let seen = |base: &MeasureMoments, x: f64| if w > 0.0 { base.with_atom(x, w) } else { *base };
    let grid = ens.grid;
    let (mp, kp) = (ens.states.paths(), ens.states.particles());
    let steps = grid.steps();
    if ens.controls.len() != steps || flow.nodes() != grid.nodes() || flow.paths() != mp {
        return Err(Error::GridMismatch("solution paths do not cover the grid".into()));
    }
    let dt = grid.dt();
    let mut out = vec![0.0; mp * kp];
    for j in 0..mp {
        for n in 0..steps {
            let t = grid.time(n);
            let m = flow.moments(n, j);
            let xs = ens.states.slice(j, n);
            let us = ens.controls.slice(j, n);
            for k in 0..kp {
                out[j * kp + k] += spec.cost.f(t, xs[k], us[k], &seen(&m, xs[k])) * dt;
            }
        }
        let m = flow.moments(steps, j);
        let xs = ens.states.slice(j, steps);
        for k in 0..kp {
            out[j * kp + k] += spec.cost.g(xs[k], &seen(&m, xs[k]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_spec() -> ModelSpec {
        let cost = CostSpec {
            r: 1.0,
            ..CostSpec::default()
        };
        ModelSpec::new("zero", 1.0, Default::default(), Default::default(), Default::default(), cost).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let m = MeasureMoments::dirac(0.0);
        let mut spec = zero_spec();
        spec.cost.level = 2.5;
        assert_eq!(spec.hamiltonian(0.3, 1.0, 2.0, 3.0, 4.0, 0.0, &m), 2.5);

        let mut spec = zero_spec();
        spec.b = LinearCoefficient::new(MeasureTerm::default(), 1.0, 1.0);
        assert_eq!(spec.hamiltonian(0.0, 1.0, 3.0, 0.0, 0.0, 2.0, &m), 13.0);
    }

    #[test]
    fn hamiltonian_lq_matches_closed_form() {
        let spec = ModelSpec::preset_default("lq").unwrap();
        let m = MeasureMoments {
            mean: 0.7,
            second_moment: 1.0,
        };
        let (t, x, p, q, qt, u) = (0.2, -0.4, 1.3, 0.5, -0.8, 0.9);
        let by_hand = u * p + 0.4 * q + 0.3 * qt + u * u + 0.5 * (x - 0.35) * (x - 0.35);
        assert!((spec.hamiltonian(t, x, p, q, qt, u, &m) - by_hand).abs() < 1e-14);
    }

    #[test]
    fn hamiltonian_x_examples() {
        let m = MeasureMoments::dirac(0.0);
        let spec = zero_spec();
        assert_eq!(spec.hamiltonian_x(0.0, 1.0, 2.0, 3.0, 4.0, 5.0, &m), 0.0);
        let mut spec = zero_spec();
        spec.b.phi1 = 2.0;
        assert_eq!(spec.hamiltonian_x(0.0, 0.0, 3.0, 0.0, 0.0, 0.0, &m), 6.0);
    }

    #[test]
    fn hamiltonian_x_matches_central_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for name in PRESETS {
            let spec = ModelSpec::preset_default(name).unwrap();
            for _ in 0..200 {
                let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let m = MeasureMoments {
                    mean: rng.gen_range(-2.0..2.0),
                    second_moment: 5.0,
                };
                let hx = spec.hamiltonian_x(0.5, v[0], v[1], v[2], v[3], v[4], &m);
                let e = 1e-5;
                let fd = (spec.hamiltonian(0.5, v[0] + e, v[1], v[2], v[3], v[4], &m)
                    - spec.hamiltonian(0.5, v[0] - e, v[1], v[2], v[3], v[4], &m))
                    / (2.0 * e);
                assert!((hx - fd).abs() < 1e-6, "{name}: {hx} vs {fd}");
            }
        }
    }

    #[test]
    fn minimizer_examples() {
        let mut spec = zero_spec();
        spec.b.phi2 = 1.0;
        assert_eq!(spec.minimize_hamiltonian(0.0, 0.0, 2.0, 0.0, 0.0).unwrap(), -1.0);
        assert_eq!(spec.minimize_hamiltonian(0.0, 3.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn quartic_minimizer_residual() {
        let spec = ModelSpec::preset("poly_cost", 1.0, &[("c4".to_string(), 2.0)].into()).unwrap();
        for p in [-40.0, -1.0, 0.3, 7.0, 100.0] {
            let u = spec.minimize_hamiltonian(0.0, 0.5, p, 0.0, 0.0).unwrap();
            assert!(spec.optimality_residual(0.0, 0.5, p, 0.0, 0.0, u).abs() <= TOL_ROOT);
        }
    }

    #[test]
    fn presets_and_parameters() {
        for name in PRESETS {
            let spec = ModelSpec::preset_default(name).unwrap();
            assert!(spec.constants.b_u <= spec.constants.l);
            assert!(spec.constants.l_m <= spec.constants.l);
        }
        assert!(matches!(ModelSpec::preset_default("nope"), Err(Error::UnknownPreset(_))));
        let bad: BTreeMap<String, f64> = [("kappa".to_string(), 1.0)].into();
        match ModelSpec::preset("lq", 1.0, &bad) {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "kappa"),
            other => panic!("{other:?}"),
        }
        let lq = ModelSpec::preset_default("lq").unwrap();
        assert_eq!(lq.constants.l, 2.0);
        assert_eq!(lq.constants.l_m, 0.0);
        assert_eq!(lq.constants.b_u, 0.0);
        let mr = ModelSpec::preset_default("mean_reverting").unwrap();
        assert!((mr.constants.l_m - 0.55).abs() < 1e-15);
        assert_eq!(mr.constants.b_u, 0.01);
    }
}
