//! Sampling validators for the structural assumptions and the smallness
//! conditions of the two existence methods.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::ModelSpec;
use crate::measures::{w2, CouplingMatrix, EmpiricalMeasure, MeasureMoments};

pub const TOL_MONO: f64 = 1e-9;

/// Slack for identities that should hold up to rounding.
const TOL_EXACT: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct SamplerConfig {
    pub samples: usize,
    pub measure_pairs: usize,
    pub atoms: usize,
    pub radius: f64,
    pub seed: u64,
    /// Time points are drawn from the nodes of a uniform grid with this
    /// many steps.
    pub grid_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            measure_pairs: 1000,
            atoms: 8,
            radius: super::VALIDATION_RADIUS,
            seed: 0,
            grid_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub assumption: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    /// Largest sampled ratio (|Δb0|+|Δσ0|+|Δσ̃0|) / W2.
    pub l_m_hat: f64,
    /// Smallest sampled convexity gap of f0 divided by |Δu|².
    pub c_f_hat: f64,
    pub mono_f1_min: f64,
    pub mono_g_min: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.assumption.as_str())
            .collect()
    }
}

/// Independent stream per check so adding samples to one check leaves the
/// others unchanged.
fn stream(seed: u64, check: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xA5A5_0000 + check);
    rng
}

fn sample_measure(rng: &mut ChaCha8Rng, atoms: usize, radius: f64) -> EmpiricalMeasure {
    let centre = rng.gen_range(-radius..radius);
    let spread = rng.gen_range(0.0..2.0);
    let a = (0..atoms)
        .map(|_| centre + spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    EmpiricalMeasure::new(a).expect("finite atoms")
}

/// Measure pairs: half translations (where mean differences equal W2),
/// half independent draws.
fn sample_pair(rng: &mut ChaCha8Rng, cfg: &SamplerConfig) -> (EmpiricalMeasure, EmpiricalMeasure) {
    let m = sample_measure(rng, cfg.atoms, cfg.radius);
    if rng.gen_bool(0.5) {
        let c = rng.gen_range(-cfg.radius..cfg.radius);
        let shifted = m.translate(c);
        (m, shifted)
    } else {
        let other = sample_measure(rng, cfg.atoms, cfg.radius);
        (m, other)
    }
}

fn sample_time(rng: &mut ChaCha8Rng, spec: &ModelSpec, steps: usize) -> f64 {
    let n = rng.gen_range(0..=steps);
    spec.horizon * n as f64 / steps as f64
}

pub fn validate_assumptions(spec: &ModelSpec, cfg: &SamplerConfig) -> ValidationReport {
    let l = spec.constants.l;
    let cost = &spec.cost;
    let radius = cfg.radius;
    let mut checks = Vec::new();
    let mut push = |assumption: &str, passed: bool, detail: String| {
        checks.push(CheckResult {
            assumption: assumption.into(),
            passed,
            detail,
        })
    };

    // (H1) linear structure and growth of φ0
    {
        let mut rng = stream(cfg.seed, 1);
        let mut worst = 0.0_f64;
        for _ in 0..cfg.samples {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let m = sample_measure(&mut rng, cfg.atoms, radius).moments();
            for c in [&spec.b, &spec.sigma, &spec.sigma_tilde] {
                let r = c.eval(t, 0.0, 0.0, &m).abs() / (1.0 + m.root_second_moment());
                worst = worst.max(r);
            }
        }
        let slopes = [
            spec.b.phi1, spec.b.phi2, spec.sigma.phi1, spec.sigma.phi2, spec.sigma_tilde.phi1,
            spec.sigma_tilde.phi2,
        ];
        let slope_max = slopes.iter().fold(0.0_f64, |a, s| a.max(s.abs()));
        let bu_ok = spec.sigma.phi2.abs() <= spec.constants.b_u && spec.sigma_tilde.phi2.abs() <= spec.constants.b_u;
        let ok = worst <= l * (1.0 + TOL_EXACT) && slope_max <= l && bu_ok && spec.constants.b_u <= l;
        push(
            "H1",
            ok,
            format!("max |phi0|/(1+|m|_2) = {worst:.4e}, max |phi1|,|phi2| = {slope_max:.4e}, L = {l:.4e}"),
        );
    }

    // (H2) growth of f, g and their derivatives
    {
        let mut rng = stream(cfg.seed, 2);
        let mut worst = 0.0_f64;
        for _ in 0..cfg.samples {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let x = rng.gen_range(-radius..radius);
            let u = rng.gen_range(-radius..radius);
            let m = sample_measure(&mut rng, cfg.atoms, radius).moments();
            let lin = 1.0 + x.abs() + u.abs() + m.root_second_moment();
            let quad = 1.0 + m.second_moment;
            let fx = cost.f0x(t, x, u) + cost.f1x(t, x, &m);
            worst = worst
                .max(fx.abs() / lin)
                .max(cost.f0u(t, x, u).abs() / lin)
                .max(cost.gx(x, &m).abs() / lin)
                .max(cost.f(t, 0.0, 0.0, &m).abs() / quad)
                .max(cost.g(0.0, &m).abs() / quad);
        }
        push("H2", worst <= l * (1.0 + TOL_EXACT), format!("max growth ratio = {worst:.4e}, L = {l:.4e}"));
    }

    // (H3) derivative consistency and Lipschitz derivatives
    {
        let mut rng = stream(cfg.seed, 3);
        let mut fd_err = 0.0_f64;
        let mut lip = 0.0_f64;
        let e = 1e-5;
        for _ in 0..cfg.samples {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let x = rng.gen_range(-radius..radius);
            let u = rng.gen_range(-radius..radius);
            let x2 = rng.gen_range(-radius..radius);
            let u2 = rng.gen_range(-radius..radius);
            let m = sample_measure(&mut rng, cfg.atoms, radius).moments();
            let scale = |v: f64| 1.0 + v.abs();
            let d0x = (cost.f0(t, x + e, u) - cost.f0(t, x - e, u)) / (2.0 * e);
            let d0u = (cost.f0(t, x, u + e) - cost.f0(t, x, u - e)) / (2.0 * e);
            let d1x = (cost.f1(t, x + e, &m) - cost.f1(t, x - e, &m)) / (2.0 * e);
            let dgx = (cost.g(x + e, &m) - cost.g(x - e, &m)) / (2.0 * e);
            fd_err = fd_err
                .max((d0x - cost.f0x(t, x, u)).abs() / scale(d0x))
                .max((d0u - cost.f0u(t, x, u)).abs() / scale(d0u))
                .max((d1x - cost.f1x(t, x, &m)).abs() / scale(d1x))
                .max((dgx - cost.gx(x, &m)).abs() / scale(dgx));
            let dz = ((x2 - x).powi(2) + (u2 - u).powi(2)).sqrt();
            if dz > 1e-8 {
                let d0 = ((cost.f0x(t, x2, u2) - cost.f0x(t, x, u)).powi(2)
                    + (cost.f0u(t, x2, u2) - cost.f0u(t, x, u)).powi(2))
                .sqrt();
                lip = lip.max(d0 / dz);
            }
            if (x2 - x).abs() > 1e-8 {
                lip = lip
                    .max((cost.f1x(t, x2, &m) - cost.f1x(t, x, &m)).abs() / (x2 - x).abs())
                    .max((cost.gx(x2, &m) - cost.gx(x, &m)).abs() / (x2 - x).abs());
            }
        }
        push(
            "H3",
            fd_err <= 1e-6 && lip <= l * (1.0 + TOL_EXACT),
            format!("max finite-difference error = {fd_err:.3e}, max derivative Lipschitz ratio = {lip:.4e}, L = {l:.4e}"),
        );
    }

    // (H4) convexity
    let mut c_f_hat = f64::INFINITY;
    {
        let mut rng = stream(cfg.seed, 4);
        let mut mono_x = f64::INFINITY;
        let mut gap_min = f64::INFINITY;
        for _ in 0..cfg.samples {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let (x, x2) = (rng.gen_range(-radius..radius), rng.gen_range(-radius..radius));
            let (u, u2) = (rng.gen_range(-radius..radius), rng.gen_range(-radius..radius));
            let m = sample_measure(&mut rng, cfg.atoms, radius).moments();
            mono_x = mono_x
                .min((cost.f1x(t, x2, &m) - cost.f1x(t, x, &m)) * (x2 - x))
                .min((cost.gx(x2, &m) - cost.gx(x, &m)) * (x2 - x));
            let gap = cost.f0(t, x2, u2)
                - cost.f0(t, x, u)
                - cost.f0x(t, x, u) * (x2 - x)
                - cost.f0u(t, x, u) * (u2 - u);
            let du2 = (u2 - u).powi(2);
            let scale = 1.0 + cost.f0(t, x2, u2).abs() + cost.f0(t, x, u).abs();
            gap_min = gap_min.min(gap - spec.c_f() * du2 + TOL_EXACT * scale);
            if du2 > 1e-6 {
                c_f_hat = c_f_hat.min((gap - 0.5 * cost.h * (x2 - x).powi(2)).max(0.0) / du2);
            }
        }
        push(
            "H4",
            mono_x >= -TOL_MONO && gap_min >= 0.0 && spec.c_f() > 0.0,
            format!("min (f1x,g_x) monotonicity product = {mono_x:.4e}, min convexity slack = {gap_min:.4e}"),
        );
    }

    // (H5) Lipschitz continuity in m
    let mut l_m_hat = 0.0_f64;
    {
        let mut rng = stream(cfg.seed, 5);
        let mut l_hat = 0.0_f64;
        for _ in 0..cfg.measure_pairs {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let x = rng.gen_range(-radius..radius);
            let (m1, m2) = sample_pair(&mut rng, cfg);
            let d = w2(&m1, &m2).expect("equal atom counts");
            if d < 1e-12 {
                continue;
            }
            let (a, b) = (m1.moments(), m2.moments());
            let coef = |m: &MeasureMoments| {
                (
                    spec.b.phi0.eval(m),
                    spec.sigma.phi0.eval(m),
                    spec.sigma_tilde.phi0.eval(m),
                )
            };
            let (ca, cb) = (coef(&a), coef(&b));
            let diff = (ca.0 - cb.0).abs() + (ca.1 - cb.1).abs() + (ca.2 - cb.2).abs();
            l_m_hat = l_m_hat.max(diff / d);
            let dd = (cost.f1x(t, x, &a) - cost.f1x(t, x, &b)).abs() + (cost.gx(x, &a) - cost.gx(x, &b)).abs();
            l_hat = l_hat.max(dd / d);
        }
        let lm = spec.constants.l_m;
        push(
            "H5",
            l_m_hat <= lm * (1.0 + 1e-12) + 1e-15 && l_hat <= l * (1.0 + 1e-12),
            format!("estimated L_m = {l_m_hat:.6e} (declared {lm:.6e}), estimated cost modulus = {l_hat:.4e}"),
        );
    }

    // (H6) weak monotonicity under several couplings
    let (mut mono_f1_min, mut mono_g_min) = (f64::INFINITY, f64::INFINITY);
    {
        let mut rng = stream(cfg.seed, 6);
        for _ in 0..cfg.measure_pairs {
            let t = sample_time(&mut rng, spec, cfg.grid_steps);
            let (m1, m2) = sample_pair(&mut rng, cfg);
            let (a, b) = (m1.moments(), m2.moments());
            let mut perm: Vec<usize> = (0..m2.len()).collect();
            perm.shuffle(&mut rng);
            let n = m1.len();
            let mut shuffled = vec![0.0; n * n];
            for (i, &p) in perm.iter().enumerate() {
                shuffled[i * n + p] = 1.0 / n as f64;
            }
            let couplings = [
                CouplingMatrix::comonotone(&m1, &m2).expect("equal counts"),
                CouplingMatrix::antithetic(&m1, &m2).expect("equal counts"),
                CouplingMatrix::independent(n, n),
                CouplingMatrix::new(n, n, shuffled).expect("permutation coupling"),
            ];
            for gamma in &couplings {
                let f1 = gamma.expectation(&m1, &m2, |x, y| (cost.f1x(t, x, &a) - cost.f1x(t, y, &b)) * (x - y));
                let g = gamma.expectation(&m1, &m2, |x, y| (cost.gx(x, &a) - cost.gx(y, &b)) * (x - y));
                mono_f1_min = mono_f1_min.min(f1);
                mono_g_min = mono_g_min.min(g);
            }
        }
        push(
            "H6",
            mono_f1_min >= -TOL_MONO && mono_g_min >= -TOL_MONO,
            format!("min coupled monotonicity: f1x {mono_f1_min:.4e}, g_x {mono_g_min:.4e}"),
        );
    }

    ValidationReport {
        checks,
        l_m_hat,
        c_f_hat,
        mono_f1_min,
        mono_g_min,
    }
}

/// Smallness ratios of the existence and uniqueness results evaluated with
/// explicit (conservative) Gronwall constants.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub l: f64,
    pub b_u: f64,
    pub l_m: f64,
    pub c_f: f64,
    pub horizon: f64,
    /// Conservative stand-ins for the unspecified SDE/BSDE estimate
    /// constants; not the constants of the existence results.
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub continuation_ratio: f64,
    pub continuation_ok: bool,
    /// Lipschitz constant assumed for the terminal map (that of g_x).
    pub c_v: f64,
    pub local_ratio: f64,
    pub local_bound: f64,
    pub local_ok: bool,
    pub stitching_ratio: f64,
    pub stitching_ok: bool,
}

pub fn gronwall_constants(l: f64, t: f64) -> (f64, f64, f64) {
    let l2 = l * l;
    let c1 = 3.0 * (1.0 + t) * (1.0 + l2 * t) * (3.0 * l2 * t * (t + 4.0)).exp();
    let c2 = 8.0 * (1.0 + l2) * (1.0 + t) * (8.0 * l2 * t * (t + 1.0)).exp();
    let delta = 2.0 / (c2 * (1.0 + c1) * (t + 1.0) + 3.0 * t * c1);
    (c1, c2, delta)
}

pub fn sufficient_condition_report(spec: &ModelSpec) -> ConditionReport {
    let k = spec.constants;
    let t = spec.horizon;
    let (c1, c2, delta) = gronwall_constants(k.l, t);
    let continuation_ratio = k.l_m / k.c_f;
    let c_v = k.l;
    let local_ratio = k.b_u / k.c_f;
    let local_bound = 1.0 / (24.0 * k.l * c_v);
    let stitching_ratio = (k.b_u / k.c_f * (1.0 + 1.0 / k.c_f).powi(4)).max(k.l_m / k.c_f);
    ConditionReport {
        l: k.l,
        b_u: k.b_u,
        l_m: k.l_m,
        c_f: k.c_f,
        horizon: t,
        c1,
        c2,
        delta,
        continuation_ratio,
        continuation_ok: continuation_ratio <= delta,
        c_v,
        local_ratio,
        local_bound,
        local_ok: local_ratio <= local_bound,
        stitching_ratio,
        stitching_ok: stitching_ratio <= delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearCoefficient, MeasureTerm, PRESETS};

    #[test]
    fn shipped_presets_validate() {
        let cfg = SamplerConfig::default();
        for name in PRESETS {
            let spec = ModelSpec::preset_default(name).unwrap();
            let rep = validate_assumptions(&spec, &cfg);
            if name == "concave_terminal" {
                assert!(rep.failed().contains(&"H4"), "{name}: {:?}", rep.checks);
            } else {
                assert!(rep.all_passed(), "{name}: {:?}", rep.checks);
            }
        }
    }

    #[test]
    fn measure_lipschitz_estimate_for_mean_drift() {
        let kappa = 0.7;
        let mut spec = ModelSpec::preset_default("lq").unwrap();
        spec.b = LinearCoefficient::new(
            MeasureTerm {
                mean_coeff: kappa,
                ..Default::default()
            },
            0.0,
            1.0,
        );
        spec = ModelSpec::new("k", 1.0, spec.b, spec.sigma, spec.sigma_tilde, spec.cost).unwrap();
        let rep = validate_assumptions(&spec, &SamplerConfig::default());
        assert!(rep.l_m_hat >= 0.9 * kappa && rep.l_m_hat <= kappa * (1.0 + 1e-12), "{}", rep.l_m_hat);
    }

    #[test]
    fn concave_terminal_cost_fails_convexity() {
        let params = [("w_T".to_string(), -2.0), ("s_T".to_string(), 0.0)].into();
        let spec = ModelSpec::preset("lq", 1.0, &params).unwrap();
        let rep = validate_assumptions(&spec, &SamplerConfig::default());
        assert!(rep.failed().contains(&"H4"));
    }

    #[test]
    fn condition_report_ratios() {
        let spec = ModelSpec::preset_default("lq").unwrap();
        let rep = sufficient_condition_report(&spec);
        assert_eq!(rep.continuation_ratio, 0.0);
        assert!(rep.continuation_ok && rep.local_ok && rep.stitching_ok);
        let (c1, c2) = (
            3.0 * 2.0 * 5.0 * (3.0 * 4.0 * 5.0f64).exp(),
            8.0 * 5.0 * 2.0 * (8.0 * 4.0 * 2.0f64).exp(),
        );
        assert!((rep.c1 - c1).abs() <= 1e-12 * c1);
        assert!((rep.c2 - c2).abs() <= 1e-12 * c2);
        assert!((rep.delta - 2.0 / (c2 * (1.0 + c1) * 2.0 + 3.0 * c1)).abs() <= 1e-12 * rep.delta);
        assert!((rep.local_bound - 1.0 / 96.0).abs() < 1e-15);

        let params = [("r".to_string(), 10.0), ("b0_mean".to_string(), 0.01)].into();
        let spec = ModelSpec::preset("lq", 1.0, &params).unwrap();
        let rep = sufficient_condition_report(&spec);
        let l = spec.constants.l;
        assert_eq!(l, 20.0);
        assert_eq!(rep.continuation_ratio, 0.01 / 10.0);
        let c1 = 3.0 * 2.0 * (1.0 + l * l) * (3.0 * l * l * 5.0f64).exp();
        let c2 = 8.0 * (1.0 + l * l) * 2.0 * (8.0 * l * l * 2.0f64).exp();
        // L = 20 overflows both exponentials; the bound then degenerates to δ = 0
        assert_eq!(rep.c1, c1);
        assert_eq!(rep.c2, c2);
        assert_eq!(rep.delta, 0.0);
        assert!(!rep.continuation_ok);
    }
}
