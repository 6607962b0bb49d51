use std::collections::BTreeMap;

use mfg_core::bsde::{
    s_distance, s_norm, solve_bsde_given_control, solve_fbsde_given_m, solve_system, BackwardSolution,
    ForwardBackwardSystem, PicardOptions, SolutionBundle, TerminalCondition,
};
use mfg_core::forward_sim::{simulate_forward, ControlRule, InitialLaw, MeasureSource, NoiseBundle, PathTable, TimeGrid};
use mfg_core::lq_oracle::{solve_riccati, LqParameters};
use mfg_core::measures::{EmpiricalMeasure, MeasureFlow};
use mfg_core::model::ModelSpec;

fn spec_with(pairs: &[(&str, f64)]) -> ModelSpec {
    let p: BTreeMap<String, f64> = pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    ModelSpec::preset("lq", 1.0, &p).unwrap()
}

fn dirac_flow(grid: TimeGrid, paths: usize, x: f64) -> MeasureFlow {
    MeasureFlow::constant(grid, paths, EmpiricalMeasure::dirac(x))
}

#[test]
fn constant_terminal_without_driver_is_constant() {
    let spec = spec_with(&[("w", 0.0), ("w_T", 0.0)]);
    let noise = NoiseBundle::new(1, 4, 64, TimeGrid::new(1.0, 20).unwrap()).unwrap();
    let (ens, flow) = simulate_forward(&spec, ControlRule::Zero, &noise, &InitialLaw::Normal { mean: 0.0, std: 1.0 }).unwrap();
    let back = solve_bsde_given_control(&spec, &ens, &flow, TerminalCondition::constant(1.5), &noise).unwrap();
    assert!(back.p.data().iter().all(|v| (v - 1.5).abs() < 1e-10));
    // least-squares roundoff only
    let worst = back.q.data().iter().chain(back.q_tilde.data()).fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(worst < 1e-8, "{worst}");
}

/// With dX = dW and v(x) = x the adjoint is X itself: p = X, q = 1, q̃ = 0.
#[test]
fn identity_terminal_on_brownian_state() {
    let spec = spec_with(&[("w", 0.0), ("w_T", 0.0), ("sigma0", 1.0), ("sigma_tilde0", 0.0)]);
    let (m, k) = (8, 256);
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let noise = NoiseBundle::new(4, m, k, grid).unwrap();
    let (ens, flow) = simulate_forward(&spec, ControlRule::Zero, &noise, &InitialLaw::Normal { mean: 0.0, std: 1.0 }).unwrap();
    let back = solve_bsde_given_control(&spec, &ens, &flow, TerminalCondition::affine(0.0, 1.0, 0.0), &noise).unwrap();
    let n_all = (m * k * grid.steps()) as f64;
    let rms = |t: &PathTable, f: &dyn Fn(usize, usize, usize) -> f64| {
        let mut s = 0.0;
        for j in 0..m {
            for kk in 0..k {
                for n in 0..grid.steps() {
                    s += (t.get(j, kk, n) - f(j, kk, n)).powi(2);
                }
            }
        }
        (s / n_all).sqrt()
    };
    assert!(rms(&back.p, &|j, kk, n| ens.states.get(j, kk, n)) < 0.05);
    assert!(rms(&back.q, &|_, _, _| 1.0) < 0.05);
    assert!(rms(&back.q_tilde, &|_, _, _| 0.0) < 0.05);

    // the pooled mean of p is a martingale
    let pooled = |n: usize| (0..m).map(|j| back.p.slice(j, n).iter().sum::<f64>()).sum::<f64>() / (m * k) as f64;
    let end = pooled(grid.steps());
    for n in 0..grid.steps() {
        assert!((pooled(n) - end).abs() <= 4.0 / ((m * k) as f64).sqrt(), "step {n}");
    }
}

#[test]
fn terminal_slice_is_exact() {
    let spec = ModelSpec::preset_default("lq").unwrap();
    let noise = NoiseBundle::new(2, 3, 16, TimeGrid::new(1.0, 10).unwrap()).unwrap();
    let (ens, flow) = simulate_forward(&spec, ControlRule::Zero, &noise, &InitialLaw::Normal { mean: 1.0, std: 1.0 }).unwrap();
    let v = TerminalCondition::cost_gradient(&spec);
    let back = solve_bsde_given_control(&spec, &ens, &flow, v, &noise).unwrap();
    for j in 0..3 {
        let m = flow.moments(10, j);
        for k in 0..16 {
            assert_eq!(back.p.get(j, k, 10), v.eval(&spec, ens.states.get(j, k, 10), &m));
        }
    }
}

#[test]
fn uncontrolled_dynamics_converge_in_one_sweep() {
    let spec = spec_with(&[("b2", 0.0)]);
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let noise = NoiseBundle::new(3, 4, 32, grid).unwrap();
    let flow = dirac_flow(grid, 4, 0.0);
    let xi0 = InitialLaw::Normal { mean: 1.0, std: 0.5 };
    let b = solve_fbsde_given_m(&spec, &flow, &xi0, TerminalCondition::cost_gradient(&spec), &noise, &PicardOptions::default()).unwrap();
    assert_eq!(b.history.len(), 1);
    assert!(b.controls().data().iter().all(|&u| u == 0.0));
}

/// Against m ≡ δ₀ the problem is plain LQ control, whose feedback is
/// u = −b₂(aX + c)/(2r) with (a, c) from the Riccati equations without mean
/// coupling.
#[test]
fn frozen_dirac_flow_matches_riccati_feedback() {
    let spec = ModelSpec::preset_default("lq").unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let noise = NoiseBundle::new(8, 16, 256, grid).unwrap();
    let flow = dirac_flow(grid, 16, 0.0);
    let xi0 = InitialLaw::Normal { mean: 1.0, std: 0.5 };
    let b = solve_fbsde_given_m(&spec, &flow, &xi0, TerminalCondition::cost_gradient(&spec), &noise, &PicardOptions::default()).unwrap();
    let sol = solve_riccati(&LqParameters::from_spec(&spec).unwrap(), &grid).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..grid.steps() {
        let [a, _, c] = sol.at(grid.time(n));
        for j in 0..16 {
            for k in 0..256 {
                let want = -spec.b.phi2 * (a * b.states().get(j, k, n) + c) / (2.0 * spec.cost.r);
                num += (b.controls().get(j, k, n) - want).powi(2);
                den += want * want;
            }
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel <= 0.02, "relative rms error {rel}");
    assert!(b.optimality_residual(&spec) <= 10.0 * PicardOptions::default().tol);
}

#[test]
fn lq_adjoint_is_affine_in_state_and_mean() {
    let spec = ModelSpec::preset_default("lq").unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let noise = NoiseBundle::new(6, 32, 128, grid).unwrap();
    let x0 = InitialLaw::Normal { mean: 1.0, std: 0.5 }.sample(&noise);
    let sys = ForwardBackwardSystem {
        spec: &spec,
        noise: &noise,
        grid,
        x0: &x0,
        gamma: 1.0,
        forcing: None,
        terminal: TerminalCondition::cost_gradient(&spec),
        measure: MeasureSource::SelfConsistent,
    };
    let b = solve_system(&sys, ControlRule::Zero, &PicardOptions::default()).unwrap();
    let sol = solve_riccati(&LqParameters::from_spec(&spec).unwrap(), &grid).unwrap();
    let p = &b.backward.p;
    let (mut ss_res, mut ss_tot, mut sum, mut cnt) = (0.0, 0.0, 0.0, 0.0);
    for v in p.data() {
        sum += v;
        cnt += 1.0;
    }
    let mean = sum / cnt;
    for n in 0..grid.nodes() {
        let [a, beta, c] = sol.at(grid.time(n));
        for j in 0..32 {
            let mb = b.measure.moments(n, j).mean;
            for k in 0..128 {
                let v = p.get(j, k, n);
                ss_res += (v - (a * b.states().get(j, k, n) + beta * mb + c)).powi(2);
                ss_tot += (v - mean).powi(2);
            }
        }
    }
    let r2 = 1.0 - ss_res / ss_tot;
    assert!(r2 >= 0.99, "R² = {r2}");
    // residuals are non-increasing after the second iterate
    assert!(b.history.windows(2).skip(1).all(|w| w[1] <= w[0]), "{:?}", b.history);
}

/// Solves against one frozen flow from two initial laws shifted by 0.5: with
/// a monotone terminal map the adjoint moves with the state.
#[test]
fn shifted_solves_keep_adjoint_and_state_comonotone() {
    let spec = ModelSpec::preset_default("lq").unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let noise = NoiseBundle::new(12, 8, 128, grid).unwrap();
    let flow = dirac_flow(grid, 8, 0.8);
    let v = TerminalCondition::cost_gradient(&spec);
    let opts = PicardOptions::default();
    let a = solve_fbsde_given_m(&spec, &flow, &InitialLaw::Normal { mean: 1.0, std: 0.5 }, v, &noise, &opts).unwrap();
    let b = solve_fbsde_given_m(&spec, &flow, &InitialLaw::Normal { mean: 1.5, std: 0.5 }, v, &noise, &opts).unwrap();
    for n in [0, 25, 50] {
        let (mut worst, mut scale) = (f64::INFINITY, 0.0);
        for j in 0..8 {
            for k in 0..128 {
                let dp = b.backward.p.get(j, k, n) - a.backward.p.get(j, k, n);
                let dx = b.states().get(j, k, n) - a.states().get(j, k, n);
                worst = f64::min(worst, dp * dx);
                scale += (dp * dx).abs() / 1024.0;
            }
        }
        assert!(worst >= -0.05 * scale, "node {n}: {worst} vs scale {scale}");
    }
}

fn scaled(b: &SolutionBundle, s: f64) -> SolutionBundle {
    let mut ens = b.ensemble.clone();
    ens.states = ens.states.map(|v| s * v);
    ens.controls = ens.controls.map(|v| s * v);
    let back = BackwardSolution {
        p: b.backward.p.map(|v| s * v),
        q: b.backward.q.map(|v| s * v),
        q_tilde: b.backward.q_tilde.map(|v| s * v),
        ..b.backward.clone()
    };
    SolutionBundle::new(ens, back, b.measure.clone(), Vec::new())
}

#[test]
fn s_norm_is_homogeneous() {
    let spec = ModelSpec::preset_default("lq").unwrap();
    let noise = NoiseBundle::new(2, 3, 8, TimeGrid::new(1.0, 10).unwrap()).unwrap();
    let flow = dirac_flow(noise.grid(), 3, 0.0);
    let b = solve_fbsde_given_m(
        &spec,
        &flow,
        &InitialLaw::Normal { mean: 1.0, std: 0.5 },
        TerminalCondition::cost_gradient(&spec),
        &noise,
        &PicardOptions::default(),
    )
    .unwrap();
    let n = s_norm(&b);
    assert!(n > 0.0);
    for lambda in [0.5, 2.0, 3.0] {
        assert!((s_norm(&scaled(&b, lambda)) - lambda * n).abs() <= 1e-12 * n * lambda);
    }
    assert_eq!(s_norm(&scaled(&b, 0.0)), 0.0);
    assert_eq!(s_distance(&b, &b).unwrap(), 0.0);
}
