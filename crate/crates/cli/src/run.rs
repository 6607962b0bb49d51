//! The four subcommands.

use std::io::{BufWriter, Write};
use std::time::Instant;

use mfg_core::bsde::{
    solve_fbsde_given_m, solve_system, AdjointPolicy, ForwardBackwardSystem, PicardOptions, SolutionBundle,
    TerminalCondition,
};
use mfg_core::forward_sim::{ControlRule, FeedbackControl, MeasureSource, NoiseBundle};
use mfg_core::lq_oracle::{
    dt_study, is_decreasing, oracle_errors, oracle_solution, particle_study, solve_riccati, LqParameters, OracleError,
    TrendLevel,
};
use mfg_core::measures::{EmpiricalMeasure, MeasureFlow, MeasureMoments};
use mfg_core::mfg_solvers::{solve_continuation, solve_stitched, ContinuationOptions, StitchOptions};
use mfg_core::model::{
    cost_functional, sufficient_condition_report, validate_assumptions, ConditionReport, ModelSpec, SamplerConfig,
    ValidationReport,
};
use mfg_core::nplayer::{gap_table, mean_field_strategy, median_gaps, GapRow};
use serde::Serialize;

use crate::config::{RunConfig, SolverChoice};
use crate::report::{Artifacts, FeedbackState, ResidualSeries, SolverReport, ARTIFACT_VERSION};
use crate::CliError;

/// Sampled trajectories: the first few particles of the first few paths.
const SAMPLE_PATHS: usize = 4;
const SAMPLE_PARTICLES: usize = 8;
/// Points of the state grid the control field is tabulated on.
const FIELD_POINTS: usize = 41;

pub const FEEDBACK_FILE: &str = "feedback.json";

fn method_name(choice: SolverChoice) -> &'static str {
    match choice {
        SolverChoice::Continuation => "continuation",
        SolverChoice::Stitched => "stitched",
        SolverChoice::GivenM => "given_m",
    }
}

fn frozen_flow(cfg: &RunConfig, noise: &NoiseBundle) -> MeasureFlow {
    MeasureFlow::constant(noise.grid(), noise.paths(), EmpiricalMeasure::dirac(cfg.solver.frozen_mean))
}

/// Solution of one method plus its residual bookkeeping.
struct Solved {
    bundle: SolutionBundle,
    residuals: Vec<ResidualSeries>,
    max_ratio: Option<f64>,
    gamma_schedule: Option<Vec<mfg_core::mfg_solvers::ContinuationStep>>,
    intervals: Option<mfg_core::mfg_solvers::StitchReport>,
}

fn solve_method(
    choice: SolverChoice,
    cfg: &RunConfig,
    spec: &ModelSpec,
    noise: &NoiseBundle,
    picard: &PicardOptions,
) -> Result<Solved, CliError> {
    let xi0 = cfg.initial.law();
    Ok(match choice {
        SolverChoice::Continuation => {
            let opts = ContinuationOptions {
                eta0: cfg.solver.eta0,
                picard: *picard,
                ..ContinuationOptions::default()
            };
            let (bundle, state) = solve_continuation(spec, &xi0, noise, &opts)?;
            let mut residuals: Vec<ResidualSeries> = state
                .history
                .iter()
                .enumerate()
                .map(|(i, s)| ResidualSeries {
                    stage: format!("gamma_step_{i}"),
                    residuals: s.residuals.clone(),
                    ratio: Some(s.ratio),
                })
                .collect();
            residuals.push(ResidualSeries {
                stage: "polish".into(),
                residuals: state.polish.clone(),
                ratio: None,
            });
            Solved {
                bundle,
                residuals,
                max_ratio: Some(state.max_accepted_ratio()),
                gamma_schedule: Some(state.history),
                intervals: None,
            }
        }
        SolverChoice::Stitched => {
            let opts = StitchOptions {
                picard: *picard,
                intervals: cfg.solver.intervals,
                ..StitchOptions::default()
            };
            let (bundle, report) = solve_stitched(spec, &xi0, noise, &opts)?;
            let sweep = |name: &str, reps: &[mfg_core::mfg_solvers::IntervalReport]| {
                reps.iter()
                    .map(|r| ResidualSeries {
                        stage: format!("{name}_{:.6}_{:.6}", r.start, r.end),
                        residuals: r.residuals.clone(),
                        ratio: Some(r.ratio),
                    })
                    .collect::<Vec<_>>()
            };
            let mut residuals = sweep("backward", &report.backward);
            residuals.extend(sweep("forward", &report.forward));
            Solved {
                bundle,
                residuals,
                max_ratio: Some(report.max_ratio()),
                gamma_schedule: None,
                intervals: Some(report),
            }
        }
        SolverChoice::GivenM => {
            let flow = frozen_flow(cfg, noise);
            let bundle = solve_fbsde_given_m(spec, &flow, &xi0, TerminalCondition::cost_gradient(spec), noise, picard)?;
            let residuals = vec![ResidualSeries {
                stage: "picard".into(),
                residuals: bundle.history.clone(),
                ratio: None,
            }];
            Solved {
                bundle,
                residuals,
                max_ratio: None,
                gamma_schedule: None,
                intervals: None,
            }
        }
    })
}

/// Re-enters the γ = 1 Picard iteration from the feedback a previous run
/// saved. From a converged state the first sweep already meets the
/// tolerance.
fn resume(cfg: &RunConfig, spec: &ModelSpec, noise: &NoiseBundle, picard: &PicardOptions) -> Result<Solved, CliError> {
    let path = std::path::Path::new(&cfg.out).join(FEEDBACK_FILE);
    let state = FeedbackState::load(&path)?;
    if state.config_hash != cfg.hash() || state.seed != cfg.seed {
        return Err(CliError::Config(format!(
            "{} was written for config {} seed {}, not {} seed {}",
            path.display(),
            state.config_hash,
            state.seed,
            cfg.hash(),
            cfg.seed
        )));
    }
    let grid = noise.grid();
    if state.fits.len() != grid.steps() {
        return Err(CliError::Config(format!("{} holds {} fits for {} steps", path.display(), state.fits.len(), grid.steps())));
    }
    let x0 = cfg.initial.law().sample(noise);
    let flow = frozen_flow(cfg, noise);
    let measure = match cfg.solver.method {
        SolverChoice::GivenM => MeasureSource::Frozen(&flow),
        _ => MeasureSource::SelfConsistent,
    };
    let policy = AdjointPolicy::new(spec, grid, 1.0, None, state.fits);
    let sys = ForwardBackwardSystem {
        spec,
        noise,
        grid,
        x0: &x0,
        gamma: 1.0,
        forcing: None,
        terminal: TerminalCondition::cost_gradient(spec),
        measure,
    };
    let bundle = solve_system(&sys, ControlRule::Feedback(&policy), picard)?;
    let residuals = vec![ResidualSeries {
        stage: "resume".into(),
        residuals: bundle.history.clone(),
        ratio: None,
    }];
    Ok(Solved {
        bundle,
        residuals,
        max_ratio: None,
        gamma_schedule: None,
        intervals: None,
    })
}

pub struct SolveOutcome {
    pub report: SolverReport,
    pub bundle: SolutionBundle,
}

pub fn solve(cfg: &RunConfig, resumed: bool) -> Result<SolveOutcome, CliError> {
    let clock = Instant::now();
    let spec = cfg.spec()?;
    let noise = cfg.noise();
    let picard = cfg.picard(&spec);
    let art = Artifacts::create(cfg)?;
    let solved = if resumed {
        resume(cfg, &spec, &noise, &picard)?
    } else {
        solve_method(cfg.solver.method, cfg, &spec, &noise, &picard)?
    };
    let method_agreement = match (cfg.solver.agreement, cfg.solver.method) {
        (true, SolverChoice::Continuation) | (true, SolverChoice::Stitched) => {
            let other = match cfg.solver.method {
                SolverChoice::Continuation => SolverChoice::Stitched,
                _ => SolverChoice::Continuation,
            };
            let b = solve_method(other, cfg, &spec, &noise, &picard)?.bundle;
            let a = solved.bundle.controls();
            Some(a.rms_distance(b.controls()) / a.rms().max(f64::MIN_POSITIVE))
        }
        _ => None,
    };

    let bundle = solved.bundle;
    write_solution(&art, &spec, &bundle)?;
    write_residuals(&art, &solved.residuals)?;
    let state = FeedbackState {
        config_hash: art.header().config_hash.clone(),
        seed: cfg.seed,
        method: method_name(cfg.solver.method).into(),
        fits: bundle.backward.fits.clone(),
    };
    let mut file = BufWriter::new(std::fs::File::create(art.path(FEEDBACK_FILE))?);
    serde_json::to_writer(&mut file, &state)?;
    file.flush()?;

    let report = SolverReport {
        artifact_version: ARTIFACT_VERSION,
        config: cfg.clone(),
        method: method_name(cfg.solver.method).into(),
        resumed,
        residuals: solved.residuals,
        final_iterations: bundle.history.len(),
        max_ratio: solved.max_ratio,
        gamma_schedule: solved.gamma_schedule,
        intervals: solved.intervals,
        condition: sufficient_condition_report(&spec),
        method_agreement,
        cost: cost_functional(&spec, &bundle)?,
        optimality_residual: bundle.optimality_residual(&spec),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    art.json("report.json", &report)?;
    Ok(SolveOutcome { report, bundle })
}

fn write_residuals(art: &Artifacts, series: &[ResidualSeries]) -> Result<(), CliError> {
    let mut w = art.csv("residuals.csv")?;
    w.write_record(["stage", "iteration", "residual"])?;
    for s in series {
        for (i, r) in s.residuals.iter().enumerate() {
            w.serialize((&s.stage, i, r))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_solution(art: &Artifacts, spec: &ModelSpec, bundle: &SolutionBundle) -> Result<(), CliError> {
    let grid = bundle.grid();
    let (paths, particles) = (bundle.states().paths(), bundle.states().particles());

    let mut w = art.csv("conditional_mean.csv")?;
    w.write_record(["t", "path", "mean", "second_moment"])?;
    for n in 0..grid.nodes() {
        for j in 0..paths {
            let m = bundle.measure.moments(n, j);
            w.serialize((grid.time(n), j, m.mean, m.second_moment))?;
        }
    }
    w.flush()?;

    let mut w = art.csv("trajectories.csv")?;
    w.write_record(["path", "particle", "step", "t", "x", "u", "p"])?;
    for j in 0..paths.min(SAMPLE_PATHS) {
        for k in 0..particles.min(SAMPLE_PARTICLES) {
            for n in 0..grid.nodes() {
                let u = (n < grid.steps()).then(|| bundle.controls().get(j, k, n));
                w.serialize((j, k, n, grid.time(n), bundle.states().get(j, k, n), u, bundle.backward.p.get(j, k, n)))?;
            }
        }
    }
    w.flush()?;

    // u(t, x) at the cross-path average moments, over the range of X at t
    let strategy = mean_field_strategy(spec, bundle)?;
    let mut w = art.csv("control_field.csv")?;
    w.write_record(["t", "x", "u"])?;
    for n in 0..grid.steps() {
        let col = bundle.states().column(n);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut mean, mut second) = (0.0, 0.0);
        for j in 0..paths {
            let m = bundle.measure.moments(n, j);
            mean += m.mean / paths as f64;
            second += m.second_moment / paths as f64;
        }
        let m = MeasureMoments { mean, second_moment: second };
        for i in 0..FIELD_POINTS {
            let x = lo + (hi - lo) * i as f64 / (FIELD_POINTS - 1) as f64;
            w.serialize((grid.time(n), x, strategy.control(grid.offset() + n, x, &m, 0, 0)))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ValidateSummary {
    pub preset: String,
    pub all_passed: bool,
    pub failed: Vec<String>,
    pub validation: ValidationReport,
    pub condition: ConditionReport,
}

/// Assumption checks and the sufficient-condition ratios. Fails with
/// [`CliError::Validation`] after writing the report when a check fails.
pub fn validate(cfg: &RunConfig) -> Result<ValidateSummary, CliError> {
    let spec = cfg.spec()?;
    let art = Artifacts::create(cfg)?;
    let sampler = SamplerConfig {
        seed: cfg.seed,
        ..SamplerConfig::default()
    };
    let validation = validate_assumptions(&spec, &sampler);
    let summary = ValidateSummary {
        preset: cfg.model.preset.clone(),
        all_passed: validation.all_passed(),
        failed: validation.failed().into_iter().map(String::from).collect(),
        condition: sufficient_condition_report(&spec),
        validation,
    };
    art.json("validate.json", &summary)?;
    if summary.all_passed {
        Ok(summary)
    } else {
        Err(CliError::Validation(format!("failed {}", summary.failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
pub struct OracleSummary {
    pub method: String,
    pub errors: OracleError,
    pub dt_trend: Vec<TrendLevel>,
    pub dt_decreasing: bool,
    pub k_trend: Vec<TrendLevel>,
    pub k_decreasing: bool,
    pub wall_clock_seconds: f64,
}

fn lq_parameters(spec: &ModelSpec) -> Result<LqParameters, CliError> {
    LqParameters::from_spec(spec).map_err(|e| match e {
        mfg_core::Error::NoOracle(m) => CliError::NoOracle(m),
        other => CliError::Solver(other),
    })
}

/// Solver against the Riccati oracle on the run's noise, plus the Δt and K
/// refinement studies.
pub fn compare_oracle(cfg: &RunConfig) -> Result<OracleSummary, CliError> {
    let clock = Instant::now();
    let spec = cfg.spec()?;
    let params = lq_parameters(&spec)?;
    if cfg.solver.method == SolverChoice::GivenM {
        return Err(CliError::Config("`solver.method`: compare-oracle needs continuation or stitched".into()));
    }
    let art = Artifacts::create(cfg)?;
    let noise = cfg.noise();
    let xi0 = cfg.initial.law();
    let picard = cfg.picard(&spec);
    let grid = noise.grid();
    let sol = solve_riccati(&params, &grid)?;

    let mut w = art.csv("oracle_coefficients.csv")?;
    w.write_record(["t", "a", "beta", "c"])?;
    for (n, [a, b, c]) in sol.on_grid(&grid).into_iter().enumerate() {
        w.serialize((grid.time(n), a, b, c))?;
    }
    w.flush()?;

    let method = cfg.solver.method;
    let run = |nb: &NoiseBundle| solve_method(method, cfg, &spec, nb, &picard).map(|s| s.bundle);
    let bundle = run(&noise)?;
    let errors = oracle_errors(&bundle, &oracle_solution(&sol, &noise, &xi0, &spec)?)?;
    let mut w = art.csv("oracle_errors.csv")?;
    w.write_record(["method", "control", "state", "adjoint"])?;
    w.serialize((method_name(method), errors.control, errors.state, errors.adjoint))?;
    w.flush()?;

    let core = |nb: &NoiseBundle| {
        run(nb).map_err(|e| match e {
            CliError::Solver(inner) => inner,
            other => mfg_core::Error::Inconclusive(other.to_string()),
        })
    };
    let o = &cfg.oracle;
    let dt_trend = dt_study(&spec, &xi0, cfg.seed, cfg.ensemble.paths, cfg.ensemble.particles, &o.dt_levels, o.fine_factor, core)?;
    write_trend(&art, "dt_trend.csv", &dt_trend)?;
    let k_trend = particle_study(&spec, &xi0, cfg.seed, cfg.ensemble.paths, cfg.grid.steps, &o.particle_levels, core)?;
    write_trend(&art, "k_trend.csv", &k_trend)?;

    let summary = OracleSummary {
        method: method_name(method).into(),
        errors,
        dt_decreasing: is_decreasing(&dt_trend),
        dt_trend,
        k_decreasing: is_decreasing(&k_trend),
        k_trend,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    art.json("oracle_report.json", &summary)?;
    Ok(summary)
}

fn write_trend(art: &Artifacts, name: &str, levels: &[TrendLevel]) -> Result<(), CliError> {
    let mut w = art.csv(name)?;
    w.write_record(["steps", "particles", "control", "state", "adjoint"])?;
    for l in levels {
        w.serialize((l.steps, l.particles, l.errors.control, l.errors.state, l.errors.adjoint))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct NashSummary {
    pub method: String,
    pub mean_field_cost: f64,
    pub rows: Vec<GapRow>,
    pub players: Vec<usize>,
    pub median_gaps: Vec<f64>,
    pub medians_non_increasing: bool,
    pub wall_clock_seconds: f64,
}

/// Solves the mean-field game, then measures the Nash gap of its feedback
/// in N-player games.
pub fn nash(cfg: &RunConfig) -> Result<NashSummary, CliError> {
    let clock = Instant::now();
    let spec = cfg.spec()?;
    let art = Artifacts::create(cfg)?;
    let noise = cfg.noise();
    let picard = cfg.picard(&spec);
    let bundle = solve_method(cfg.solver.method, cfg, &spec, &noise, &picard)?.bundle;
    let strategy = mean_field_strategy(&spec, &bundle)?;
    let n = &cfg.nash;
    let rows = gap_table(&spec, &strategy, &cfg.initial.law(), noise.grid(), &n.players, &n.seeds, n.replications, &picard)?;
    let medians = median_gaps(&rows, &n.players);

    let mut w = art.csv("nash_gaps.csv")?;
    w.write_record(["players", "seed", "gap", "std_error", "average_cost"])?;
    for r in &rows {
        w.serialize((r.players, r.seed, r.gap, r.std_error, r.average_cost))?;
    }
    w.flush()?;
    let mut w = art.csv("nash_medians.csv")?;
    w.write_record(["players", "median_gap"])?;
    for (p, g) in n.players.iter().zip(&medians) {
        w.serialize((p, g))?;
    }
    w.flush()?;

    let summary = NashSummary {
        method: method_name(cfg.solver.method).into(),
        mean_field_cost: cost_functional(&spec, &bundle)?,
        medians_non_increasing: medians.windows(2).all(|w| w[1] <= w[0]),
        players: n.players.clone(),
        median_gaps: medians,
        rows,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    art.json("nash_report.json", &summary)?;
    Ok(summary)
}
