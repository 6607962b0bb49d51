use rayon::prelude::*;

use super::{InitialLaw, NoiseBundle, ParticleEnsemble, PathTable, TimeGrid};
use crate::error::{Error, Result};
use crate::measures::{MeasureFlow, MeasureMoments};
use crate::mfg_solvers::InputPerturbation;
use crate::model::ModelSpec;

/// A control given as a function of the current state and conditional law.
pub trait FeedbackControl: Sync {
    /// `n` is the global step index, `j`/`k` the path and particle.
    fn control(&self, n: usize, x: f64, m: &MeasureMoments, j: usize, k: usize) -> f64;
}

#[derive(Clone, Copy)]
pub enum ControlRule<'a> {
    Zero,
    /// Open-loop table on the simulation grid's steps.
    Table(&'a PathTable),
    Feedback(&'a dyn FeedbackControl),
}

/// Where the coefficients read the measure argument from.
#[derive(Clone, Copy)]
pub enum MeasureSource<'a> {
    /// The current empirical law of the particles on the same common path.
    SelfConsistent,
    /// A given flow, indexed on the simulation grid's nodes.
    Frozen(&'a MeasureFlow),
    /// A given flow of the other players with the particle's own atom mixed
    /// in at `weight`: the law one player of a finite game sees while its
    /// opponents' paths are held fixed.
    WithSelf { others: &'a MeasureFlow, weight: f64 },
}

impl<'a> MeasureSource<'a> {
    /// The externally supplied flow, if any.
    pub fn flow(&self) -> Option<&'a MeasureFlow> {
        match *self {
            MeasureSource::SelfConsistent => None,
            MeasureSource::Frozen(f) | MeasureSource::WithSelf { others: f, .. } => Some(f),
        }
    }

    /// Weight of the particle's own atom in the measure it sees.
    pub fn self_weight(&self) -> f64 {
        match *self {
            MeasureSource::WithSelf { weight, .. } => weight,
            _ => 0.0,
        }
    }

    /// The measure seen by a particle at `x`, given the path's base moments.
    #[inline]
    pub fn particle_moments(&self, base: &MeasureMoments, x: f64) -> MeasureMoments {
        match *self {
            MeasureSource::WithSelf { weight, .. } => base.with_atom(x, weight),
            _ => *base,
        }
    }
}

/// Scaled and forced dynamics
/// `dX = (γb + I^b)dt + (γσ + I^σ)dW + (γσ̃ + I^σ̃)dW̃`.
#[derive(Clone, Copy)]
pub struct ForwardConfig<'a> {
    pub gamma: f64,
    pub forcing: Option<&'a InputPerturbation>,
    pub measure: MeasureSource<'a>,
}

impl Default for ForwardConfig<'_> {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            forcing: None,
            measure: MeasureSource::SelfConsistent,
        }
    }
}

/// Euler–Maruyama over the whole noise grid from initial law `xi0`, with the
/// measure read off the particles themselves.
pub fn simulate_forward(
    spec: &ModelSpec,
    rule: ControlRule<'_>,
    noise: &NoiseBundle,
    xi0: &InitialLaw,
) -> Result<(ParticleEnsemble, MeasureFlow)> {
    let x0 = xi0.sample(noise);
    simulate_window(spec, rule, noise, noise.grid(), &x0, &ForwardConfig::default())
}

/// Euler–Maruyama on `grid` (a window of the noise grid) from the initial
/// slice `x0` (indexed `j·K + k`).
pub fn simulate_window(
    spec: &ModelSpec,
    rule: ControlRule<'_>,
    noise: &NoiseBundle,
    grid: TimeGrid,
    x0: &[f64],
    cfg: &ForwardConfig<'_>,
) -> Result<(ParticleEnsemble, MeasureFlow)> {
    let (mp, kp) = (noise.paths(), noise.particles());
    let steps = grid.steps();
    if x0.len() != mp * kp {
        return Err(Error::DimensionMismatch(format!(
            "initial slice has {} entries, expected {}",
            x0.len(),
            mp * kp
        )));
    }
    if grid.dt() != noise.grid().dt() || grid.offset() + steps > noise.grid().steps() {
        return Err(Error::GridMismatch("simulation window outside the noise grid".into()));
    }
    if let ControlRule::Table(t) = rule {
        if t.paths() != mp || t.particles() != kp || t.len() != steps {
            return Err(Error::DimensionMismatch("control table does not match the ensemble".into()));
        }
    }
    if let MeasureSource::WithSelf { weight, .. } = cfg.measure {
        if !(0.0..1.0).contains(&weight) {
            return Err(Error::InvalidParameter {
                name: "weight".into(),
                reason: format!("{weight} outside [0, 1)"),
            });
        }
    }
    if let Some(flow) = cfg.measure.flow() {
        if flow.paths() != mp || flow.nodes() != grid.nodes() {
            return Err(Error::GridMismatch("frozen measure flow does not match the window".into()));
        }
    }
    if let Some(f) = cfg.forcing {
        if f.b.paths() != mp || f.b.particles() != kp || f.b.len() != steps {
            return Err(Error::DimensionMismatch("input perturbation does not match the ensemble".into()));
        }
    }

    let mut states = PathTable::zeros(mp, kp, steps + 1);
    let mut controls = PathTable::zeros(mp, kp, steps);
    let dt = grid.dt();
    let gamma = cfg.gamma;

    let results: Vec<Result<()>> = states
        .path_blocks_mut()
        .zip(controls.path_blocks_mut())
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(j, (xs, us))| {
            xs[..kp].copy_from_slice(&x0[j * kp..(j + 1) * kp]);
            for n in 0..steps {
                let gn = grid.offset() + n;
                let t = grid.time(n);
                let (cur, next) = xs[n * kp..(n + 2) * kp].split_at_mut(kp);
                let base = match cfg.measure.flow() {
                    None => MeasureMoments::from_atoms(cur),
                    Some(flow) => flow.moments(n, j),
                };
                let dw = noise.dw(j, gn);
                let dwc = noise.dw_common(j, gn);
                let u_row = &mut us[n * kp..(n + 1) * kp];
                for k in 0..kp {
                    let x = cur[k];
                    let m = cfg.measure.particle_moments(&base, x);
                    let u = match rule {
                        ControlRule::Zero => 0.0,
                        ControlRule::Table(tab) => tab.get(j, k, n),
                        ControlRule::Feedback(fb) => fb.control(gn, x, &m, j, k),
                    };
                    u_row[k] = u;
                    let mut b = gamma * spec.drift(t, x, u, &m);
                    let mut s = gamma * spec.vol(t, x, u, &m);
                    let mut st = gamma * spec.vol_common(t, x, u, &m);
                    if let Some(f) = cfg.forcing {
                        b += f.b.get(j, k, n);
                        s += f.sigma.get(j, k, n);
                        st += f.sigma_tilde.get(j, k, n);
                    }
                    let xn = x + b * dt + s * dw[k] + st * dwc;
                    if !xn.is_finite() {
                        return Err(Error::NonFiniteState {
                            step: gn + 1,
                            path: j,
                            particle: k,
                        });
                    }
                    next[k] = xn;
                }
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    let flow = MeasureFlow::from_table(grid, &states);
    Ok((
        ParticleEnsemble {
            grid,
            states,
            controls,
        },
        flow,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::conditional_law;
    use crate::model::{CostSpec, LinearCoefficient, MeasureTerm};

    fn spec_with(b: LinearCoefficient, sigma: f64, sigma_tilde: f64) -> ModelSpec {
        let cost = CostSpec {
            r: 1.0,
            ..CostSpec::default()
        };
        ModelSpec::new(
            "test",
            1.0,
            b,
            LinearCoefficient::constant(sigma),
            LinearCoefficient::constant(sigma_tilde),
            cost,
        )
        .unwrap()
    }

    #[test]
    fn constant_drift_is_exact() {
        let spec = spec_with(LinearCoefficient::constant(0.3), 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let nb = NoiseBundle::new(1, 2, 3, grid).unwrap();
        let (ens, _) = simulate_forward(&spec, ControlRule::Zero, &nb, &InitialLaw::Constant { value: 2.0 }).unwrap();
        let mut x = 2.0;
        for n in 0..=10 {
            assert_eq!(ens.states.get(1, 2, n), x);
            x += 0.3 * grid.dt();
        }
        assert!((ens.states.get(0, 0, 10) - 2.3).abs() < 1e-12);
    }

    #[test]
    fn no_dynamics_keeps_initial_draws() {
        let spec = spec_with(LinearCoefficient::default(), 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let nb = NoiseBundle::new(4, 3, 7, grid).unwrap();
        let xi0 = InitialLaw::Normal { mean: 0.0, std: 1.0 };
        let x0 = xi0.sample(&nb);
        let (ens, _) = simulate_forward(&spec, ControlRule::Zero, &nb, &xi0).unwrap();
        for j in 0..3 {
            for n in 0..=5 {
                assert_eq!(ens.states.slice(j, n), &x0[j * 7..(j + 1) * 7]);
            }
        }
    }

    #[test]
    fn mean_drift_grows_exponentially() {
        let b = LinearCoefficient::new(
            MeasureTerm {
                mean_coeff: 1.0,
                ..Default::default()
            },
            0.0,
            0.0,
        );
        let spec = spec_with(b, 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let nb = NoiseBundle::new(1, 2, 4, grid).unwrap();
        let (_, flow) = simulate_forward(&spec, ControlRule::Zero, &nb, &InitialLaw::Constant { value: 1.0 }).unwrap();
        let mean_t = flow.moments(1000, 0).mean;
        assert!((mean_t - 1f64.exp()).abs() < 2e-3, "{mean_t}");
    }

    #[test]
    fn common_noise_only_gives_dirac_law() {
        let spec = spec_with(LinearCoefficient::constant(0.1), 0.0, 0.5);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let nb = NoiseBundle::new(2, 3, 5, grid).unwrap();
        let (ens, flow) = simulate_forward(&spec, ControlRule::Zero, &nb, &InitialLaw::Constant { value: 0.0 }).unwrap();
        for j in 0..3 {
            let mut y = 0.0;
            for n in 0..20 {
                y += 0.1 * grid.dt() + 0.5 * nb.dw_common(j, n);
            }
            let law = conditional_law(&ens, 20, j).unwrap();
            assert!(law.atoms().iter().all(|&a| (a - y).abs() < 1e-12));
            assert_eq!(flow.measure(20, j), &law);
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let b = LinearCoefficient::new(MeasureTerm::default(), 1e308, 0.0);
        let spec = spec_with(b, 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let nb = NoiseBundle::new(1, 1, 2, grid).unwrap();
        let err = simulate_forward(&spec, ControlRule::Zero, &nb, &InitialLaw::Constant { value: 1e10 }).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 1, path: 0, .. }), "{err}");
    }
}
