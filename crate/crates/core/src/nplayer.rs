//! The N-player game under the mean-field feedback, and its empirical Nash
//! gap.
//!
//! A noise bundle with `paths = R` and `particles = N` is read as R
//! independent replications of an N-player game: the players of one
//! replication share its common noise, and m^N is their empirical law. The
//! bundle's particle streams are nested in N, so games of different sizes
//! built from one seed share the noise of their first players.

use serde::Serialize;

use crate::bsde::{
    solve_system, AdjointPolicy, ForwardBackwardSystem, PicardOptions, SolutionBundle, TerminalCondition,
};
use crate::error::{Error, Result};
use crate::forward_sim::{
    simulate_forward, ControlRule, FeedbackControl, InitialLaw, MeasureSource, NoiseBundle, ParticleEnsemble,
    PathTable, TimeGrid,
};
use crate::measures::MeasureFlow;
use crate::model::{ensemble_costs, ensemble_costs_with_self, ModelSpec};

/// The mean-field feedback `x, m ↦ û(t, x, p̂, q̂, q̃̂)` read off a solved
/// bundle's regression fits.
pub fn mean_field_strategy<'a>(spec: &'a ModelSpec, bundle: &SolutionBundle) -> Result<AdjointPolicy<'a>> {
    let grid = bundle.grid();
    if bundle.backward.fits.len() != grid.steps() {
        return Err(Error::DimensionMismatch("bundle carries no feedback fits".into()));
    }
    Ok(AdjointPolicy::new(spec, grid, 1.0, None, bundle.backward.fits.clone()))
}

#[derive(Debug, Clone)]
pub struct PlayerSystem {
    pub players: usize,
    pub replications: usize,
    pub ensemble: ParticleEnsemble,
    /// m^N_t per replication.
    pub measure: MeasureFlow,
    /// Realized cost of every player, indexed `r·N + i`.
    pub costs: Vec<f64>,
}

impl PlayerSystem {
    pub fn grid(&self) -> TimeGrid {
        self.ensemble.grid
    }

    /// Cost of player `i` in every replication.
    pub fn player_costs(&self, i: usize) -> Vec<f64> {
        (0..self.replications).map(|r| self.costs[r * self.players + i]).collect()
    }

    pub fn average_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len() as f64
    }
}

/// All players follow `strategy` at their own state with m replaced by m^N.
pub fn simulate_nplayer(
    spec: &ModelSpec,
    strategy: &dyn FeedbackControl,
    noise: &NoiseBundle,
    xi0: &InitialLaw,
) -> Result<PlayerSystem> {
    let (ensemble, measure) = simulate_forward(spec, ControlRule::Feedback(strategy), noise, xi0)?;
    let costs = ensemble_costs(spec, &ensemble, &measure)?;
    Ok(PlayerSystem {
        players: noise.particles(),
        replications: noise.paths(),
        ensemble,
        measure,
        costs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NashGap {
    pub players: usize,
    pub replications: usize,
    /// J¹ under the mean-field strategy.
    pub strategy_cost: f64,
    /// J¹ under the best response against the frozen other players.
    pub deviation_cost: f64,
    pub gap: f64,
    /// Standard error of the paired difference.
    pub std_error: f64,
    /// Average cost over all players under the strategy.
    pub average_cost: f64,
}

/// Player 1's slice of a game: its own path and the empirical flow of the
/// other N − 1 players.
fn split_first(game: &PlayerSystem) -> (ParticleEnsemble, MeasureFlow) {
    let (r, n) = (game.replications, game.players);
    let grid = game.grid();
    let x = &game.ensemble.states;
    let u = &game.ensemble.controls;
    let own = ParticleEnsemble {
        grid,
        states: PathTable::from_fn(r, 1, x.len(), |j, t, _| x.get(j, 0, t)),
        controls: PathTable::from_fn(r, 1, u.len(), |j, t, _| u.get(j, 0, t)),
    };
    let others = PathTable::from_fn(r, n - 1, x.len(), |j, t, k| x.get(j, k + 1, t));
    (own, MeasureFlow::from_table(grid, &others))
}

/// `J¹(strategy) − J¹(best response)` for player 1 with the other players'
/// paths held at those of the strategy profile. Player 1 sees
/// `m^N = (1/N)δ_{X¹} + ((N−1)/N)·m^{N,−1}` with m^{N,−1} frozen, so the best
/// response accounts for its own weight in the empirical law. It is driven
/// by player 1's own noise in every replication, so the two costs are paired
/// replication by replication.
pub fn nash_gap(
    spec: &ModelSpec,
    strategy: &dyn FeedbackControl,
    noise: &NoiseBundle,
    xi0: &InitialLaw,
    opts: &PicardOptions,
) -> Result<NashGap> {
    let n = noise.particles();
    if n < 2 {
        return Err(Error::InvalidParameter {
            name: "players".into(),
            reason: "a Nash gap needs at least two players".into(),
        });
    }
    let game = simulate_nplayer(spec, strategy, noise, xi0)?;
    let w = 1.0 / n as f64;
    let (own, others) = split_first(&game);
    let mine = ensemble_costs_with_self(spec, &own, &others, w)?;

    let solo = noise.restrict_particles(0..1)?;
    let x0 = own.states.column(0);
    let sys = ForwardBackwardSystem {
        spec,
        noise: &solo,
        grid: solo.grid(),
        x0: &x0,
        gamma: 1.0,
        forcing: None,
        terminal: TerminalCondition::cost_gradient(spec),
        measure: MeasureSource::WithSelf { others: &others, weight: w },
    };
    let br = solve_system(&sys, ControlRule::Table(&own.controls), opts).map_err(|e| Error::Inconclusive(e.to_string()))?;
    let dev = ensemble_costs_with_self(spec, &br.ensemble, &others, w)?;

    let r = game.replications as f64;
    let diffs: Vec<f64> = mine.iter().zip(&dev).map(|(a, b)| a - b).collect();
    let gap = diffs.iter().sum::<f64>() / r;
    let var = diffs.iter().map(|d| (d - gap).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    Ok(NashGap {
        players: n,
        replications: game.replications,
        strategy_cost: mine.iter().sum::<f64>() / r,
        deviation_cost: dev.iter().sum::<f64>() / r,
        gap,
        std_error: (var / r).sqrt(),
        average_cost: game.average_cost(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub players: usize,
    pub seed: u64,
    pub gap: f64,
    pub std_error: f64,
    pub average_cost: f64,
}

/// Nash gaps for every (N, seed) pair.
#[allow(clippy::too_many_arguments)]
pub fn gap_table(
    spec: &ModelSpec,
    strategy: &dyn FeedbackControl,
    xi0: &InitialLaw,
    grid: TimeGrid,
    players: &[usize],
    seeds: &[u64],
    replications: usize,
    opts: &PicardOptions,
) -> Result<Vec<GapRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let most = players.iter().copied().max().unwrap_or(2);
        let full = NoiseBundle::new(seed, replications, most, grid)?;
        for &n in players {
            let noise = full.restrict_particles(0..n)?;
            let g = nash_gap(spec, strategy, &noise, xi0, opts)?;
            rows.push(GapRow {
                players: n,
                seed,
                gap: g.gap,
                std_error: g.std_error,
                average_cost: g.average_cost,
            });
        }
    }
    Ok(rows)
}

/// Median gap per player count, in the order of `players`.
pub fn median_gaps(rows: &[GapRow], players: &[usize]) -> Vec<f64> {
    players
        .iter()
        .map(|&n| {
            let mut g: Vec<f64> = rows.iter().filter(|r| r.players == n).map(|r| r.gap).collect();
            g.sort_by(f64::total_cmp);
            match g.len() {
                0 => f64::NAN,
                l if l % 2 == 1 => g[l / 2],
                l => 0.5 * (g[l / 2 - 1] + g[l / 2]),
            }
        })
        .collect()
}
