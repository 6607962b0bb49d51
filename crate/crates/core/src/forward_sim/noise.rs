use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::TimeGrid;
use crate::error::{Error, Result};

const CHANNEL_IDIOSYNCRATIC: u64 = 0;
const CHANNEL_COMMON: u64 = 1;
const CHANNEL_INITIAL_NORMAL: u64 = 2;
const CHANNEL_INITIAL_UNIFORM: u64 = 3;

/// One RNG stream per (channel, common path, particle). The stream of a
/// given (j, k) does not depend on M or K, so smaller ensembles are nested
/// in larger ones.
pub fn stream(seed: u64, channel: u64, j: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((channel << 56) ^ ((j as u64) << 28) ^ k as u64);
    rng
}

/// Brownian increments for M common paths with K particles each. Only
/// (seed, M, K, grid) identify a bundle; increments are regenerated on
/// demand.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    seed: u64,
    paths: usize,
    particles: usize,
    grid: TimeGrid,
    dw: Vec<f64>,
    dw_common: Vec<f64>,
    initial_normal: Vec<f64>,
    initial_uniform: Vec<f64>,
}

impl NoiseBundle {
    pub fn new(seed: u64, paths: usize, particles: usize, grid: TimeGrid) -> Result<Self> {
        if paths == 0 || particles == 0 {
            return Err(Error::InvalidParameter {
                name: if paths == 0 { "paths" } else { "particles" }.into(),
                reason: "must be positive".into(),
            });
        }
        let steps = grid.steps();
        let sd = grid.dt().sqrt();
        let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|j| {
                let mut dw = vec![0.0; steps * particles];
                let mut z0 = vec![0.0; particles];
                let mut u0 = vec![0.0; particles];
                for k in 0..particles {
                    let mut rng = stream(seed, CHANNEL_IDIOSYNCRATIC, j, k);
                    for n in 0..steps {
                        let z: f64 = rng.sample(StandardNormal);
                        dw[n * particles + k] = sd * z;
                    }
                    z0[k] = stream(seed, CHANNEL_INITIAL_NORMAL, j, k).sample(StandardNormal);
                    u0[k] = stream(seed, CHANNEL_INITIAL_UNIFORM, j, k).gen::<f64>();
                }
                let mut rng = stream(seed, CHANNEL_COMMON, j, 0);
                let common = (0..steps)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (dw, common, z0, u0)
            })
            .collect();
        let mut out = Self {
            seed,
            paths,
            particles,
            grid,
            dw: Vec::with_capacity(paths * steps * particles),
            dw_common: Vec::with_capacity(paths * steps),
            initial_normal: Vec::with_capacity(paths * particles),
            initial_uniform: Vec::with_capacity(paths * particles),
        };
        for (dw, common, z0, u0) in blocks {
            out.dw.extend(dw);
            out.dw_common.extend(common);
            out.initial_normal.extend(z0);
            out.initial_uniform.extend(u0);
        }
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Idiosyncratic increments of path j at global step n, one per particle.
    #[inline]
    pub fn dw(&self, j: usize, n: usize) -> &[f64] {
        let k = self.particles;
        let start = (j * self.grid.steps() + n) * k;
        &self.dw[start..start + k]
    }

    #[inline]
    pub fn dw_common(&self, j: usize, n: usize) -> f64 {
        self.dw_common[j * self.grid.steps() + n]
    }

    /// Standard normal draw reserved for the initial state of (j, k).
    pub fn initial_normal(&self, j: usize, k: usize) -> f64 {
        self.initial_normal[j * self.particles + k]
    }

    /// Uniform [0,1) draw reserved for the initial state of (j, k).
    pub fn initial_uniform(&self, j: usize, k: usize) -> f64 {
        self.initial_uniform[j * self.particles + k]
    }

    /// Same Brownian paths observed on a grid with `factor` times fewer
    /// steps (increments summed).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let (steps, k) = (grid.steps(), self.particles);
        let mut dw = vec![0.0; self.paths * steps * k];
        let mut dw_common = vec![0.0; self.paths * steps];
        for j in 0..self.paths {
            for n in 0..steps {
                for f in 0..factor {
                    let fine = self.dw(j, n * factor + f);
                    let dst = &mut dw[(j * steps + n) * k..(j * steps + n + 1) * k];
                    for (d, s) in dst.iter_mut().zip(fine) {
                        *d += s;
                    }
                    dw_common[j * steps + n] += self.dw_common(j, n * factor + f);
                }
            }
        }
        Ok(Self {
            seed: self.seed,
            paths: self.paths,
            particles: k,
            grid,
            dw,
            dw_common,
            initial_normal: self.initial_normal.clone(),
            initial_uniform: self.initial_uniform.clone(),
        })
    }

    /// The sub-bundle of particles `range` on every common path.
    pub fn restrict_particles(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.particles || range.is_empty() {
            return Err(Error::IndexOutOfRange(format!(
                "particles {range:?} of {}",
                self.particles
            )));
        }
        self.select_particles(&range.collect::<Vec<_>>())
    }

    /// The particles `idx`, in that order, on every common path.
    pub fn select_particles(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.particles) {
            return Err(Error::IndexOutOfRange(format!(
                "particle selection of {} particles",
                self.particles
            )));
        }
        let kk = idx.len();
        let steps = self.grid.steps();
        let mut dw = Vec::with_capacity(self.paths * steps * kk);
        let mut z0 = Vec::with_capacity(self.paths * kk);
        let mut u0 = Vec::with_capacity(self.paths * kk);
        for j in 0..self.paths {
            for n in 0..steps {
                let row = self.dw(j, n);
                dw.extend(idx.iter().map(|&i| row[i]));
            }
            let base = j * self.particles;
            z0.extend(idx.iter().map(|&i| self.initial_normal[base + i]));
            u0.extend(idx.iter().map(|&i| self.initial_uniform[base + i]));
        }
        Ok(Self {
            seed: self.seed,
            paths: self.paths,
            particles: kk,
            grid: self.grid,
            dw,
            dw_common: self.dw_common.clone(),
            initial_normal: z0,
            initial_uniform: u0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_are_centred_with_variance_dt() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let nb = NoiseBundle::new(3, 16, 64, grid).unwrap();
        let (m, k, n) = (16.0, 64.0, 50.0);
        let all = &nb.dw;
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| x * x).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() <= 4.0 * (grid.dt() / (m * k * n)).sqrt(), "{mean}");
        assert!((var / grid.dt() - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn regeneration_is_bitwise_and_nested() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let a = NoiseBundle::new(11, 4, 8, grid).unwrap();
        let b = NoiseBundle::new(11, 4, 8, grid).unwrap();
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.dw_common, b.dw_common);
        let small = NoiseBundle::new(11, 2, 3, grid).unwrap();
        for j in 0..2 {
            for n in 0..10 {
                assert_eq!(small.dw(j, n), &a.dw(j, n)[..3]);
                assert_eq!(small.dw_common(j, n), a.dw_common(j, n));
            }
        }
        let sub = a.restrict_particles(2..5).unwrap();
        assert_eq!(sub.dw(3, 7), &a.dw(3, 7)[2..5]);
        assert_eq!(sub.initial_normal(1, 0), a.initial_normal(1, 2));
    }

    #[test]
    fn coarsening_sums_increments() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let a = NoiseBundle::new(5, 2, 3, grid).unwrap();
        let c = a.coarsen(2).unwrap();
        assert_eq!(c.grid().steps(), 2);
        assert_eq!(c.dw(1, 1)[2], a.dw(1, 2)[2] + a.dw(1, 3)[2]);
        assert_eq!(c.dw_common(0, 0), a.dw_common(0, 0) + a.dw_common(0, 1));
    }
}
