use serde::Serialize;

use super::{NoiseBundle, TimeGrid};
use crate::error::{Error, Result};

/// Values indexed by (common path j, time index n, particle k), stored so
/// that the K particles of one (j, n) are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    paths: usize,
    particles: usize,
    len: usize,
    data: Vec<f64>,
}

impl PathTable {
    pub fn zeros(paths: usize, particles: usize, len: usize) -> Self {
        Self::filled(paths, particles, len, 0.0)
    }

    pub fn filled(paths: usize, particles: usize, len: usize, value: f64) -> Self {
        Self {
            paths,
            particles,
            len,
            data: vec![value; paths * particles * len],
        }
    }

    pub fn from_fn(paths: usize, particles: usize, len: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(paths, particles, len);
        for j in 0..paths {
            for n in 0..len {
                for (k, v) in t.slice_mut(j, n).iter_mut().enumerate() {
                    *v = f(j, n, k);
                }
            }
        }
        t
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &PathTable) -> bool {
        self.paths == other.paths && self.particles == other.particles && self.len == other.len
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize, n: usize) -> f64 {
        self.data[(j * self.len + n) * self.particles + k]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, n: usize, v: f64) {
        self.data[(j * self.len + n) * self.particles + k] = v;
    }

    #[inline]
    pub fn slice(&self, j: usize, n: usize) -> &[f64] {
        let s = (j * self.len + n) * self.particles;
        &self.data[s..s + self.particles]
    }

    #[inline]
    pub fn slice_mut(&mut self, j: usize, n: usize) -> &mut [f64] {
        let s = (j * self.len + n) * self.particles;
        &mut self.data[s..s + self.particles]
    }

    /// Contiguous block of one common path (all n, all k).
    pub fn path_block(&self, j: usize) -> &[f64] {
        let b = self.len * self.particles;
        &self.data[j * b..(j + 1) * b]
    }

    pub fn path_blocks_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let b = (self.len * self.particles).max(1);
        self.data.chunks_mut(b)
    }

    /// Columns `start..end` in time.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let len = end - start;
        let mut t = Self::zeros(self.paths, self.particles, len);
        for j in 0..self.paths {
            for n in 0..len {
                t.slice_mut(j, n).copy_from_slice(self.slice(j, start + n));
            }
        }
        t
    }

    /// Writes `other` into columns starting at `start`.
    pub fn write_window(&mut self, start: usize, other: &PathTable) {
        for j in 0..self.paths {
            for n in 0..other.len {
                self.slice_mut(j, start + n).copy_from_slice(other.slice(j, n));
            }
        }
    }

    /// Time slice n for every path, flattened as `j·K + k`.
    pub fn column(&self, n: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.paths * self.particles);
        for j in 0..self.paths {
            v.extend_from_slice(self.slice(j, n));
        }
        v
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// `sqrt(mean over (j,k) of Σ_n v²·dt)`: the L²(dt×dP) norm of a table on
    /// grid steps.
    pub fn l2_norm(&self, dt: f64) -> f64 {
        let s: f64 = self.data.iter().map(|v| v * v).sum();
        (s * dt / (self.paths * self.particles) as f64).sqrt()
    }

    pub fn l2_distance(&self, other: &PathTable, dt: f64) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s * dt / (self.paths * self.particles) as f64).sqrt()
    }

    /// Root mean square over all entries.
    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len().max(1) as f64).sqrt()
    }

    pub fn rms_distance(&self, other: &PathTable) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s / self.data.len().max(1) as f64).sqrt()
    }

    /// `(1−θ)·self + θ·other`.
    pub fn blend(&self, other: &PathTable, theta: f64) -> Self {
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Constant { value: f64 },
    Normal { mean: f64, std: f64 },
    Empirical { atoms: Vec<f64> },
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidParameter {
                name: "xi0".into(),
                reason: reason.into(),
            })
        };
        match self {
            InitialLaw::Constant { value } if !value.is_finite() => bad("non-finite constant"),
            InitialLaw::Normal { mean, std } if !mean.is_finite() || !(*std >= 0.0) || !std.is_finite() => {
                bad("normal law needs a finite mean and a nonnegative std")
            }
            InitialLaw::Empirical { atoms } if atoms.is_empty() || atoms.iter().any(|a| !a.is_finite()) => {
                bad("empirical law needs at least one finite atom")
            }
            _ => Ok(()),
        }
    }

    /// Initial slice for every (j, k), flattened as `j·K + k`.
    pub fn sample(&self, noise: &NoiseBundle) -> Vec<f64> {
        let (m, kk) = (noise.paths(), noise.particles());
        let mut v = Vec::with_capacity(m * kk);
        for j in 0..m {
            for k in 0..kk {
                v.push(match self {
                    InitialLaw::Constant { value } => *value,
                    InitialLaw::Normal { mean, std } => mean + std * noise.initial_normal(j, k),
                    InitialLaw::Empirical { atoms } => {
                        let i = (noise.initial_uniform(j, k) * atoms.len() as f64) as usize;
                        atoms[i.min(atoms.len() - 1)]
                    }
                });
            }
        }
        v
    }

    pub fn mean(&self) -> f64 {
        match self {
            InitialLaw::Constant { value } => *value,
            InitialLaw::Normal { mean, .. } => *mean,
            InitialLaw::Empirical { atoms } => atoms.iter().sum::<f64>() / atoms.len() as f64,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            InitialLaw::Constant { value } => value * value,
            InitialLaw::Normal { mean, std } => mean * mean + std * std,
            InitialLaw::Empirical { atoms } => atoms.iter().map(|a| a * a).sum::<f64>() / atoms.len() as f64,
        }
    }
}

/// Particle states on a grid together with the controls that drove them.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub grid: TimeGrid,
    /// N+1 nodes.
    pub states: PathTable,
    /// N steps (left endpoints).
    pub controls: PathTable,
}

impl ParticleEnsemble {
    pub fn paths(&self) -> usize {
        self.states.paths()
    }

    pub fn particles(&self) -> usize {
        self.states.particles()
    }

    /// Columnar export rows: (j, k, n, X, u); u is empty at the last node.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize, f64, Option<f64>)> + '_ {
        let (m, kk, nodes) = (self.paths(), self.particles(), self.states.len());
        (0..m).flat_map(move |j| {
            (0..kk).flat_map(move |k| {
                (0..nodes).map(move |n| {
                    let u = (n < self.controls.len()).then(|| self.controls.get(j, k, n));
                    (j, k, n, self.states.get(j, k, n), u)
                })
            })
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStatistics {
    /// `[n][j]` conditional means.
    pub means: Vec<Vec<f64>>,
    /// `[n][j]` conditional variances.
    pub variances: Vec<Vec<f64>>,
    pub pooled_mean: Vec<f64>,
    pub pooled_variance: Vec<f64>,
}

pub fn statistics(ensemble: &ParticleEnsemble) -> EnsembleStatistics {
    let st = &ensemble.states;
    let (m, kk) = (st.paths(), st.particles() as f64);
    let mut out = EnsembleStatistics {
        means: Vec::new(),
        variances: Vec::new(),
        pooled_mean: Vec::new(),
        pooled_variance: Vec::new(),
    };
    for n in 0..st.len() {
        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..m {
            let xs = st.slice(j, n);
            let mu = xs.iter().sum::<f64>() / kk;
            let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / kk;
            s1 += xs.iter().sum::<f64>();
            s2 += xs.iter().map(|x| x * x).sum::<f64>();
            means.push(mu);
            vars.push(var);
        }
        let tot = kk * m as f64;
        let pm = s1 / tot;
        out.pooled_mean.push(pm);
        out.pooled_variance.push((s2 / tot - pm * pm).max(0.0));
        out.means.push(means);
        out.variances.push(vars);
    }
    out
}
