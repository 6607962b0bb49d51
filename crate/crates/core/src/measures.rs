//! Empirical probability measures on the real line.
//!
//! All measures carry equal weights on their atoms. The 1-D Wasserstein-2
//! distance between two such measures is computed exactly through the
//! monotone (sorted) coupling; measures with different atom counts are first
//! refined to a common count by atom replication.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward_sim::{ParticleEnsemble, TimeGrid};

/// Largest common refinement accepted by [`w2`] for measures with different
/// atom counts.
const MAX_REFINEMENT: usize = 1 << 20;

/// Equal-weight empirical measure with finitely many finite atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if let Some(i) = atoms.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFiniteAtom(i));
        }
        Ok(Self { atoms })
    }

    pub fn dirac(x: f64) -> Self {
        Self { atoms: vec![x] }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    pub fn moments(&self) -> MeasureMoments {
        MeasureMoments::from_atoms(&self.atoms)
    }

    /// Atoms in ascending order; ties keep their original order.
    pub fn sorted_atoms(&self) -> Vec<f64> {
        let mut v = self.atoms.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn translate(&self, c: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|a| a + c).collect(),
        }
    }

    /// Each atom repeated `factor` times (same law, finer support).
    pub fn refine(&self, factor: usize) -> Self {
        let mut atoms = Vec::with_capacity(self.atoms.len() * factor);
        for &a in &self.atoms {
            atoms.extend(std::iter::repeat(a).take(factor));
        }
        Self { atoms }
    }
}

/// First two moments of a measure. Every coefficient family in the model
/// registry reads the measure argument through these.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeasureMoments {
    pub mean: f64,
    pub second_moment: f64,
}

impl MeasureMoments {
    /// Sums run over the sorted atoms, so relabeling the atoms leaves the
    /// result bit-for-bit unchanged.
    pub fn from_atoms(atoms: &[f64]) -> Self {
        let n = atoms.len() as f64;
        let mut sorted = atoms.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let (s1, s2) = sorted
            .iter()
            .fold((0.0, 0.0), |(s1, s2), &a| (s1 + a, s2 + a * a));
        Self {
            mean: s1 / n,
            second_moment: s2 / n,
        }
    }

    pub fn dirac(x: f64) -> Self {
        Self {
            mean: x,
            second_moment: x * x,
        }
    }

    /// Moments of `(1 − w)·self + w·δ_x`.
    pub fn with_atom(&self, x: f64, w: f64) -> Self {
        Self {
            mean: (1.0 - w) * self.mean + w * x,
            second_moment: (1.0 - w) * self.second_moment + w * x * x,
        }
    }

    /// Moves an atom of weight `w` from `from` to `to`.
    pub fn move_atom(&self, from: f64, to: f64, w: f64) -> Self {
        Self {
            mean: self.mean + w * (to - from),
            second_moment: self.second_moment + w * (to * to - from * from),
        }
    }

    pub fn variance(&self) -> f64 {
        (self.second_moment - self.mean * self.mean).max(0.0)
    }

    /// `(∫x² dm)^{1/2}`, the quantity entering the linear growth bounds.
    pub fn root_second_moment(&self) -> f64 {
        self.second_moment.max(0.0).sqrt()
    }
}

pub fn second_moment(m: &EmpiricalMeasure) -> f64 {
    m.atoms.iter().map(|a| a * a).sum::<f64>() / m.atoms.len() as f64
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Squared W2 between two sorted, equal-length atom vectors.
fn sorted_cost(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Exact Wasserstein-2 distance between two empirical measures.
pub fn w2(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    let (n1, n2) = (m1.len(), m2.len());
    if n1 == n2 {
        return Ok(sorted_cost(&m1.sorted_atoms(), &m2.sorted_atoms()).sqrt());
    }
    let lcm = n1 / gcd(n1, n2) * n2;
    if lcm > MAX_REFINEMENT {
        return Err(Error::IncompatibleSupports(n1, n2));
    }
    let r1 = m1.refine(lcm / n1);
    let r2 = m2.refine(lcm / n2);
    Ok(sorted_cost(&r1.sorted_atoms(), &r2.sorted_atoms()).sqrt())
}

/// Joint weights over atom pairs of two equal-weight measures.
#[derive(Debug, Clone)]
pub struct CouplingMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl CouplingMatrix {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "coupling has {} weights for a {rows}x{cols} grid",
                weights.len()
            )));
        }
        let c = Self { rows, cols, weights };
        c.check_marginals()?;
        Ok(c)
    }

    /// Product coupling.
    pub fn independent(rows: usize, cols: usize) -> Self {
        let w = 1.0 / (rows * cols) as f64;
        Self {
            rows,
            cols,
            weights: vec![w; rows * cols],
        }
    }

    /// Pairs the i-th smallest atom of the first measure with the i-th
    /// smallest of the second (equal atom counts).
    pub fn comonotone(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<Self> {
        Self::by_rank(m1, m2, false)
    }

    /// Pairs the i-th smallest atom of the first measure with the i-th
    /// largest of the second.
    pub fn antithetic(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<Self> {
        Self::by_rank(m1, m2, true)
    }

    fn by_rank(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure, reverse: bool) -> Result<Self> {
        let n = m1.len();
        if m2.len() != n {
            return Err(Error::IncompatibleSupports(n, m2.len()));
        }
        let rank = |m: &EmpiricalMeasure| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| m.atoms[a].total_cmp(&m.atoms[b]));
            idx
        };
        let (r1, mut r2) = (rank(m1), rank(m2));
        if reverse {
            r2.reverse();
        }
        let mut weights = vec![0.0; n * n];
        for (a, b) in r1.into_iter().zip(r2) {
            weights[a * n + b] = 1.0 / n as f64;
        }
        Ok(Self {
            rows: n,
            cols: n,
            weights,
        })
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn check_marginals(&self) -> Result<()> {
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "coupling".into(),
                reason: "negative or non-finite weight".into(),
            });
        }
        let (rw, cw) = (1.0 / self.rows as f64, 1.0 / self.cols as f64);
        for i in 0..self.rows {
            let s: f64 = (0..self.cols).map(|j| self.weight(i, j)).sum();
            if (s - rw).abs() > 1e-12 {
                return Err(Error::InvalidParameter {
                    name: "coupling".into(),
                    reason: format!("row {i} sums to {s}, expected {rw}"),
                });
            }
        }
        for j in 0..self.cols {
            let s: f64 = (0..self.rows).map(|i| self.weight(i, j)).sum();
            if (s - cw).abs() > 1e-12 {
                return Err(Error::InvalidParameter {
                    name: "coupling".into(),
                    reason: format!("column {j} sums to {s}, expected {cw}"),
                });
            }
        }
        Ok(())
    }

    /// `∫ h(x, y) dγ(x, y)`.
    pub fn expectation<F>(&self, m1: &EmpiricalMeasure, m2: &EmpiricalMeasure, h: F) -> f64
    where
        F: Fn(f64, f64) -> f64,
    {
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let w = self.weight(i, j);
                if w != 0.0 {
                    acc += w * h(m1.atoms[i], m2.atoms[j]);
                }
            }
        }
        acc
    }
}

/// Equal-count sample of paths on a common grid, standing in for a law on
/// path space.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub grid: TimeGrid,
    pub paths: Vec<Vec<f64>>,
}

impl PathSample {
    pub fn new(grid: TimeGrid, paths: Vec<Vec<f64>>) -> Result<Self> {
        let nodes = grid.nodes();
        if let Some(p) = paths.iter().find(|p| p.len() != nodes) {
            return Err(Error::GridMismatch(format!(
                "path of length {} on a grid with {nodes} nodes",
                p.len()
            )));
        }
        Ok(Self { grid, paths })
    }
}

/// Upper bound on the path-space distance D2, from the best of a few
/// rank-based couplings (terminal value, time average, identity).
///
/// Diagnostic only: exact D2 is an assignment problem over sup-norm costs and
/// is not computed.
pub fn d2_pathspace(a: &PathSample, b: &PathSample) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch("path samples on different grids".into()));
    }
    if a.paths.len() != b.paths.len() {
        return Err(Error::IncompatibleSupports(a.paths.len(), b.paths.len()));
    }
    let n = a.paths.len();
    if n == 0 {
        return Err(Error::EmptyMeasure);
    }
    let sup_sq = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0_f64, f64::max)
            .powi(2)
    };
    let cost = |pa: &[usize], pb: &[usize]| {
        pa.iter()
            .zip(pb)
            .map(|(&i, &j)| sup_sq(&a.paths[i], &b.paths[j]))
            .sum::<f64>()
            / n as f64
    };
    let order_by = |s: &PathSample, key: &dyn Fn(&[f64]) -> f64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| key(&s.paths[i]).total_cmp(&key(&s.paths[j])));
        idx
    };
    let terminal = |p: &[f64]| *p.last().unwrap_or(&0.0);
    let average = |p: &[f64]| p.iter().sum::<f64>() / p.len().max(1) as f64;
    let identity: Vec<usize> = (0..n).collect();

    let candidates = [
        cost(&order_by(a, &terminal), &order_by(b, &terminal)),
        cost(&order_by(a, &average), &order_by(b, &average)),
        cost(&identity, &identity),
    ];
    Ok(candidates.into_iter().fold(f64::INFINITY, f64::min).sqrt())
}

/// Conditional law at step `n` given common path `j`: the empirical measure
/// of the particles sharing that common-noise realization.
pub fn conditional_law(ensemble: &ParticleEnsemble, n: usize, j: usize) -> Result<EmpiricalMeasure> {
    let states = &ensemble.states;
    if j >= states.paths() {
        return Err(Error::IndexOutOfRange(format!(
            "common path {j} of {}",
            states.paths()
        )));
    }
    if n >= states.len() {
        return Err(Error::IndexOutOfRange(format!("step {n} of {}", states.len())));
    }
    EmpiricalMeasure::new(states.slice(j, n).to_vec())
}

/// Conditional laws of an ensemble, one per (time node, common path).
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    grid: TimeGrid,
    paths: usize,
    measures: Vec<EmpiricalMeasure>,
    moments: Vec<MeasureMoments>,
}

impl MeasureFlow {
    pub fn from_ensemble(ensemble: &ParticleEnsemble) -> Self {
        Self::from_table(ensemble.grid, &ensemble.states)
    }

    /// Conditional laws of the particles in a (paths × particles × nodes) table.
    pub fn from_table(grid: TimeGrid, states: &crate::forward_sim::PathTable) -> Self {
        let paths = states.paths();
        let nodes = states.len();
        let mut measures = Vec::with_capacity(nodes * paths);
        let mut moments = Vec::with_capacity(nodes * paths);
        for n in 0..nodes {
            for j in 0..paths {
                let atoms = states.slice(j, n);
                moments.push(MeasureMoments::from_atoms(atoms));
                measures.push(EmpiricalMeasure {
                    atoms: atoms.to_vec(),
                });
            }
        }
        Self {
            grid,
            paths,
            measures,
            moments,
        }
    }

    /// A flow with the same Dirac mass at every node and path.
    pub fn constant(grid: TimeGrid, paths: usize, measure: EmpiricalMeasure) -> Self {
        let nodes = grid.nodes();
        let mom = measure.moments();
        Self {
            grid,
            paths,
            measures: vec![measure; nodes * paths],
            moments: vec![mom; nodes * paths],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.measures.len() / self.paths.max(1)
    }

    pub fn measure(&self, n: usize, j: usize) -> &EmpiricalMeasure {
        &self.measures[n * self.paths + j]
    }

    pub fn moments(&self, n: usize, j: usize) -> MeasureMoments {
        self.moments[n * self.paths + j]
    }

    pub fn means_at(&self, n: usize) -> Vec<f64> {
        (0..self.paths).map(|j| self.moments(n, j).mean).collect()
    }

    /// Sub-flow on nodes `start..=end`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let grid = self.grid.window(start, end);
        let range = start * self.paths..(end + 1) * self.paths;
        Self {
            grid,
            paths: self.paths,
            measures: self.measures[range.clone()].to_vec(),
            moments: self.moments[range].to_vec(),
        }
    }

    /// `max_n (mean_j W2(m_n^j, m'_n^j)²)^{1/2}`: the sup-over-grid distance
    /// used to monitor measure-flow iterations.
    pub fn distance(&self, other: &MeasureFlow) -> Result<f64> {
        if self.paths != other.paths || self.measures.len() != other.measures.len() {
            return Err(Error::GridMismatch("measure flows of different shape".into()));
        }
        let mut worst = 0.0_f64;
        for n in 0..self.nodes() {
            let mut acc = 0.0;
            for j in 0..self.paths {
                let d = w2(self.measure(n, j), other.measure(n, j))?;
                acc += d * d;
            }
            worst = worst.max((acc / self.paths as f64).sqrt());
        }
        Ok(worst)
    }
}
