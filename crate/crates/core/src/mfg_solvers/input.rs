use crate::error::{Error, Result};
use crate::forward_sim::PathTable;

/// Additive inputs of the γ-scaled system: forcing on the drift, both
/// volatilities and the adjoint driver, plus a terminal input.
#[derive(Debug, Clone)]
pub struct InputPerturbation {
    pub b: PathTable,
    pub sigma: PathTable,
    pub sigma_tilde: PathTable,
    pub f: PathTable,
    /// Terminal input, indexed `j·K + k`.
    pub g: Vec<f64>,
}

impl InputPerturbation {
    pub fn zeros(paths: usize, particles: usize, steps: usize) -> Self {
        let z = PathTable::zeros(paths, particles, steps);
        Self {
            b: z.clone(),
            sigma: z.clone(),
            sigma_tilde: z.clone(),
            f: z,
            g: vec![0.0; paths * particles],
        }
    }

    pub fn new(b: PathTable, sigma: PathTable, sigma_tilde: PathTable, f: PathTable, g: Vec<f64>) -> Result<Self> {
        let ok = b.same_shape(&sigma)
            && b.same_shape(&sigma_tilde)
            && b.same_shape(&f)
            && g.len() == b.paths() * b.particles();
        if !ok {
            return Err(Error::DimensionMismatch("input components have different shapes".into()));
        }
        if [&b, &sigma, &sigma_tilde, &f].iter().any(|t| t.data().iter().any(|v| !v.is_finite()))
            || g.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                name: "input".into(),
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self {
            b,
            sigma,
            sigma_tilde,
            f,
            g,
        })
    }

    /// `(E[|I^g|² + Σ_n |(I^b, I^σ, I^σ̃, I^f)_n|²Δt])^{1/2}`.
    pub fn i_norm(&self, dt: f64) -> f64 {
        let paths = (self.b.paths() * self.b.particles()) as f64;
        let running: f64 = [&self.b, &self.sigma, &self.sigma_tilde, &self.f]
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * dt;
        let terminal: f64 = self.g.iter().map(|v| v * v).sum();
        ((running + terminal) / paths).sqrt()
    }

    /// Norm of the difference of two inputs.
    pub fn i_distance(&self, other: &InputPerturbation, dt: f64) -> f64 {
        let sub = |a: &PathTable, b: &PathTable| {
            PathTable::from_fn(a.paths(), a.particles(), a.len(), |j, n, k| a.get(j, k, n) - b.get(j, k, n))
        };
        let d = InputPerturbation {
            b: sub(&self.b, &other.b),
            sigma: sub(&self.sigma, &other.sigma),
            sigma_tilde: sub(&self.sigma_tilde, &other.sigma_tilde),
            f: sub(&self.f, &other.f),
            g: self.g.iter().zip(&other.g).map(|(a, b)| a - b).collect(),
        };
        d.i_norm(dt)
    }
}
