use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform time grid. A grid may be a window of a larger grid: `offset` is
/// the global index of its first node, so times and noise lookups stay
/// aligned with the parent grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
    offset: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "n_steps".into(),
                reason: "must be positive".into(),
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "horizon".into(),
                reason: format!("must be positive and finite, got {horizon}"),
            });
        }
        Ok(Self {
            dt: horizon / steps as f64,
            steps,
            offset: 0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Time of local node `n`.
    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        (self.offset + n) as f64 * self.dt
    }

    pub fn start(&self) -> f64 {
        self.time(0)
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    /// Local nodes `start..=end` as a grid of their own.
    pub fn window(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.steps, "window {start}..={end} of {} steps", self.steps);
        Self {
            dt: self.dt,
            steps: end - start,
            offset: self.offset + start,
        }
    }

    /// Same horizon with `factor` times fewer steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 || self.offset % factor != 0 {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        Ok(Self {
            dt: self.dt * factor as f64,
            steps: self.steps / factor,
            offset: self.offset / factor,
        })
    }
}
