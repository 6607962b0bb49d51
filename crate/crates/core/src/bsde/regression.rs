//! Least-squares conditional expectations for one backward step.
//!
//! Samples are pooled over all common paths. Regressors are monomials in the
//! particle state x and the conditional mean m̄ of its common path, which is
//! known at time t_n, so the fit never looks at future common noise beyond
//! the current increment.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Monomials x^a·m̄^b used for the conditional expectation of p_{n+1},
/// ordered so that dropping from the end lowers the degree.
pub const P_BASIS: [(i32, i32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Monomials used for q and q̃.
pub const Q_BASIS: [(i32, i32); 3] = [(0, 0), (1, 0), (0, 1)];

/// Largest accepted condition number of a standardized Gram matrix.
pub const MAX_CONDITION: f64 = 1e12;

#[inline]
fn monomial(x: f64, mb: f64, (a, b): (i32, i32)) -> f64 {
    let xa = match a {
        0 => 1.0,
        1 => x,
        _ => x * x,
    };
    let mb_b = match b {
        0 => 1.0,
        1 => mb,
        _ => mb * mb,
    };
    xa * mb_b
}

/// Fitted representation of one backward step, in raw monomial
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepFit {
    pub p: [f64; 6],
    pub q: [f64; 3],
    pub q_tilde: [f64; 3],
}

impl StepFit {
    /// Fitted E_n[p_{n+1}] at (x, m̄).
    #[inline]
    pub fn p_hat(&self, x: f64, mb: f64) -> f64 {
        self.p[0] + self.p[1] * x + self.p[2] * mb + self.p[3] * x * x + self.p[4] * x * mb + self.p[5] * mb * mb
    }

    #[inline]
    pub fn q_hat(&self, x: f64, mb: f64) -> f64 {
        self.q[0] + self.q[1] * x + self.q[2] * mb
    }

    #[inline]
    pub fn q_tilde_hat(&self, x: f64, mb: f64) -> f64 {
        self.q_tilde[0] + self.q_tilde[1] * x + self.q_tilde[2] * mb
    }

    /// `(1−θ)·self + θ·other`, coefficient-wise.
    pub fn blend(&self, other: &StepFit, theta: f64) -> StepFit {
        let mix = |a: f64, b: f64| (1.0 - theta) * a + theta * b;
        let mut out = *self;
        for i in 0..6 {
            out.p[i] = mix(self.p[i], other.p[i]);
        }
        for i in 0..3 {
            out.q[i] = mix(self.q[i], other.q[i]);
            out.q_tilde[i] = mix(self.q_tilde[i], other.q_tilde[i]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StepDiagnostics {
    /// Coefficient of determination of the p_{n+1} fit.
    pub r2: f64,
    /// Condition number of the standardized Gram matrix actually used.
    pub condition: f64,
    /// Columns removed because they were constant or ill-conditioned.
    pub dropped: usize,
    /// Columns removed because of ill-conditioning only.
    pub fallbacks: usize,
}

/// Data of one backward step: states and conditional means at t_n,
/// regression target at t_{n+1}, and the increments between them.
pub struct StepData<'a> {
    pub paths: usize,
    pub particles: usize,
    pub x: &'a (dyn Fn(usize) -> &'a [f64] + Sync),
    pub y: &'a (dyn Fn(usize) -> &'a [f64] + Sync),
    pub mean: &'a [f64],
    pub dw: &'a (dyn Fn(usize) -> &'a [f64] + Sync),
    pub dw_common: &'a [f64],
    pub dt: f64,
}

#[derive(Clone)]
struct Gram {
    dim: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yy: f64,
}

impl Gram {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            xtx: vec![0.0; dim * dim],
            xty: vec![0.0; dim],
            yy: 0.0,
        }
    }

    #[inline]
    fn add(&mut self, z: &[f64], y: f64) {
        let d = self.dim;
        for a in 0..d {
            let za = z[a];
            self.xty[a] += za * y;
            let row = &mut self.xtx[a * d..a * d + d];
            for b in a..d {
                row[b] += za * z[b];
            }
        }
        self.yy += y * y;
    }

    fn merge(&mut self, o: &Gram) {
        for (a, b) in self.xtx.iter_mut().zip(&o.xtx) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&o.xty) {
            *a += b;
        }
        self.yy += o.yy;
    }

    /// Sub-system on `cols`, symmetrized.
    fn select(&self, cols: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim;
        let n = cols.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (i, &ci) in cols.iter().enumerate() {
            b[i] = self.xty[ci];
            for (k, &ck) in cols.iter().enumerate() {
                let (lo, hi) = if ci <= ck { (ci, ck) } else { (ck, ci) };
                a[(i, k)] = self.xtx[lo * d + hi];
            }
        }
        (a, b)
    }
}

/// Sums per-path partial accumulators in path order, so the result does not
/// depend on how rayon schedules the paths.
fn accumulate<T: Send + Sync + Clone>(paths: usize, init: T, per_path: impl Fn(usize, &mut T) + Sync, merge: impl Fn(&mut T, &T)) -> T {
    let partials: Vec<T> = (0..paths)
        .into_par_iter()
        .map(|j| {
            let mut acc = init.clone();
            per_path(j, &mut acc);
            acc
        })
        .collect();
    let mut total = init;
    for p in &partials {
        merge(&mut total, p);
    }
    total
}

/// Solves the normal equations on `cols`, dropping trailing columns while
/// the system is ill-conditioned. Returns the coefficients (zero for dropped
/// columns), the condition number and the number of fallbacks.
fn solve_with_fallback(gram: &Gram, mut cols: Vec<usize>, keep: usize) -> (Vec<f64>, f64, usize) {
    let mut fallbacks = 0;
    loop {
        if cols.is_empty() {
            return (vec![0.0; gram.dim], 1.0, fallbacks);
        }
        let (a, b) = gram.select(&cols);
        let eig = a.clone().symmetric_eigen();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for &e in eig.eigenvalues.iter() {
            lo = lo.min(e);
            hi = hi.max(e);
        }
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if cond <= MAX_CONDITION || cols.len() <= keep {
            if let Some(ch) = a.cholesky() {
                let sol = ch.solve(&b);
                let mut out = vec![0.0; gram.dim];
                for (i, &c) in cols.iter().enumerate() {
                    out[c] = sol[i];
                }
                return (out, cond, fallbacks);
            }
            if cols.len() <= keep {
                return (vec![0.0; gram.dim], cond, fallbacks + 1);
            }
        }
        cols.pop();
        fallbacks += 1;
    }
}

/// Column statistics for standardization: mean and standard deviation of
/// every P_BASIS monomial except the constant.
fn column_stats(d: &StepData<'_>) -> ([f64; 6], [f64; 6]) {
    let init = ([0.0f64; 6], [0.0f64; 6]);
    let (s1, s2) = accumulate(
        d.paths,
        init,
        |j, acc| {
            let mb = d.mean[j];
            for &x in (d.x)(j) {
                for (c, &e) in P_BASIS.iter().enumerate().skip(1) {
                    let v = monomial(x, mb, e);
                    acc.0[c] += v;
                    acc.1[c] += v * v;
                }
            }
        },
        |a, b| {
            for c in 0..6 {
                a.0[c] += b.0[c];
                a.1[c] += b.1[c];
            }
        },
    );
    let n = (d.paths * d.particles) as f64;
    let mut mu = [0.0; 6];
    let mut sd = [1.0; 6];
    for c in 1..6 {
        mu[c] = s1[c] / n;
        sd[c] = (s2[c] / n - mu[c] * mu[c]).max(0.0).sqrt();
    }
    sd[0] = 1.0;
    (mu, sd)
}

fn is_degenerate(mu: f64, sd: f64) -> bool {
    sd <= 1e-9 * (1.0 + mu.abs())
}

/// Residual sum of squares of `y − z·β` over the accumulated samples,
/// restricted to the columns where `beta` is nonzero.
fn residual_ss(g: &Gram, beta: &[f64]) -> f64 {
    let d = g.dim;
    let mut ss = g.yy;
    for a in 0..d {
        if beta[a] == 0.0 {
            continue;
        }
        ss -= 2.0 * beta[a] * g.xty[a];
        for b in 0..d {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            ss += beta[a] * beta[b] * g.xtx[lo * d + hi];
        }
    }
    ss.max(0.0)
}

/// Regresses p_{n+1} jointly on the P_BASIS monomials and on the Q_BASIS
/// monomials times ΔW/√Δt and ΔW̃/√Δt. The martingale columns give q and q̃
/// and, because they absorb the increment noise, act as control variates
/// for the conditional expectation. Without them the m̄ coefficients would
/// see the common-noise variance of only `paths` independent draws.
pub fn fit_step(d: &StepData<'_>) -> (StepFit, StepDiagnostics) {
    let (mu, sd) = column_stats(d);
    let on: [bool; 6] = std::array::from_fn(|c| c == 0 || !is_degenerate(mu[c], sd[c]));
    let dropped = on.iter().filter(|&&b| !b).count();
    let rs = 1.0 / d.dt.sqrt();

    // columns 0..6: standardized P_BASIS; 6..12: [1, x̃, m̃]·ΔW/√Δt then
    // [1, x̃, m̃]·ΔW̃/√Δt
    let gram = accumulate(
        d.paths,
        Gram::new(12),
        |j, g| {
            let mb = d.mean[j];
            let (xs, ys, dws) = ((d.x)(j), (d.y)(j), (d.dw)(j));
            let dwc = d.dw_common[j] * rs;
            let mut z = [0.0; 12];
            for k in 0..d.particles {
                let x = xs[k];
                z[0] = 1.0;
                for c in 1..6 {
                    z[c] = if on[c] { (monomial(x, mb, P_BASIS[c]) - mu[c]) / sd[c] } else { 0.0 };
                }
                let dw = dws[k] * rs;
                z[6] = dw;
                z[7] = z[1] * dw;
                z[8] = z[2] * dw;
                z[9] = dwc;
                z[10] = z[1] * dwc;
                z[11] = z[2] * dwc;
                g.add(&z, ys[k]);
            }
        },
        Gram::merge,
    );

    // ill-conditioning drops from the end: m̄ then x terms, higher degree first
    // with one common path ΔW̃ is constant across samples and q̃ is not
    // identified
    let common = d.paths > 1;
    let priority = [0, 6, 9, 1, 7, 10, 2, 8, 11, 3, 4, 5];
    let cols: Vec<usize> = priority
        .into_iter()
        .filter(|&c| match c {
            0 | 6 => true,
            9 => common,
            7 => on[1],
            10 => on[1] && common,
            8 => on[2],
            11 => on[2] && common,
            c => on[c],
        })
        .collect();
    let (beta, cond, fallbacks) = solve_with_fallback(&gram, cols, if common { 3 } else { 2 });

    let mut p = [0.0; 6];
    p[0] = beta[0];
    for c in 1..6 {
        if beta[c] != 0.0 {
            p[c] = beta[c] / sd[c];
            p[0] -= beta[c] * mu[c] / sd[c];
        }
    }
    let unstd = |g0: f64, gx: f64, gm: f64| {
        let mut c = [g0 * rs, 0.0, 0.0];
        if on[1] {
            c[1] = gx * rs / sd[1];
            c[0] -= gx * rs * mu[1] / sd[1];
        }
        if on[2] {
            c[2] = gm * rs / sd[2];
            c[0] -= gm * rs * mu[2] / sd[2];
        }
        c
    };

    let n = gram.xtx[0];
    let ss_tot = gram.yy - gram.xty[0] * gram.xty[0] / n;
    let mut beta_p = beta.clone();
    beta_p[6..].iter_mut().for_each(|b| *b = 0.0);
    let ss_res = residual_ss(&gram, &beta_p);
    let r2 = if ss_tot > 1e-300 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let fit = StepFit {
        p,
        q: unstd(beta[6], beta[7], beta[8]),
        q_tilde: unstd(beta[9], beta[10], beta[11]),
    };
    let diag = StepDiagnostics {
        r2,
        condition: cond,
        dropped: dropped + fallbacks,
        fallbacks,
    };
    (fit, diag)
}
