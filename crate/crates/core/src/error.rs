use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible supports: {0} atoms vs {1} atoms")]
    IncompatibleSupports(usize, usize),

    #[error("empty measure")]
    EmptyMeasure,

    #[error("non-finite atom at index {0}")]
    NonFiniteAtom(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("minimizer bracket failure at u-range [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("non-finite state at step {step}, path {path}, particle {particle}")]
    NonFiniteState {
        step: usize,
        path: usize,
        particle: usize,
    },

    #[error("picard iteration did not converge in {iterations} iterations (last residual {last:.3e})")]
    NotConverged {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("measure-flow iteration diverged after {iterations} sweeps")]
    Diverged { iterations: usize, history: Vec<f64> },

    #[error("continuation stalled at gamma = {gamma:.4} (step {eta:.2e})")]
    ContinuationStalled { gamma: f64, eta: f64 },

    #[error("interval fixed point failed to contract on [{start:.4}, {end:.4}] after {halvings} halvings")]
    StitchingFailed {
        start: f64,
        end: f64,
        halvings: usize,
    },

    #[error("non-solvable LQ data: {0}")]
    NonSolvableLq(String),

    #[error("no oracle: {0}")]
    NoOracle(String),

    #[error("deviation solver failed: {0}")]
    Inconclusive(String),
}
