use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("non-finite integrand value {value} at node {node}")]
    Domain { node: usize, value: f64 },

    #[error("absolute continuity violated at nodes {nodes:?}")]
    AbsoluteContinuity { nodes: Vec<usize> },

    #[error("absolute continuity violated in the row at control node {control_node}, state node {state_node} (outcome nodes {nodes:?})")]
    RowAbsoluteContinuity {
        control_node: usize,
        state_node: usize,
        nodes: Vec<usize>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid feature: {0}")]
    InvalidFeature(String),

    #[error("features are not algebraically independent (min Gram eigenvalue {min_eigenvalue:e})")]
    NotIndependent { min_eigenvalue: f64 },

    #[error("infeasible constraint {index}: target {target} outside achievable range [{lower}, {upper}]")]
    InfeasibleConstraints {
        index: usize,
        target: f64,
        lower: f64,
        upper: f64,
    },

    #[error("multipliers diverged (|theta|_inf = {theta_norm:e})")]
    DivergingMultipliers { theta_norm: f64, theta: Vec<f64> },

    #[error("multiplier solve did not converge after {iterations} iterations (|grad|_inf = {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        theta: Vec<f64>,
    },

    #[error("exponential overflow at node {node} (exponent {exponent})")]
    Overflow { node: usize, exponent: f64 },

    #[error("step {k}, state node {node}: {source}")]
    Step {
        k: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("trip {trip_id}: {reason}")]
    TripValidation { trip_id: String, reason: String },

    #[error("channel `{name}` not found; available channels: {available:?}")]
    MissingChannel { name: String, available: Vec<String> },

    #[error("step {k}: conditioning bin {bin} holds {count} samples (need {required}); use gaussian_maxent or a positive smoothing")]
    SparseBin {
        k: usize,
        bin: usize,
        count: usize,
        required: usize,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

impl Error {
    /// Strips step tags and returns the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn at_step(self, k: usize, node: usize) -> Error {
        Error::Step {
            k,
            node,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
