use thiserror::Error;

/// Errors produced by the game model, the solvers and the learning loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feasible sampling failed: no acceptable point within a budget of {budget} trials")]
    SamplingFailed { budget: usize },

    #[error("unbounded local set for agent {agent}: a bounded sampling box is required")]
    UnboundedSampling { agent: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("QP infeasible")]
    QpInfeasible,

    #[error(
        "QP not solved within {iterations} iterations \
         (primal residual {primal_residual:e}, dual residual {dual_residual:e})"
    )]
    QpMaxIterations {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("best-response infeasible given opponents (agent {agent})")]
    BestResponseInfeasible { agent: usize },

    #[error("empty preference dataset")]
    EmptyDataset,

    #[error("Riccati divergence for agent {agent} (iterate norm {norm:e})")]
    RiccatiDivergence { agent: usize, norm: f64 },

    #[error("Nash gain iteration did not converge in {sweeps} sweeps (last deviation {last:e})")]
    NashNoConvergence { sweeps: usize, trace: Vec<f64>, last: f64 },

    #[error("degenerate cost range in profile evaluation")]
    DegenerateNormalizer,

    #[error("objective evaluation failed: {0}")]
    Objective(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                iteration,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
