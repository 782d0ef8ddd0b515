use thiserror::Error;

/// Errors raised by model construction, condensing, the distributed solvers and the oracle.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("inconsistent topology: {0}")]
    Topology(String),

    /// Row `row` of the working set is linearly dependent on the rows before it.
    #[error("agent {agent}: working-set row {row} is linearly dependent")]
    RankDeficient { agent: usize, row: usize },

    /// The reduced Hessian `Zᵀ H Z` has a pivot below the threshold.
    #[error("agent {agent}: reduced Hessian is not positive definite (pivot {pivot:e})")]
    ReducedHessianIndefinite { agent: usize, pivot: f64 },

    #[error("agent {agent}: Gram matrix of the working set is singular (pivot {pivot:e})")]
    SingularGram { agent: usize, pivot: f64 },

    #[error("CG curvature pᵀSp = {sigma:e} is not positive with residual {residual:e}")]
    NonPositiveCurvature { sigma: f64, residual: f64 },

    #[error("inconsistent multiplier on coupling row {row}: {left} vs {right}")]
    InconsistentShared { row: usize, left: f64, right: f64 },

    #[error("DCG did not converge in {iterations} iterations (residual {residual:e})")]
    DcgMaxIter {
        iterations: usize,
        residual: f64,
        /// Per-agent multipliers of the last iterate.
        best: Vec<Vec<f64>>,
    },

    #[error("no feasible initial point after {rounds} rounds")]
    InfeasibleStart { rounds: usize },

    #[error("agent {agent}: iterate violates inequality row {row} by {violation:e}")]
    InfeasibleIterate {
        agent: usize,
        row: usize,
        violation: f64,
    },

    #[error("active-set method exceeded {limit} outer iterations")]
    OuterLimit {
        limit: usize,
        /// (agent, row, added) for every working-set change.
        trace: Vec<(usize, usize, bool)>,
    },

    #[error("ADMM did not converge in {iterations} iterations")]
    AdmmMaxIter { iterations: usize },

    #[error("QP is infeasible: {0}")]
    Infeasible(String),

    #[error("enumeration over {rows} inequality rows exceeds the cap of {cap}")]
    EnumerationCap { rows: usize, cap: usize },

    #[error("fabric: {0}")]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("round {round}: expected {expected} participants, got {actual}")]
    MissingParticipant {
        round: u64,
        expected: usize,
        actual: usize,
    },

    #[error("agents {from} -> {to} are not neighbors")]
    UnknownLink { from: usize, to: usize },

    #[error("payload {from} -> {to}: expected {expected} floats, got {actual}")]
    PayloadSize {
        from: usize,
        to: usize,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
