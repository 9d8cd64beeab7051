use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{col}`")]
    NonNumericCell { row: usize, col: String },
    #[error("W or delta not constant within subject `{0}`")]
    InconsistentWDelta(String),
    #[error("dataset has no subjects")]
    EmptyDataset,
    #[error("dataset has no uncensored subjects (delta = 1)")]
    NoEvents,
    #[error("duplicate subject id `{0}`")]
    DuplicateId(String),
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("subject `{id}`: {reason}")]
    InvalidSubject { id: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema: {0}")]
    Schema(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("no convergence after {iterations} iterations (residual {residual_norm:e})")]
    MaxIterationsExceeded { iterations: usize, residual_norm: f64 },
    #[error("non-finite function value at iteration {iteration}")]
    DivergedNonFinite { iteration: usize },
    #[error("argument {0} outside the domain")]
    DomainError(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events (delta = 1) to fit the Cox model")]
    NoEvents,
    #[error("Cox Newton-Raphson did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("monotone partial likelihood: |gamma| exceeded {0} (complete separation)")]
    MonotoneLikelihood(f64),
    #[error("covariate column {0} is constant")]
    ConstantCovariate(usize),
    #[error("need at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("input lengths disagree: {0}")]
    DimensionMismatch(String),
    #[error("observed information is singular")]
    SingularInformation,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error("Cox fit has {fit} covariates but the dataset has {data}")]
    CovariateMismatch { fit: usize, data: usize },
    #[error("need at least 2 imputations, got {0}")]
    TooFewImputations(usize),
    #[error("coefficient covariance is not positive semidefinite")]
    NonPDCovariance,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("N matrix is singular (condition number {0:e})")]
    SingularN(f64),
    #[error(
        "fixed-effect column(s) {0:?} lie in the random-effects column space for every subject; \
         their coefficients cannot be estimated by the efficient score (drop the column or the \
         matching random effect)"
    )]
    DegenerateColumns(Vec<String>),
    #[error("root has sigma2 = {0} <= 0")]
    NegativeSigma2(f64),
    #[error("no residual degrees of freedom for sigma2")]
    NoResidualDof,
    #[error("sandwich bread matrix is singular")]
    SingularBread,
    #[error(transparent)]
    Solver(#[from] NumericsError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemlError {
    #[error("REML supports exactly one random-effect column, got {0}")]
    UnsupportedRandomEffects(usize),
    #[error("REML search did not converge")]
    NonConvergence,
    #[error("fixed-effects design is rank deficient")]
    SingularDesign,
    #[error("need at least 2 uncensored subjects, got {0}")]
    TooFewUncensored(usize),
    #[error("fits have different parameter layouts")]
    LayoutMismatch,
    #[error("need at least 2 fits to pool, got {0}")]
    TooFewFits(usize),
    #[error("no residual degrees of freedom")]
    NoResidualDof,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("effect size d is zero")]
    ZeroEffect,
    #[error("invalid power specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Reml(#[from] RemlError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error("{0}")]
    Config(String),
}
