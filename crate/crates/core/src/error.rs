use thiserror::Error;

/// Failures raised by rule construction, evaluation and inversion.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("value {0} is outside the rule domain")]
    Domain(f64),
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("segment [{lo}, {hi}] has slope {slope:e}, below the strictness floor {min_slope:e}")]
    NotStrict { lo: f64, hi: f64, slope: f64, min_slope: f64 },
    #[error("value {0} lies in the winner-pays-bid no-win region")]
    NoWin(f64),
    #[error("bid strategy is not increasing on the value segment [{lo}, {hi}]")]
    NonInvertible { lo: f64, hi: f64 },
    #[error("scaling by {0} pushes probabilities above one")]
    ScaleOverflow(f64),
    #[error("degenerate linear tail: V = {v} does not exceed B = {b}")]
    DegenerateTail { v: f64, b: f64 },
    #[error("bid allocation rule has zero slope at bid {0}")]
    ZeroDerivative(f64),
    #[error("rules have different domains ({0} vs {1})")]
    DomainMismatch(f64, f64),
}

/// Failures raised by ledgers and rebalancing constructions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("rate {0} must lie in (0, 1]")]
    Rate(f64),
    #[error("dashboard allocation {alloc} at value {value} is below the support floor {eta}")]
    Support { value: f64, alloc: f64, eta: f64 },
    #[error("the splice requires the winner-pays-bid format")]
    Format,
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Failures raised by the single-call instrumentation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingleCallError {
    #[error("exploration probability {0} must lie in (0, 1)")]
    Rho(f64),
    #[error("blackbox returned {0} allocations for {1} agents")]
    Arity(usize, usize),
    #[error("blackbox returned a non-binary allocation {0}")]
    Protocol(f64),
    #[error("isotonic fit needs at least one point")]
    Empty,
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Failures raised while validating or running an experiment.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: dashboard for agent {agent} is not invertible")]
    NonInvertible { stage: usize, agent: usize },
    #[error("stage {stage}: {source}")]
    Rule {
        stage: usize,
        #[source]
        source: RuleError,
    },
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    SingleCall(#[from] SingleCallError),
}
