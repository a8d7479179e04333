use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Errors from ECTX creation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EctxError {
    #[error("allocation error: requested {requested} bytes, {available} bytes available")]
    Allocation { requested: u64, available: u64 },
    #[error("allocation error: kernel binary of {binary} bytes does not fit a {requested} byte segment")]
    BinaryTooLarge { binary: u64, requested: u64 },
    #[error("allocation error: {requested} bytes exceeds the SLO memory quota of {quota} bytes")]
    QuotaExceeded { requested: u64, quota: u64 },
    #[error("match rule conflicts with the rule of ECTX {existing}")]
    RuleConflict { existing: usize },
    #[error("invalid SLO policy: {0}")]
    InvalidSlo(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("infeasible rate shares: {0}")]
    InfeasibleShares(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("trace format error at line {line}: {msg}")]
    Trace { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ectx(#[from] EctxError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}
