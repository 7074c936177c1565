use thiserror::Error;

/// Errors raised by the data, model and training layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("group {group} has {available} rows, budget requires {budget}")]
    BudgetInfeasible {
        group: usize,
        available: usize,
        budget: usize,
    },

    #[error("group {0} has no training points")]
    EmptyGroup(usize),

    #[error("target {target} is masked out (probability zero) under cross-entropy")]
    DegenerateTarget { target: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("label {label} out of range for {groups} groups")]
    LabelRange { label: usize, groups: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
