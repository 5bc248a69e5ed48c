use std::fmt;
use std::io;

use thiserror::Error;

/// Location of a non-finite entry in a final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Weight { row: usize, col: usize },
    Bias { row: usize },
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entry::Weight { row, col } => write!(f, "weight[{row}][{col}]"),
            Entry::Bias { row } => write!(f, "bias[{row}]"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at {0}")]
    NonFinite(Entry),

    #[error("unknown indicator id {0} (valid ids are 0..62)")]
    UnknownIndicatorId(usize),

    #[error("duplicate indicator id {0}")]
    DuplicateIndicatorId(usize),

    #[error("indicator selection is empty")]
    EmptySelection,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },

    #[error("batch too small: {found} models, at least {required} required")]
    BatchTooSmall { found: usize, required: usize },

    #[error("clean model set is empty")]
    EmptyCleanSet,

    #[error("degenerate configuration set: {0}")]
    DegenerateConfig(String),

    #[error("configuration set has no backdoored models")]
    NoBackdoorModels,

    #[error("feature table labels are degenerate (need both clean and backdoor rows)")]
    DegenerateLabels,

    #[error("too few clean rows: {found}, at least {required} required")]
    TooFewCleans { found: usize, required: usize },

    #[error("invalid attack: {0}")]
    InvalidAttack(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid labels file: {0}")]
    Labels(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
