use std::path::PathBuf;

use crate::data::Arm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate bandwidth: all pairwise distances are zero")]
    DegenerateBandwidth,

    #[error("only one treatment arm present ({0:?}); need samples of both arms")]
    SingleArm(Arm),

    #[error("arm {arm:?} has {found} samples, need at least {required}")]
    InsufficientArm { arm: Arm, found: usize, required: usize },

    #[error("{context}: matrix is not positive definite (lambda = {lambda:e}); try a larger regulariser")]
    Factorization { context: &'static str, lambda: f64 },

    #[error("normalising constant is zero: {0}")]
    ZeroNormalizer(&'static str),

    #[error("matching produced no matched sets ({unmatched} treated units unmatched)")]
    NoMatchedSets { unmatched: usize },

    #[error("need at least {required} matched sets, found {found}")]
    TooFewSets { found: usize, required: usize },

    #[error("{path}: row {row}: {message}")]
    Csv { path: PathBuf, row: usize, message: String },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("statistic failed on permutation {index} (train labelling {sigma}): {source}")]
    PermutationFailed {
        index: usize,
        sigma: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model fit failed for train labelling {sigma}: {source}")]
    BundleFitFailed {
        sigma: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    CsvParse(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
