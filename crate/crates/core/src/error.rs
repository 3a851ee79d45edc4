use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("separation detected: coefficient {index} reached {value:.3} on the logit scale")]
    Separation { index: usize, value: f64 },

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("insufficient complete cases at visit {visit} in stratum {stratum}: {observed} observed, {required} required")]
    InsufficientCases {
        visit: usize,
        stratum: String,
        observed: usize,
        required: usize,
    },

    #[error("collinear predictors at visit {visit} in stratum {stratum}")]
    Collinear { visit: usize, stratum: String },

    #[error("degenerate group probability {0}")]
    DegenerateProbability(f64),

    #[error("cannot pool records of different estimands")]
    MixedEstimands,

    #[error("bootstrap failed on {failed} of {total} resamples")]
    BootstrapFailure { failed: usize, total: usize },

    #[error("underdetermined: {0}")]
    Underdetermined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, data files) rather
    /// than failures during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::Io { .. } | Error::Csv(_) | Error::Domain(_)
        )
    }
}
