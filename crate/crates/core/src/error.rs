use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate scale: column {column} is constant")]
    DegenerateScale { column: usize },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("separation detected in logistic fit: {0}")]
    Separation(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("no convergence: {0}")]
    Convergence(String),

    #[error("odds overflow: fitted membership probability is 0 for {count} rows")]
    OddsOverflow { count: usize },

    #[error("proportional scaling pushed {count} probabilities to 1 or above")]
    RescaleOverflow { count: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input or configuration rather than
    /// by numerical breakdown.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Shape(_)
                | Error::DegenerateScale { .. }
                | Error::Config(_)
                | Error::Input(_)
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
