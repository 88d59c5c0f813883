use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible coordinate frames")]
    FrameMismatch,

    #[error("coordinate out of range: {0}")]
    CoordinateRange(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("linear predictor overflow")]
    LinearPredictorOverflow,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid initialization")]
    InvalidInitialization,

    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed input file, with the 1-based line number when known.
    #[error("{path}:{line}: {message}")]
    Ingest { path: String, line: usize, message: String },

    #[error("fold plan: {0}")]
    Fold(String),

    #[error("systematic error unidentifiable")]
    Unidentifiable,

    #[error("site mismatch: {0}")]
    SiteMismatch(String),

    #[error("site {site}: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{} site(s) failed: {}", .0.len(), summarize_failures(.0))]
    SiteFailures(Vec<Error>),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn summarize_failures(errors: &[Error]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub fn at_site(self, site: impl Into<String>) -> Self {
        Error::Site {
            site: site.into(),
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// a failure while running. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::FrameMismatch
            | Error::CoordinateRange(_)
            | Error::InvalidKernel(_)
            | Error::Empty(_)
            | Error::InvalidParameter(_)
            | Error::LayoutMismatch(_)
            | Error::Config(_)
            | Error::Ingest { .. }
            | Error::Fold(_)
            | Error::SiteMismatch(_)
            | Error::Csv(_) => true,
            Error::Site { source, .. } | Error::Stage { source, .. } => source.is_validation(),
            Error::SiteFailures(all) => all.iter().all(Error::is_validation),
            _ => false,
        }
    }
}
