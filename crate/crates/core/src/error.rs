use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IveError {
    #[error("singular parameterization: |{name}| = {value:e} is below the floor {floor:e}")]
    SingularParameterization {
        name: &'static str,
        value: f64,
        floor: f64,
    },

    #[error("degenerate direction: quadratic form w^H C w = {0:e} is below the floor")]
    DegenerateDirection(f64),

    #[error("degenerate statistic {name} = {value:e} for dataset {k}, block {t}")]
    DegenerateStatistic {
        name: &'static str,
        value: f64,
        k: usize,
        t: usize,
    },

    #[error("score function evaluated at s = 0")]
    SingularScore,

    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("random matrix generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for IveError {
    fn from(e: std::io::Error) -> Self {
        IveError::Io(e.to_string())
    }
}

impl From<csv::Error> for IveError {
    fn from(e: csv::Error) -> Self {
        IveError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for IveError {
    fn from(e: serde_json::Error) -> Self {
        IveError::Config(e.to_string())
    }
}
