use thiserror::Error;

/// Unified error type for the crate.
///
/// Numeric payloads are carried as `f64` regardless of the scalar type the
/// producing computation ran at, so `Error` stays non-generic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid observation policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid segment stats: {0}")]
    InvalidStats(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid ticks: {0}")]
    InvalidTicks(String),

    #[error("table would need {need} bytes, above the cap of {cap} bytes")]
    TableTooLarge { need: u64, cap: u64 },

    #[error("gap {dt} exceeds the table horizon {t_max}")]
    HorizonExceeded { dt: f64, t_max: f64 },

    #[error("operation needs a {expected} policy, table was built for {got}")]
    PolicyMismatch { expected: &'static str, got: &'static str },

    #[error("survival mass degenerate at gap {dt} (value {value:e})")]
    DegenerateSurvival { dt: f64, value: f64 },

    #[error("likelihood vanished at tick {index} (t = {time}); fallback disabled")]
    DegenerateLikelihood { index: usize, time: f64 },

    #[error("table does not match the supplied model: {0}")]
    TableMismatch(String),

    #[error("table file: {0}")]
    TableFormat(String),

    #[error("particle weights collapsed at tick {index} (t = {time}, ess before update {ess:.1})")]
    WeightCollapse { index: usize, time: f64, ess: f64 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}, row {row}: {msg}")]
    CsvData { path: String, row: usize, msg: String },

    #[error("{path}: {msg}")]
    File { path: String, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// File-level failure with the offending path attached.
    pub fn file(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::File { path: path.display().to_string(), msg: err.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
