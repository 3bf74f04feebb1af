use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// The sampling protocol divides by `num_classes - 1`.
    #[error("sampling protocol undefined for {num_classes} class(es)")]
    ProtocolUndefined { num_classes: usize },

    #[error("cannot build class-balanced sampler: class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("no class centroid is populated yet")]
    CentroidsNotReady,

    #[error("{path}: row {row}: {message}")]
    CsvRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    CsvFile { path: PathBuf, message: String },

    #[error("training aborted at iteration {iteration}: non-finite {component}")]
    NonFinite { component: String, iteration: usize },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("config: {0}")]
    Config(String),

    #[error("seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for problems with the configuration or inputs rather than with
    /// training itself.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::ProtocolUndefined { .. }
            | Error::EmptyClass { .. }
            | Error::CsvRow { .. }
            | Error::CsvFile { .. }
            | Error::UnknownVariant(_)
            | Error::Json(_) => true,
            Error::Run { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
