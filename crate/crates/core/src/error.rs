use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate row {row}: norm {norm:e} is below 1e-12")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("feature map for image {0} has no tokens")]
    EmptyFeatures(u64),

    #[error("unknown category: {0}")]
    UnknownCategory(String),

    #[error("categories missing from text table: {}", .0.join(", "))]
    MissingCategories(Vec<String>),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {image_id}: {source}")]
    Image {
        image_id: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (files, flags, config) rather
    /// than internal failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::UnknownCategory(_)
                | Error::MissingCategories(_)
                | Error::Dimension { .. }
        )
    }
}
