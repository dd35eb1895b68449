use thiserror::Error;

/// Crate-wide error type.
///
/// Numeric building blocks (`autodiff`, `dsp`) report shape and argument
/// violations; the pipeline layers add I/O, format, and state errors on top.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors fed to `op` do not have compatible shapes.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A scalar argument (stride, dilation, index, ...) is out of range for `op`.
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// A configuration field failed validation.
    #[error("config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    /// A WAV file could not be decoded or described something unsupported.
    #[error("wav {path}: {detail}")]
    Wav { path: String, detail: String },

    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint file is malformed or belongs to a different configuration.
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    /// Corpus metadata is missing, malformed, or inconsistent with a request.
    #[error("corpus: {0}")]
    Corpus(String),

    /// A trial list, score file, or embedding archive is malformed.
    #[error("{kind} {path}: line {line}: {detail}")]
    Format {
        kind: &'static str,
        path: String,
        line: usize,
        detail: String,
    },

    /// The verification backend was asked to do something its fitted state
    /// cannot support (unknown utterance, empty trial list, ...).
    #[error("backend: {0}")]
    Backend(String),

    /// Training produced a non-finite loss and stopped.
    #[error("training diverged in stage {stage}, epoch {epoch}: loss = {loss}")]
    Diverged { stage: u8, epoch: usize, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
