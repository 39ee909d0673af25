use std::path::PathBuf;

/// Errors raised anywhere in the audit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown accent label `{0}`")]
    UnknownAccent(String),

    #[error("utterance text is empty")]
    EmptyText,

    #[error("token id {token} is outside the vocabulary of {vocab_size} tokens")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("speaker `{speaker}` appears in both the {first} and {second} splits")]
    SpeakerOverlap {
        speaker: String,
        first: String,
        second: String,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("waveform has {len} samples but one frame needs {frame_size}")]
    WaveformTooShort { len: usize, frame_size: usize },

    #[error("target needs at least {required} frames but only {frames} are available")]
    InfeasibleTarget { required: usize, frames: usize },

    #[error("layer {layer} is outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("requested {k} directions but only rank {rank} is available")]
    RankDeficient { k: usize, rank: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("basis columns are not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training did not reach its targets: {0}")]
    NonConvergence(String),

    #[error("missing `{}`; run `{command}` first", path.display())]
    MissingDependency { path: PathBuf, command: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 missing stage dependency, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingDependency { .. } => 2,
            Error::Numerical(_) | Error::NonConvergence(_) => 3,
            _ => 1,
        }
    }
}
