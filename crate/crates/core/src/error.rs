use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss diverged at step {step}")]
    Divergence { step: usize },

    #[error("sample {sample_id} diverged at step {step}")]
    SampleDivergence { sample_id: u64, step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("indenter footprint outside the image after {tries} placement attempts")]
    Placement { tries: usize },

    #[error("sample {sample_id} has no pose label")]
    Unlabeled { sample_id: u64 },

    #[error("every SGLD chain diverged")]
    NoValidChains,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },

    #[error("truncated {format} file: {detail}")]
    Truncated {
        format: &'static str,
        detail: String,
    },

    #[error("latent dimension mismatch: header says {header}, got {found}")]
    LatentDimMismatch { header: usize, found: usize },

    #[error("trunk digest mismatch: functaset was built with {expected}, trunk is {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("malformed {format} data: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }

    /// Short stable name used in log lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } | Error::SampleDivergence { .. } => "divergence",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Dataset(_) => "dataset",
            Error::Placement { .. } => "placement",
            Error::Unlabeled { .. } => "unlabeled",
            Error::NoValidChains => "no_valid_chains",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::LatentDimMismatch { .. } => "latent_dim_mismatch",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for this error: 1 usage, 2 I/O or format, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. }
            | Error::SampleDivergence { .. }
            | Error::NoValidChains
            | Error::NonFinite(_) => 3,
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
