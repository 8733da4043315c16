use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("vertex {vertex:?} is outside a level of resolution {resolution}")]
    VertexOutOfBounds { vertex: [u32; 3], resolution: u32 },

    #[error("degenerate scene: no occupied cell")]
    EmptyOccupancy,

    #[error("slot {slot} of level {level} has no vertex with positive area of effect")]
    InvalidSlot { level: usize, slot: usize },

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("probability {0} is outside the coding range")]
    ProbabilityRange(f64),

    #[error("negative rate weight {0}")]
    NegativeLambda(f64),

    #[error("forward cache does not match the network state")]
    StaleCache,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),

    #[error("checksum mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("truncated payload")]
    Truncated,

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("slot {slot} of level {level} was queried but is not coded")]
    UndecodableSlot { level: usize, slot: usize },

    #[error("encoder and verification decode disagree at {0}")]
    Verification(String),

    #[error("training diverged at iteration {0}")]
    Diverged(usize),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serialization(String),
}

/// Coarse failure class, used by the command-line front end to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Unknown { .. } | Error::NegativeLambda(_) => ErrorClass::Config,
            Error::NonFinite(_) | Error::Diverged(_) | Error::StaleCache => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
