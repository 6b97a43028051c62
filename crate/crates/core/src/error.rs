use std::path::PathBuf;

use thiserror::Error;

/// Failures when decoding `.hcom` deltas and `.hckpt` checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("truncated input: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion")]
    DegenerateQuaternion,
    #[error("empty cloud")]
    EmptyCloud,
    #[error("degenerate scene bounds")]
    DegenerateBounds,
    #[error("image dimensions {got:?} do not match expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot remove {additions} Gaussians from a base of {base}")]
    RebalanceOverflow { additions: usize, base: usize },
    #[error("invalid `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("missing dataset entry {0}")]
    MissingFile(PathBuf),
    #[error("frame {index} failed: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
