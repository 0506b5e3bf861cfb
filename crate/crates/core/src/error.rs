use std::io;

use thiserror::Error;

use crate::ir::ArrayId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("statement writes array {0} which it also reads")]
    SelfDependency(ArrayId),
    #[error("slice extent {found:?} does not match output extent {expected:?}")]
    ShapeMismatch {
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("strided slices are not supported (step {0})")]
    StridedSlice(i64),
    #[error("invalid slice: {0}")]
    InvalidSlice(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("unknown array {0}")]
    UnknownArray(ArrayId),
    #[error("array {0} already exists")]
    DuplicateArray(ArrayId),
    #[error("malformed dag: {0}")]
    MalformedDag(String),
    #[error("unsupported operator code {0}")]
    UnsupportedOp(u8),
    #[error("extent {extent} is not divisible by {tiles} tiles")]
    IndivisibleShape { extent: usize, tiles: usize },
    #[error("ghost depth {depth:?} does not fit in tile of extent {tile:?}")]
    OffsetExceedsTileWidth { depth: [usize; 2], tile: [usize; 2] },
    #[error("stale halo message for array {array}: epoch {stamp} < completed {completed}")]
    StaleMessage {
        array: ArrayId,
        stamp: u64,
        completed: u64,
    },
    #[error("lost connection to worker {0}")]
    PeerLost(usize),
    #[error("protocol version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("memory daemon unreachable: {0}")]
    DaemonUnreachable(String),
    #[error("unknown allocation id {0}")]
    UnknownAllocation(u64),
    #[error("restart failed: {0}")]
    RestartFailed(String),
    #[error("rescale unavailable: {0}")]
    RescaleUnavailable(String),
    #[error("spawn failed: {0}")]
    SpawnFailed(String),
    #[error("endpoint {0} already in use")]
    PortInUse(String),
    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Stable numeric codes carried in protocol error replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Internal = 1,
    SelfDependency = 2,
    ShapeMismatch = 3,
    StridedSlice = 4,
    InvalidSlice = 5,
    UnknownArray = 6,
    DuplicateArray = 7,
    MalformedDag = 8,
    UnsupportedOp = 9,
    IndivisibleShape = 10,
    OffsetExceedsTileWidth = 11,
    VersionMismatch = 12,
    Malformed = 13,
    SequenceGap = 14,
    RescaleUnavailable = 15,
    RestartFailed = 16,
    DaemonUnreachable = 17,
    PeerLost = 18,
    InvalidShape = 19,
    UnknownAllocation = 20,
    StaleMessage = 21,
    SpawnFailed = 22,
    PortInUse = 23,
    OracleMismatch = 24,
    Io = 25,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> ErrorCode {
        use ErrorCode::*;
        match v {
            2 => SelfDependency,
            3 => ShapeMismatch,
            4 => StridedSlice,
            5 => InvalidSlice,
            6 => UnknownArray,
            7 => DuplicateArray,
            8 => MalformedDag,
            9 => UnsupportedOp,
            10 => IndivisibleShape,
            11 => OffsetExceedsTileWidth,
            12 => VersionMismatch,
            13 => Malformed,
            14 => SequenceGap,
            15 => RescaleUnavailable,
            16 => RestartFailed,
            17 => DaemonUnreachable,
            18 => PeerLost,
            19 => InvalidShape,
            20 => UnknownAllocation,
            21 => StaleMessage,
            22 => SpawnFailed,
            23 => PortInUse,
            24 => OracleMismatch,
            25 => Io,
            _ => Internal,
        }
    }
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::SelfDependency(_) => ErrorCode::SelfDependency,
            Error::ShapeMismatch { .. } => ErrorCode::ShapeMismatch,
            Error::StridedSlice(_) => ErrorCode::StridedSlice,
            Error::InvalidSlice(_) => ErrorCode::InvalidSlice,
            Error::InvalidShape(_) => ErrorCode::InvalidShape,
            Error::UnknownArray(_) => ErrorCode::UnknownArray,
            Error::DuplicateArray(_) => ErrorCode::DuplicateArray,
            Error::MalformedDag(_) => ErrorCode::MalformedDag,
            Error::UnsupportedOp(_) => ErrorCode::UnsupportedOp,
            Error::IndivisibleShape { .. } => ErrorCode::IndivisibleShape,
            Error::OffsetExceedsTileWidth { .. } => ErrorCode::OffsetExceedsTileWidth,
            Error::VersionMismatch { .. } => ErrorCode::VersionMismatch,
            Error::Malformed(_) => ErrorCode::Malformed,
            Error::SequenceGap { .. } => ErrorCode::SequenceGap,
            Error::RescaleUnavailable(_) => ErrorCode::RescaleUnavailable,
            Error::RestartFailed(_) => ErrorCode::RestartFailed,
            Error::DaemonUnreachable(_) => ErrorCode::DaemonUnreachable,
            Error::PeerLost(_) => ErrorCode::PeerLost,
            Error::UnknownAllocation(_) => ErrorCode::UnknownAllocation,
            Error::StaleMessage { .. } => ErrorCode::StaleMessage,
            Error::SpawnFailed(_) => ErrorCode::SpawnFailed,
            Error::PortInUse(_) => ErrorCode::PortInUse,
            Error::OracleMismatch(_) => ErrorCode::OracleMismatch,
            Error::Io(_) => ErrorCode::Io,
            Error::Remote { code, .. } => *code,
        }
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Error {
        Error::Malformed(msg.into())
    }
}
